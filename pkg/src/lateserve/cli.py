"""Command-line entry point: ``lateserve <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Server settings resolve as CLI flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .corpus import (
    CorpusBundle,
    DataError,
    build_indexes,
    read_request_file,
    toy_encode,
    toy_encode_corpus,
)
from .fusion import NORMALIZATIONS
from .loadgen import emit_report, generate_arrivals, run_load, summarize
from .metrics import evaluate, parse_metric, read_qrels, read_run, write_run
from .protocol import (
    MODES,
    Overloaded,
    RemoteError,
    decode_request,
    parse_address,
    send_request,
)
from .server import ServerConfig, read_config_file, serve
from .store import StoreError, open_store

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("lateserve")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("QPS values must be positive")
    return values


# -- subcommands -----------------------------------------------------------

def cmd_build_index(args) -> int:
    manifest = build_indexes(CorpusBundle(Path(args.dense), Path(args.sparse), Path(args.out)))
    print(f"built {manifest['num_docs']} docs (dim {manifest['dim']}, {manifest['total_tokens']} tokens) "
          f"into {args.out}")
    return EXIT_OK


_SERVE_FLAGS = {
    "host": "host", "port": "port", "workers": "workers", "queue_capacity": "queue_capacity",
    "store": "store_path", "store_mode": "store_mode", "sparse_index": "sparse_index_path",
    "alpha": "alpha", "normalization": "normalization",
}


def resolve_server_config(args) -> ServerConfig:
    values: dict = {}
    if args.config:
        values.update(read_config_file(args.config))
    for flag, key in _SERVE_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[key] = v
    try:
        return ServerConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_serve(args) -> int:
    config = resolve_server_config(args)
    server = serve(config)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        stop.wait()
    finally:
        server.stop()
    return EXIT_OK


def _with_mode(payload: str, mode: str | None, suffix: str = "") -> str:
    lines = payload.split("\n")
    if mode:
        lines[1] = mode
    if suffix:
        lines[0] += suffix
    return "\n".join(lines)


def cmd_bench(args) -> int:
    payloads = read_request_file(args.queries)
    if not payloads:
        raise DataError(f"{args.queries}: no queries")
    for p in payloads:
        decode_request(p).validate()
    total = args.n + args.warmup
    batch = []
    for i in range(total):
        suffix = f"#{i // len(payloads)}" if i >= len(payloads) else ""
        batch.append(_with_mode(payloads[i % len(payloads)], args.mode, suffix))
    mode = args.mode or decode_request(payloads[0]).mode
    address = parse_address(args.server)
    levels = {}
    for qps in args.qps:
        schedule = generate_arrivals(qps, total, args.seed)
        records = run_load(address, batch, schedule, timeout=args.timeout)[args.warmup:]
        levels[(qps, mode)] = records
        s = summarize(records, qps, mode)
        row = s.row()
        print(f"qps={qps:g} mode={mode} ok={s.ok} overloaded={s.overloaded} error={s.error} "
              f"p50={row['p50_ms'] or '-'} p95={row['p95_ms'] or '-'} p99={row['p99_ms'] or '-'} ms", flush=True)
    paths = emit_report(levels, args.out, mode)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_search(args) -> int:
    payloads = read_request_file(args.queries)
    run = {}
    failures = 0
    for p in payloads:
        p = _with_mode(p, args.mode)
        qid = p.split("\n", 1)[0]
        try:
            resp = send_request(args.server, p, timeout=args.timeout)
        except (Overloaded, RemoteError) as exc:
            failures += 1
            logger.warning("query %s failed: %s", qid, exc or type(exc).__name__)
            continue
        run[qid] = resp.results
    write_run(run, args.out)
    print(f"wrote {len(run)} ranked lists to {args.out} ({failures} failed)")
    return EXIT_OK if not failures else EXIT_RUNTIME


def cmd_eval(args) -> int:
    metrics = [m for m in args.metrics.split(",") if m.strip()]
    try:
        for m in metrics:
            parse_metric(m)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        scores = evaluate(read_run(args.run), read_qrels(args.qrels), metrics)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for name, value in scores.items():
        print(f"{name}\t{value:.4f}")
    return EXIT_OK


def cmd_toy_encode(args) -> int:
    if args.docs:
        dense, sparse = toy_encode_corpus(args.docs, args.out, args.seed, args.dim)
        print(f"wrote {dense} and {sparse}")
        return EXIT_OK
    if not args.queries:
        raise UsageError("toy-encode needs --queries or --docs")
    store_dim = None
    if args.store:
        with open_store(args.store, "mapped") as handle:
            store_dim = handle.manifest.dim
    n = toy_encode(args.queries, args.out, args.seed, args.dim, args.mode, args.k_candidates,
                   args.k_results, store_dim=store_dim)
    print(f"wrote {n} requests to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lateserve", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-index", help="build the embedding store and sparse index")
    p.add_argument("--dense", required=True, help="dense embeddings (text or binary)")
    p.add_argument("--sparse", required=True, help="sparse vectors, doc_id<TAB>term:weight ...")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("serve", help="run the retrieval server",
                       description="Run the retrieval server. Precedence: flag > config file > default.")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--queue-capacity", type=int, dest="queue_capacity")
    p.add_argument("--store", help="embedding store file")
    p.add_argument("--store-mode", choices=["mapped", "eager"], dest="store_mode")
    p.add_argument("--sparse-index", dest="sparse_index")
    p.add_argument("--alpha", type=float, help="sparse weight in hybrid fusion (default 0.3)")
    p.add_argument("--normalization", choices=NORMALIZATIONS)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="open-loop Poisson load test")
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--queries", required=True, help="request payload file")
    p.add_argument("--qps", type=_csv_floats, required=True, help="comma-separated QPS levels")
    p.add_argument("--n", type=int, default=1000, help="measured queries per level (default 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=MODES, help="override the mode in every request")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--warmup", type=int, default=0, help="leading queries excluded from the report")
    p.add_argument("--timeout", type=float, default=60.0, help="per-request timeout in seconds")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("search", help="send each request once and write a run file")
    p.add_argument("--server", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", required=True, help="run file, query_id<TAB>doc_id<TAB>rank<TAB>score")
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a run file against relevance judgments")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="mrr@10,recall@5,recall@50,success@5")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy-encode", help="deterministic demo encoder for text queries or documents")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--queries", help="text queries, one per line (optionally id<TAB>text)")
    src.add_argument("--docs", help="text documents, one per line; writes corpus inputs to --out dir")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--store", help="check --dim against this store")
    p.add_argument("--mode", choices=MODES, default="hybrid")
    p.add_argument("--k-candidates", type=int, default=200, dest="k_candidates")
    p.add_argument("--k-results", type=int, default=100, dest="k_results")
    p.set_defaults(func=cmd_toy_encode)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lateserve: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StoreError, FileNotFoundError, ValueError) as exc:
        print(f"lateserve: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, RuntimeError) as exc:
        print(f"lateserve: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
