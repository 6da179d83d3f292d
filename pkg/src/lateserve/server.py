"""Multi-stage retrieval service.

A :class:`Searcher` composes the stages (sparse candidates, MaxSim rerank,
hybrid fusion) for one request on the calling thread. :class:`RetrievalServer`
exposes any request handler over TCP: connections are accepted on their own
threads, admitted requests run on a fixed pool of workers, and requests beyond
``queue_capacity`` in flight are answered ``overloaded`` immediately.
"""

from __future__ import annotations

import logging
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .fusion import DEFAULT_ALPHA, FusionConfig, hybrid_rank
from .maxsim import exhaustive_search, rerank
from .protocol import (
    OVERLOADED,
    STAGES,
    ProtocolError,
    RequestValidationError,
    SearchRequest,
    SearchResponse,
    decode_request,
    encode_response,
    recv_frame,
    send_frame,
)
from .sparse import SparseIndex, load_sparse_index, top_k_sparse
from .store import MODES as STORE_MODES
from .store import StoreHandle, open_store

logger = logging.getLogger(__name__)

DEFAULT_PORT = 7700
DEFAULT_QUEUE_CAPACITY = 1024


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    workers: int = 1
    queue_capacity: int = DEFAULT_QUEUE_CAPACITY
    store_path: str | None = None
    store_mode: str = "mapped"
    sparse_index_path: str | None = None
    alpha: float = DEFAULT_ALPHA
    normalization: str = "znorm"

    def validate(self) -> "ServerConfig":
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.store_mode not in STORE_MODES:
            raise ValueError(f"store_mode must be one of {STORE_MODES}")
        if not 0 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")
        FusionConfig(self.alpha, self.normalization)
        return self

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.alpha, self.normalization)

    @classmethod
    def from_mapping(cls, values: dict) -> "ServerConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if raw is None:
                continue
            if key in ("port", "workers", "queue_capacity"):
                kwargs[key] = int(raw)
            elif key == "alpha":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs).validate()


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _ms(seconds: float) -> float:
    return seconds * 1000.0


class Searcher:
    """Runs the four retrieval modes over shared, immutable indexes."""

    def __init__(self, store: StoreHandle, sparse_index: SparseIndex, fusion: FusionConfig | None = None):
        if store.manifest.num_docs != sparse_index.num_docs:
            raise ValueError(f"store has {store.manifest.num_docs} docs, sparse index has {sparse_index.num_docs}")
        self.store = store
        self.sparse_index = sparse_index
        self.fusion = fusion or FusionConfig()

    @classmethod
    def from_config(cls, config: ServerConfig) -> "Searcher":
        if not config.store_path or not config.sparse_index_path:
            raise ValueError("store_path and sparse_index_path are required")
        store = open_store(config.store_path, config.store_mode)
        return cls(store, load_sparse_index(config.sparse_index_path), config.fusion)

    def close(self) -> None:
        self.store.close()

    def handle_search(self, req: SearchRequest) -> SearchResponse:
        req.validate()
        timings = dict.fromkeys(STAGES, 0.0)
        t0 = time.perf_counter()
        num_candidates = 0
        if req.mode == "dense_full":
            t = time.perf_counter()
            results = exhaustive_search(np.asarray(req.dense_query), self.store, req.k_results)
            timings["dense"] = _ms(time.perf_counter() - t)
            num_candidates = self.store.manifest.num_docs
        else:
            t = time.perf_counter()
            cands = top_k_sparse(self.sparse_index, req.sparse_query, req.k_candidates)
            timings["sparse"] = _ms(time.perf_counter() - t)
            if req.mode == "sparse":
                results = cands[: req.k_results]
            elif not cands:
                results = []
            else:
                t = time.perf_counter()
                reranked = rerank(cands, req.dense_query, self.store)
                timings["dense"] = _ms(time.perf_counter() - t)
                num_candidates = len(reranked)
                if req.mode == "rerank":
                    results = [(c.doc_id, c.dense_score) for c in reranked[: req.k_results]]
                else:
                    t = time.perf_counter()
                    fused = hybrid_rank(reranked, self.fusion)
                    timings["fusion"] = _ms(time.perf_counter() - t)
                    results = [(c.doc_id, c.fused_score) for c in fused[: req.k_results]]
        timings["total"] = _ms(time.perf_counter() - t0)
        return SearchResponse(req.query_id, results, timings, num_candidates)

    __call__ = handle_search


def handle_search(searcher: Searcher, request: SearchRequest) -> SearchResponse:
    return searcher.handle_search(request)


class _Admission:
    """Counts requests in flight (queued or executing) against a fixed capacity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.rejected = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    def try_acquire(self) -> bool:
        with self._lock:
            if self._in_flight >= self.capacity:
                self.rejected += 1
                return False
            self._in_flight += 1
            return True

    def release(self) -> None:
        with self._lock:
            self._in_flight -= 1

    @property
    def in_flight(self) -> int:
        return self._in_flight


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 1024


class _ConnectionHandler(socketserver.BaseRequestHandler):
    server: _TCPServer

    def handle(self) -> None:
        owner: RetrievalServer = self.server.owner  # type: ignore[attr-defined]
        sock = self.request
        while True:
            try:
                text = recv_frame(sock)
            except (ProtocolError, OSError, UnicodeDecodeError) as exc:
                logger.debug("dropping connection: %s", exc)
                return
            if text is None:
                return
            try:
                send_frame(sock, owner.dispatch(text))
            except OSError:
                return


class RetrievalServer:
    """TCP front end with bounded admission and a fixed worker pool.

    ``handler`` maps a validated SearchRequest to a SearchResponse and is run on
    exactly one worker thread per request; the server fills in ``queue`` and
    ``total`` timings.
    """

    def __init__(self, handler: Callable[[SearchRequest], SearchResponse],
                 address: tuple[str, int] = ("127.0.0.1", 0), workers: int = 1,
                 queue_capacity: int = DEFAULT_QUEUE_CAPACITY):
        if workers < 1 or queue_capacity < 1:
            raise ValueError("workers and queue_capacity must be >= 1")
        self.handler = handler
        self.workers = workers
        self.admission = _Admission(queue_capacity)
        self.searcher: Searcher | None = None
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="search-worker")
        self._tcp = _TCPServer(address, _ConnectionHandler, bind_and_activate=True)
        self._tcp.owner = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._tcp.server_address[:2]
        return host, port

    def dispatch(self, text: str) -> str:
        try:
            req = decode_request(text).validate()
        except (ProtocolError, RequestValidationError) as exc:
            return f"error: {exc}"
        if not self.admission.try_acquire():
            return OVERLOADED
        admitted = time.perf_counter()
        try:
            future = self._executor.submit(self._run, req, admitted)
            return future.result()
        except RuntimeError as exc:  # executor shut down
            return f"error: {exc}"
        finally:
            self.admission.release()

    def _run(self, req: SearchRequest, admitted: float) -> str:
        started = time.perf_counter()
        try:
            resp = self.handler(req)
        except Exception as exc:
            logger.debug("request %s failed: %s", req.query_id, exc)
            return f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        resp.timings["queue"] = _ms(started - admitted)
        resp.timings["total"] = _ms(time.perf_counter() - admitted)
        return encode_response(resp)

    def start(self) -> "RetrievalServer":
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="accept", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._tcp.serve_forever()

    def stop(self) -> None:
        if self._thread is not None:
            self._tcp.shutdown()
            self._thread.join()
            self._thread = None
        self._tcp.server_close()
        self._executor.shutdown(wait=False, cancel_futures=True)
        if self.searcher is not None:
            self.searcher.close()
            self.searcher = None

    def __enter__(self) -> "RetrievalServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(config: ServerConfig, start: bool = True) -> RetrievalServer:
    """Open the indexes named in ``config`` and start serving.

    Raises on index open failure or if the port cannot be bound.
    """
    config.validate()
    searcher = Searcher.from_config(config)
    try:
        server = RetrievalServer(searcher.handle_search, (config.host, config.port),
                                 config.workers, config.queue_capacity)
    except OSError:
        searcher.close()
        raise
    server.searcher = searcher
    logger.info("serving %s (%s store, %d docs) on %s:%d with %d worker(s)", config.store_path,
                config.store_mode, searcher.store.manifest.num_docs, *server.address, config.workers)
    return server.start() if start else server
