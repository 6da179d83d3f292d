"""Open-loop load generation with Poisson arrivals and tail-latency reporting."""

from __future__ import annotations

import csv
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .protocol import (
    Overloaded,
    SearchRequest,
    SearchResponse,
    encode_request,
    send_request,
)

logger = logging.getLogger(__name__)

OUTCOMES = ("ok", "overloaded", "error")
CSV_COLUMNS = ["qps", "mode", "n", "ok", "overloaded", "error", "p50_ms", "p95_ms", "p99_ms", "achieved_qps"]


@dataclass(frozen=True)
class ArrivalSchedule:
    timestamps: np.ndarray  # seconds from the start of the run
    qps: float
    seed: int

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.timestamps, prepend=0.0)


def generate_arrivals(qps: float, n: int, seed: int = 0) -> ArrivalSchedule:
    """Poisson arrival times: cumulative sums of i.i.d. Exponential(rate=qps) gaps."""
    if not qps > 0:
        raise ValueError(f"qps must be positive, got {qps}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    gaps = np.random.default_rng(seed).exponential(1.0 / qps, size=n)
    return ArrivalSchedule(np.cumsum(gaps), float(qps), seed)


@dataclass
class LatencyRecord:
    index: int
    query_id: str
    scheduled_time: float
    send_time: float
    response_time: float
    outcome: str
    server_timings: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def latency_ms(self) -> float:
        """Response time measured from the scheduled (not actual) send time."""
        return max(self.response_time - self.scheduled_time, 0.0) * 1000.0


Sender = Callable[[str], SearchResponse]


def run_load(address, queries: Sequence[SearchRequest | str], schedule: ArrivalSchedule,
             timeout: float = 60.0, sender: Sender | None = None) -> list[LatencyRecord]:
    """Dispatch ``queries`` at the scheduled offsets without waiting for replies.

    Each in-flight query gets its own thread and connection. Failures become
    records with outcome ``error``; the run always yields one record per query.
    """
    if len(queries) != len(schedule):
        raise ValueError(f"{len(queries)} queries but {len(schedule)} scheduled arrivals")
    payloads = [q if isinstance(q, str) else encode_request(q) for q in queries]
    qids = [p.split("\n", 1)[0] for p in payloads]
    if sender is None:
        def sender(payload: str) -> SearchResponse:
            return send_request(address, payload, timeout=timeout)

    records: list[LatencyRecord | None] = [None] * len(payloads)
    clock = time.perf_counter
    start = clock()

    def fire(i: int, scheduled: float) -> None:
        sent = clock() - start
        timings: dict[str, float] = {}
        err = None
        try:
            resp = sender(payloads[i])
            outcome = "ok"
            timings = resp.timings
        except Overloaded:
            outcome = "overloaded"
        except Exception as exc:  # connection refused, timeout, malformed reply
            outcome, err = "error", f"{type(exc).__name__}: {exc}"
        records[i] = LatencyRecord(i, qids[i], scheduled, sent, clock() - start, outcome, timings, err)

    threads = []
    for i, t in enumerate(schedule.timestamps.tolist()):
        delay = start + t - clock()
        if delay > 0:
            time.sleep(delay)
        th = threading.Thread(target=fire, args=(i, t), daemon=True)
        th.start()
        threads.append(th)
    for th in threads:
        th.join()
    return records  # type: ignore[return-value]


def percentile(latencies: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    values = sorted(latencies)
    if not values:
        raise ValueError("percentile of an empty sequence")
    if not 0 < p <= 100:
        raise ValueError(f"p must lie in (0, 100], got {p}")
    rank = math.ceil(Fraction(p) * len(values) / 100)
    return values[max(rank, 1) - 1]


@dataclass
class LevelSummary:
    qps: float
    mode: str
    n: int
    ok: int
    overloaded: int
    error: int
    p50_ms: float | None
    p95_ms: float | None
    p99_ms: float | None
    achieved_qps: float

    def row(self) -> dict:
        def fmt(v):
            return "" if v is None else f"{v:.3f}"

        return {"qps": f"{self.qps:g}", "mode": self.mode, "n": self.n, "ok": self.ok,
                "overloaded": self.overloaded, "error": self.error, "p50_ms": fmt(self.p50_ms),
                "p95_ms": fmt(self.p95_ms), "p99_ms": fmt(self.p99_ms),
                "achieved_qps": f"{self.achieved_qps:.3f}"}


def summarize(records: Sequence[LatencyRecord], qps: float, mode: str = "hybrid") -> LevelSummary:
    """Aggregate one QPS level. Percentiles use successful records only.

    ``achieved_qps`` is successful responses divided by the time from the run
    start to the last response.
    """
    ok = [r for r in records if r.outcome == "ok"]
    counts = {o: sum(r.outcome == o for r in records) for o in OUTCOMES}
    lat = [r.latency_ms for r in ok]
    span = max((r.response_time for r in records), default=0.0)
    return LevelSummary(
        qps=float(qps), mode=mode, n=len(records), ok=counts["ok"], overloaded=counts["overloaded"],
        error=counts["error"],
        p50_ms=percentile(lat, 50) if lat else None,
        p95_ms=percentile(lat, 95) if lat else None,
        p99_ms=percentile(lat, 99) if lat else None,
        achieved_qps=len(ok) / span if span > 0 else 0.0,
    )


def emit_report(levels: Mapping, out_dir: str | Path, mode: str = "hybrid") -> dict[str, Path]:
    """Write ``report.csv``, ``records.csv`` and, if any query succeeded, ``p95_latency.svg``.

    ``levels`` maps a QPS value, or a ``(qps, mode)`` pair, to that level's records.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for key, recs in levels.items():
        qps, level_mode = key if isinstance(key, tuple) else (key, mode)
        summaries.append(summarize(recs, qps, level_mode))
    summaries.sort(key=lambda s: (s.mode, s.qps))

    paths = {"report": out / "report.csv", "records": out / "records.csv"}
    with open(paths["report"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for s in summaries:
            writer.writerow(s.row())
    with open(paths["records"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["qps", "mode", "index", "query_id", "scheduled_s", "send_s", "response_s",
                         "latency_ms", "outcome"])
        for key, recs in levels.items():
            qps, level_mode = key if isinstance(key, tuple) else (key, mode)
            for r in recs:
                writer.writerow([f"{qps:g}", level_mode, r.index, r.query_id, f"{r.scheduled_time:.6f}",
                                 f"{r.send_time:.6f}", f"{r.response_time:.6f}", f"{r.latency_ms:.3f}",
                                 r.outcome])

    plotted = [s for s in summaries if s.p95_ms is not None]
    if plotted:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for m in sorted({s.mode for s in plotted}):
            series = [s for s in plotted if s.mode == m]
            label = f"{m} (exhaustive reference)" if m == "dense_full" else m
            ax.plot([s.qps for s in series], [s.p95_ms for s in series], marker="o", label=label)
        ax.set_xlabel("QPS (Poisson arrival rate)")
        ax.set_ylabel("P95 latency (ms)")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        paths["plot"] = out / "p95_latency.svg"
        fig.savefig(paths["plot"], format="svg")
        plt.close(fig)
    else:
        logger.warning("no successful queries; report has error counts only")
    return paths
