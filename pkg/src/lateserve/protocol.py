"""Length-delimited text protocol shared by the server and the load generator.

Each frame is a 4-byte little-endian payload length followed by UTF-8 text.

Request payload::

    <query_id>
    <mode>
    <k_candidates>
    <k_results>
    sparse: term:weight term:weight ...        (optional)
    dense: <dim> <n>; v11,v12,...;v21,...        (optional)

Response payload::

    <query_id>
    results: doc:score doc:score ...
    timings: queue=... sparse=... dense=... fusion=... total=...

or the single line ``overloaded``, or ``error: <message>``.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

import numpy as np

from .sparse import DEFAULT_K, SparseVector

MODES = ("sparse", "dense_full", "rerank", "hybrid")
STAGES = ("queue", "sparse", "dense", "fusion", "total")
DEFAULT_K_RESULTS = 100
OVERLOADED = "overloaded"
MAX_FRAME = 1 << 26

_LEN = struct.Struct("<I")


class ProtocolError(Exception):
    """Malformed frame or payload."""


class RequestValidationError(ValueError):
    """A request is missing the representation its mode needs."""


class Overloaded(Exception):
    """The server rejected the request at admission."""


class RemoteError(Exception):
    """The server answered with ``error: ...``."""


@dataclass
class SearchRequest:
    query_id: str
    mode: str = "hybrid"
    k_candidates: int = DEFAULT_K
    k_results: int = DEFAULT_K_RESULTS
    sparse_query: SparseVector | None = None
    dense_query: np.ndarray | None = None

    def validate(self) -> "SearchRequest":
        if not self.query_id or any(ch in self.query_id for ch in "\r\n"):
            raise RequestValidationError("query_id must be a nonempty single line")
        if self.mode not in MODES:
            raise RequestValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("k_candidates", "k_results"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise RequestValidationError(f"{name} must be a positive integer")
        if self.mode in ("sparse", "rerank", "hybrid") and self.sparse_query is None:
            raise RequestValidationError(f"mode {self.mode} requires a sparse query")
        if self.mode in ("dense_full", "rerank", "hybrid"):
            if self.dense_query is None:
                raise RequestValidationError(f"mode {self.mode} requires a dense query")
            if np.ndim(self.dense_query) != 2 or np.shape(self.dense_query)[0] < 1:
                raise RequestValidationError("dense query must be a nonempty token matrix")
        return self


@dataclass
class SearchResponse:
    query_id: str
    results: list[tuple[int, float]]
    timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    num_candidates: int = 0  # dense-stage candidate count; not carried on the wire


def format_dense(matrix: np.ndarray) -> str:
    m = np.asarray(matrix, dtype=np.float64)
    rows = ";".join(",".join(repr(float(v)) for v in row) for row in m)
    return f"{m.shape[1]} {m.shape[0]}; {rows}"


def parse_dense(text: str) -> np.ndarray:
    head, sep, body = text.partition(";")
    if not sep:
        raise ProtocolError("dense line needs '<dim> <n>; rows'")
    try:
        dim, n = (int(x) for x in head.split())
        rows = [[float(v) for v in row.split(",")] for row in body.strip().split(";")]
    except ValueError as exc:
        raise ProtocolError(f"malformed dense line: {exc}") from None
    m = np.array(rows, dtype=np.float64)
    if m.shape != (n, dim):
        raise ProtocolError(f"dense header says {n}x{dim}, body is {'x'.join(map(str, m.shape))}")
    return m


def encode_request(req: SearchRequest) -> str:
    lines = [req.query_id, req.mode, str(req.k_candidates), str(req.k_results)]
    if req.sparse_query is not None:
        lines.append(f"sparse: {req.sparse_query.format()}")
    if req.dense_query is not None:
        lines.append(f"dense: {format_dense(req.dense_query)}")
    return "\n".join(lines)


def decode_request(text: str) -> SearchRequest:
    lines = [ln for ln in text.strip("\n").split("\n")]
    if len(lines) < 4:
        raise ProtocolError("request needs query_id, mode, k_candidates, k_results")
    try:
        k_candidates, k_results = int(lines[2]), int(lines[3])
    except ValueError:
        raise ProtocolError("k_candidates and k_results must be integers") from None
    req = SearchRequest(query_id=lines[0].strip(), mode=lines[1].strip(),
                        k_candidates=k_candidates, k_results=k_results)
    for line in lines[4:]:
        key, sep, value = line.partition(":")
        if not sep:
            raise ProtocolError(f"unexpected request line {line!r}")
        key = key.strip()
        if key == "sparse":
            try:
                req.sparse_query = SparseVector.parse(value)
            except ValueError as exc:
                raise ProtocolError(f"malformed sparse line: {exc}") from None
        elif key == "dense":
            req.dense_query = parse_dense(value)
        else:
            raise ProtocolError(f"unknown request field {key!r}")
    return req


def encode_response(resp: SearchResponse) -> str:
    results = " ".join(f"{d}:{s!r}" for d, s in resp.results)
    timings = " ".join(f"{k}={resp.timings.get(k, 0.0):.3f}" for k in STAGES)
    return f"{resp.query_id}\nresults: {results}\ntimings: {timings}"


def decode_response(text: str) -> SearchResponse:
    """Parse a response payload; raises Overloaded or RemoteError for those replies."""
    text = text.strip("\n")
    if text == OVERLOADED:
        raise Overloaded()
    if text.startswith("error:"):
        raise RemoteError(text[len("error:"):].strip())
    lines = text.split("\n")
    if len(lines) != 3 or not lines[1].startswith("results:") or not lines[2].startswith("timings:"):
        raise ProtocolError(f"malformed response: {text[:80]!r}")
    try:
        results = []
        for tok in lines[1][len("results:"):].split():
            d, _, s = tok.partition(":")
            results.append((int(d), float(s)))
        timings = {}
        for tok in lines[2][len("timings:"):].split():
            k, _, v = tok.partition("=")
            timings[k] = float(v)
    except ValueError as exc:
        raise ProtocolError(f"malformed response: {exc}") from None
    if set(timings) != set(STAGES):
        raise ProtocolError(f"response timings {sorted(timings)} != {sorted(STAGES)}")
    return SearchResponse(query_id=lines[0], results=results, timings=timings)


# -- framing ---------------------------------------------------------------

def send_frame(sock: socket.socket, text: str) -> None:
    data = text.encode("utf-8")
    sock.sendall(_LEN.pack(len(data)) + data)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame")
            return None
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> str | None:
    """Read one frame; ``None`` on a clean EOF before any header byte."""
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    body = _recv_exact(sock, n) if n else b""
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body.decode("utf-8")


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def send_request(address: tuple[str, int] | str, req: SearchRequest | str,
                 timeout: float | None = 30.0) -> SearchResponse:
    """One request on a fresh connection. Raises Overloaded / RemoteError / OSError."""
    if isinstance(address, str):
        address = parse_address(address)
    payload = req if isinstance(req, str) else encode_request(req)
    with socket.create_connection(address, timeout=timeout) as sock:
        send_frame(sock, payload)
        reply = recv_frame(sock)
    if reply is None:
        raise ProtocolError("server closed the connection without replying")
    return decode_response(reply)
