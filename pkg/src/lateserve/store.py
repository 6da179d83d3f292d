"""Quantized multi-vector embedding store backed by a single file.

File layout (all integers little-endian)::

    magic "CSRV" | u32 format_version | u32 dim | u32 quant_bits | u64 num_docs | u64 total_tokens
    num_docs x (u64 offset, u32 token_count, f32 scale)
    u64 end_offset
    payload: int8 codes, row-major per document

Offsets are relative to the start of the payload region. A store can be opened
``eager`` (the whole payload is read into process memory) or ``mapped`` (only the
header and offset table are read; payload pages are faulted in on access).
"""

from __future__ import annotations

import logging
import mmap
import os
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"CSRV"
FORMAT_VERSION = 1
QUANT_BITS = 8
QMAX = 127

HEADER = struct.Struct("<4sIIIQQ")
ENTRY_DTYPE = np.dtype([("offset", "<u8"), ("token_count", "<u4"), ("scale", "<f4")])
END_OFFSET = struct.Struct("<Q")

MODES = ("mapped", "eager")


class StoreError(Exception):
    """Base class for embedding-store failures."""


class StoreFormatError(StoreError):
    """Bad magic, unsupported version, or inconsistent metadata."""


class StoreTruncatedError(StoreFormatError):
    """The file is shorter than its offset table claims."""


@dataclass(frozen=True)
class StoreManifest:
    dim: int
    num_docs: int
    quant_bits: int
    total_tokens: int
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class OffsetTable:
    offsets: np.ndarray  # num_docs + 1 payload byte offsets
    token_counts: np.ndarray
    scales: np.ndarray


@dataclass
class DocEmbeddings:
    doc_id: int
    tokens: np.ndarray
    scale: float

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


def doc_scale(matrix: np.ndarray) -> float:
    """Per-document quantization scale: max-abs, or 1.0 for an all-zero matrix."""
    peak = float(np.float32(np.max(np.abs(matrix))))
    return peak if peak > 0.0 else 1.0


def quantize(x, scale: float) -> np.ndarray:
    """Symmetric 8-bit codes ``round(x * 127 / scale)`` clipped to [-127, 127]."""
    codes = np.rint(np.asarray(x, dtype=np.float64) * QMAX / scale)
    return np.clip(codes, -QMAX, QMAX).astype(np.int8)


def dequantize(codes, scale: float) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * (scale / QMAX)


def build_store(documents: Sequence[tuple[int, np.ndarray]] | Iterable[tuple[int, np.ndarray]],
                dim: int, path: str | os.PathLike) -> StoreManifest:
    """Quantize ``documents`` and write them to ``path``.

    ``documents`` yields ``(doc_id, matrix)`` pairs with doc ids ``0..N-1`` in
    order. A sized sequence is consumed lazily, one document at a time, so it
    may generate documents on demand; other iterables are materialized first.
    The payload is streamed to disk and the offset table is written last.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not hasattr(documents, "__len__"):
        documents = list(documents)
    num_docs = len(documents)
    table = np.zeros(num_docs, dtype=ENTRY_DTYPE)
    payload_start = HEADER.size + num_docs * ENTRY_DTYPE.itemsize + END_OFFSET.size
    path = Path(path)
    offset = 0
    total_tokens = 0
    with open(path, "wb") as fh:
        fh.seek(payload_start)
        for expected, (doc_id, matrix) in enumerate(documents):
            if int(doc_id) != expected:
                raise ValueError(f"doc ids must be dense and ordered: expected {expected}, got {doc_id}")
            arr = np.asarray(matrix, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(1, -1)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ValueError(f"document {doc_id} has no tokens")
            if arr.shape[1] != dim:
                raise ValueError(f"document {doc_id} has width {arr.shape[1]}, expected dim={dim}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"document {doc_id} contains non-finite values")
            scale = doc_scale(arr)
            codes = quantize(arr, scale)
            fh.write(codes.tobytes(order="C"))
            table[expected] = (offset, arr.shape[0], scale)
            offset += codes.nbytes
            total_tokens += arr.shape[0]
        fh.seek(0)
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, dim, QUANT_BITS, num_docs, total_tokens))
        fh.write(table.tobytes())
        fh.write(END_OFFSET.pack(offset))
    logger.debug("wrote store %s: %d docs, %d tokens, %d payload bytes", path, num_docs, total_tokens, offset)
    return StoreManifest(dim=dim, num_docs=num_docs, quant_bits=QUANT_BITS, total_tokens=total_tokens)


def _read_metadata(fh, file_size: int) -> tuple[StoreManifest, OffsetTable, int]:
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise StoreTruncatedError("file shorter than the store header")
    magic, version, dim, bits, num_docs, total_tokens = HEADER.unpack(raw)
    if magic != MAGIC:
        raise StoreFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise StoreFormatError(f"unsupported format_version {version}")
    if bits != QUANT_BITS:
        raise StoreFormatError(f"unsupported quant_bits {bits}")
    if dim < 1:
        raise StoreFormatError("dim must be >= 1")
    payload_start = HEADER.size + num_docs * ENTRY_DTYPE.itemsize + END_OFFSET.size
    if payload_start > file_size:
        raise StoreTruncatedError(f"offset table needs {payload_start} bytes, file has {file_size}")
    entries = np.frombuffer(fh.read(num_docs * ENTRY_DTYPE.itemsize), dtype=ENTRY_DTYPE)
    (end,) = END_OFFSET.unpack(fh.read(END_OFFSET.size))
    offsets = np.empty(num_docs + 1, dtype=np.int64)
    offsets[:-1] = entries["offset"]
    offsets[-1] = end
    counts = entries["token_count"].astype(np.int64)
    scales = entries["scale"].astype(np.float64)
    if num_docs:
        if offsets[0] != 0:
            raise StoreFormatError("first document offset must be 0")
        if np.any(counts < 1):
            raise StoreFormatError("every document needs at least one token")
        if np.any(np.diff(offsets) != counts * dim):
            raise StoreFormatError("offsets disagree with token counts")
        if np.any(scales <= 0):
            raise StoreFormatError("scales must be positive")
    elif end != 0:
        raise StoreFormatError("empty store with nonzero payload")
    if int(counts.sum()) != total_tokens:
        raise StoreFormatError("total_tokens disagrees with token counts")
    expected = payload_start + int(end)
    if file_size < expected:
        raise StoreTruncatedError(f"payload needs {expected} bytes, file has {file_size}")
    if file_size > expected:
        raise StoreFormatError(f"{file_size - expected} trailing bytes after payload")
    manifest = StoreManifest(dim=dim, num_docs=num_docs, quant_bits=bits,
                             total_tokens=total_tokens, format_version=version)
    return manifest, OffsetTable(offsets, counts, scales), payload_start


class StoreHandle:
    """Open embedding store. Immutable apart from its access counters."""

    def __init__(self, path: Path, mode: str, manifest: StoreManifest, table: OffsetTable,
                 payload_start: int, payload: np.ndarray, mm: mmap.mmap | None = None):
        self.path = path
        self.mode = mode
        self.manifest = manifest
        self.table = table
        self.metadata_bytes = payload_start
        self.payload_bytes = int(table.offsets[-1])
        self.page_size = mmap.PAGESIZE
        self._payload = payload
        self._mm = mm
        self._base_address = payload.ctypes.data - payload_start if mm is not None else None
        first_page = payload_start // self.page_size
        last_page = (payload_start + self.payload_bytes + self.page_size - 1) // self.page_size
        self._first_page = first_page
        self._touched = np.zeros(max(last_page - first_page, 0), dtype=bool)
        self._bytes_read = 0
        self._lock = threading.Lock()

    # -- access accounting -------------------------------------------------

    def _record(self, start: int, stop: int) -> None:
        """Record a read of payload bytes [start, stop)."""
        if stop <= start:
            return
        lo = (self.metadata_bytes + start) // self.page_size - self._first_page
        hi = (self.metadata_bytes + stop - 1) // self.page_size - self._first_page + 1
        self._touched[lo:hi] = True
        with self._lock:
            self._bytes_read += stop - start

    def reset_access_stats(self) -> None:
        with self._lock:
            self._touched[:] = False
            self._bytes_read = 0

    @property
    def bytes_read(self) -> int:
        return self._bytes_read

    def touched_pages(self) -> np.ndarray:
        """Absolute file page indices read since open (or the last reset)."""
        return np.flatnonzero(self._touched) + self._first_page

    def doc_pages(self, doc_id: int) -> range:
        start = self.metadata_bytes + int(self.table.offsets[doc_id])
        stop = self.metadata_bytes + int(self.table.offsets[doc_id + 1])
        return range(start // self.page_size, (stop - 1) // self.page_size + 1)

    def resident_bytes(self) -> int:
        if self.mode == "eager":
            return self.metadata_bytes + self.payload_bytes
        pages = self.touched_pages()
        if pages.size == 0:
            return self.metadata_bytes
        page_lo = pages * self.page_size
        payload_lo = self.metadata_bytes
        payload_hi = self.metadata_bytes + self.payload_bytes
        overlap = np.minimum(page_lo + self.page_size, payload_hi) - np.maximum(page_lo, payload_lo)
        return self.metadata_bytes + int(overlap.sum())

    def os_resident_bytes(self) -> int | None:
        """Kernel-reported resident bytes of this store's mapping (Linux only)."""
        if self._mm is None:
            return None
        try:
            text = Path("/proc/self/smaps").read_text()
        except OSError:
            return None
        target = self._base_address
        in_mapping = False
        for line in text.splitlines():
            m = re.match(r"^([0-9a-f]+)-([0-9a-f]+) ", line)
            if m:
                in_mapping = int(m.group(1), 16) == target
            elif in_mapping and line.startswith("Rss:"):
                return int(line.split()[1]) * 1024
        return None

    # -- reads -------------------------------------------------------------

    def __len__(self) -> int:
        return self.manifest.num_docs

    def doc_codes(self, doc_id: int) -> tuple[np.ndarray, float]:
        """Raw int8 code matrix (a read-only view) and scale for ``doc_id``."""
        doc_id = self._check_doc_id(doc_id)
        start, stop = int(self.table.offsets[doc_id]), int(self.table.offsets[doc_id + 1])
        self._record(start, stop)
        codes = self._payload[start:stop].reshape(-1, self.manifest.dim)
        return codes, float(self.table.scales[doc_id])

    def get(self, doc_id: int) -> DocEmbeddings:
        codes, scale = self.doc_codes(doc_id)
        return DocEmbeddings(doc_id=int(doc_id), tokens=dequantize(codes, scale), scale=scale)

    def iter_blocks(self, block_bytes: int = 1 << 22, start: int = 0,
                    stop: int | None = None) -> Iterator[tuple[int, int, np.ndarray, np.ndarray]]:
        """Yield ``(first_doc, end_doc, tokens, token_doc_index)`` over contiguous doc ranges.

        ``tokens`` is the dequantized (n_tokens, dim) block; ``token_doc_index``
        gives, for each row, its document's position within the block.
        """
        stop = self.manifest.num_docs if stop is None else stop
        offsets = self.table.offsets
        dim = self.manifest.dim
        first = start
        while first < stop:
            limit = offsets[first] + max(block_bytes, 1)
            end = int(np.searchsorted(offsets, limit, side="right")) - 1
            end = min(max(end, first + 1), stop)
            lo, hi = int(offsets[first]), int(offsets[end])
            self._record(lo, hi)
            codes = self._payload[lo:hi].reshape(-1, dim)
            counts = self.table.token_counts[first:end]
            token_scales = np.repeat(self.table.scales[first:end] / QMAX, counts)
            tokens = codes.astype(np.float64) * token_scales[:, None]
            yield first, end, tokens, np.repeat(np.arange(end - first), counts)
            first = end

    def _check_doc_id(self, doc_id) -> int:
        doc_id = int(doc_id)
        if not 0 <= doc_id < self.manifest.num_docs:
            raise IndexError(f"doc_id {doc_id} out of range [0, {self.manifest.num_docs})")
        return doc_id

    def close(self) -> None:
        self._payload = None
        if self._mm is not None:
            try:
                self._mm.close()
            except BufferError:
                # views still alive; the mapping is released when they are collected
                pass
            self._mm = None

    def __enter__(self) -> "StoreHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        m = self.manifest
        return f"StoreHandle({str(self.path)!r}, mode={self.mode!r}, num_docs={m.num_docs}, dim={m.dim})"


def open_store(path: str | os.PathLike, mode: str = "mapped") -> StoreHandle:
    """Open a store file.

    ``mapped`` reads only the header and offset table and maps the file;
    ``eager`` reads the full payload into memory before returning.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    path = Path(path)
    with open(path, "rb") as fh:
        file_size = os.fstat(fh.fileno()).st_size
        manifest, table, payload_start = _read_metadata(fh, file_size)
        payload_len = int(table.offsets[-1])
        if mode == "eager":
            buf = bytearray(payload_len)
            fh.seek(payload_start)
            if fh.readinto(buf) != payload_len:
                raise StoreTruncatedError("short read of payload")
            payload = np.frombuffer(buf, dtype=np.int8)
            mm = None
        else:
            mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
            payload = np.frombuffer(mm, dtype=np.int8, count=payload_len, offset=payload_start)
    return StoreHandle(path, mode, manifest, table, payload_start, payload, mm)


def get_doc_embeddings(handle: StoreHandle, doc_id: int) -> DocEmbeddings:
    return handle.get(doc_id)


def resident_bytes(handle: StoreHandle) -> int:
    """Best-effort estimate of store bytes resident in this process.

    Eager handles report header plus full payload. Mapped handles report the
    header plus every payload page read through the handle.
    """
    return handle.resident_bytes()


def process_rss_bytes() -> int:
    import psutil

    return psutil.Process().memory_info().rss
