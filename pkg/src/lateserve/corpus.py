"""Corpus ingestion, index building, and the deterministic toy encoder.

Dense embeddings arrive either as text lines
``doc_id<TAB>num_tokens<TAB>v11,v12,...;v21,...`` or as a binary file with the
same field order: ``"DEMB" | u32 version | u32 dim`` then per document
``u64 doc_id | u32 num_tokens | num_tokens*dim f32``, little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .protocol import SearchRequest, encode_request
from .sparse import (
    SparseVector,
    build_sparse_index,
    read_sparse_vectors,
    save_sparse_index,
)
from .store import FORMAT_VERSION, QUANT_BITS, build_store

DENSE_MAGIC = b"DEMB"
_DENSE_HEADER = struct.Struct("<4sII")
_DENSE_RECORD = struct.Struct("<QI")

STORE_FILE = "embeddings.store"
SPARSE_FILE = "sparse.index"
MANIFEST_FILE = "manifest.json"


class DataError(ValueError):
    """Input files are malformed or inconsistent with each other."""


# -- dense inputs ----------------------------------------------------------

def read_dense_text(path: str | os.PathLike) -> list[tuple[int, np.ndarray]]:
    docs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected doc_id<TAB>num_tokens<TAB>vectors")
            try:
                doc_id, n = int(parts[0]), int(parts[1])
                rows = [[float(v) for v in row.split(",")] for row in parts[2].split(";")]
                mat = np.array(rows, dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if mat.ndim != 2 or mat.shape[0] != n:
                raise DataError(f"{path}:{lineno}: declared {n} tokens, found {len(rows)} ragged/unequal rows")
            docs.append((doc_id, mat))
    return docs


def write_dense_text(docs: Iterable[tuple[int, np.ndarray]], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for doc_id, mat in docs:
            mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
            body = ";".join(",".join(repr(float(v)) for v in row) for row in mat)
            fh.write(f"{doc_id}\t{mat.shape[0]}\t{body}\n")


def write_dense_binary(docs: Iterable[tuple[int, np.ndarray]], dim: int, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_DENSE_HEADER.pack(DENSE_MAGIC, 1, dim))
        for doc_id, mat in docs:
            mat = np.atleast_2d(np.asarray(mat, dtype="<f4"))
            if mat.shape[1] != dim:
                raise DataError(f"document {doc_id} has width {mat.shape[1]}, expected {dim}")
            fh.write(_DENSE_RECORD.pack(doc_id, mat.shape[0]))
            fh.write(mat.tobytes())


def read_dense_binary(path: str | os.PathLike) -> list[tuple[int, np.ndarray]]:
    data = Path(path).read_bytes()
    magic, version, dim = _DENSE_HEADER.unpack_from(data)
    if magic != DENSE_MAGIC or version != 1:
        raise DataError(f"{path}: not a binary dense-embedding file")
    pos = _DENSE_HEADER.size
    docs = []
    while pos < len(data):
        if pos + _DENSE_RECORD.size > len(data):
            raise DataError(f"{path}: truncated record header at byte {pos}")
        doc_id, n = _DENSE_RECORD.unpack_from(data, pos)
        pos += _DENSE_RECORD.size
        size = n * dim * 4
        if pos + size > len(data):
            raise DataError(f"{path}: truncated vectors for document {doc_id}")
        mat = np.frombuffer(data, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim)
        docs.append((doc_id, mat.astype(np.float64)))
        pos += size
    return docs


def read_dense(path: str | os.PathLike) -> list[tuple[int, np.ndarray]]:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_dense_binary(path) if head == DENSE_MAGIC else read_dense_text(path)


# -- index building --------------------------------------------------------

@dataclass
class CorpusBundle:
    dense_path: Path
    sparse_path: Path
    out_dir: Path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check_id_spaces(dense_ids: Sequence[int], sparse_ids: Sequence[int]) -> None:
    for name, ids in (("dense", dense_ids), ("sparse", sparse_ids)):
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError(f"duplicate doc_id {dup} in {name} input")
    d, s = set(dense_ids), set(sparse_ids)
    if d != s:
        first = min(d ^ s)
        missing_from = "sparse" if first in d else "dense"
        raise DataError(f"doc_id {first} is missing from the {missing_from} input")
    expected = set(range(len(d)))
    if d != expected:
        first = min(d ^ expected)
        raise DataError(f"doc_ids must be dense 0..{len(d) - 1}; offending id {first}")


def build_indexes(bundle: CorpusBundle) -> dict:
    """Build the embedding store, the sparse index, and a manifest in ``bundle.out_dir``.

    Outputs are byte-identical for identical inputs.
    """
    try:
        dense = sorted(read_dense(bundle.dense_path), key=lambda p: p[0])
        sparse = sorted(read_sparse_vectors(bundle.sparse_path), key=lambda p: p[0])
    except DataError:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from None
    _check_id_spaces([i for i, _ in dense], [i for i, _ in sparse])
    if not dense:
        raise DataError("corpus is empty")
    dims = {m.shape[1] for _, m in dense}
    if len(dims) != 1:
        raise DataError(f"inconsistent embedding widths {sorted(dims)}")
    dim = dims.pop()

    out = Path(bundle.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_path, sparse_path = out / STORE_FILE, out / SPARSE_FILE
    try:
        store_manifest = build_store(dense, dim, store_path)
        index = build_sparse_index(sparse)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_sparse_index(index, sparse_path)

    manifest = {
        "num_docs": store_manifest.num_docs,
        "dim": dim,
        "total_tokens": store_manifest.total_tokens,
        "build": {
            "quant_bits": QUANT_BITS,
            "store_format_version": FORMAT_VERSION,
            "sparse_global_scale": index.global_scale,
            "sparse_num_terms": len(index.postings),
            "sparse_num_postings": index.num_postings,
        },
        "inputs": {
            "dense": {"name": Path(bundle.dense_path).name, "sha256": _sha256(Path(bundle.dense_path))},
            "sparse": {"name": Path(bundle.sparse_path).name, "sha256": _sha256(Path(bundle.sparse_path))},
        },
        "files": {
            "store": {"name": STORE_FILE, "bytes": store_path.stat().st_size, "sha256": _sha256(store_path)},
            "sparse_index": {"name": SPARSE_FILE, "bytes": sparse_path.stat().st_size,
                             "sha256": _sha256(sparse_path)},
        },
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- toy encoder -----------------------------------------------------------

def _digest(seed: int, kind: str, token: str) -> bytes:
    return hashlib.blake2b(f"{seed}\x00{kind}\x00{token}".encode(), digest_size=16).digest()


def toy_encode_text(text: str, seed: int, dim: int) -> tuple[SparseVector, np.ndarray]:
    """Deterministic stand-in for a neural encoder; no retrieval quality is implied.

    Each lowercase whitespace token hashes to a 32-bit term id with a weight in
    [1, 2] (repeats add up) and to a seeded Gaussian unit vector. For two texts
    whose token sets differ, some token of one maps into the other's id set
    only by collision, so identical term-id sets occur with probability at most
    ``n_tokens / 2**32``.
    """
    tokens = text.lower().split()
    if not tokens:
        raise ValueError("cannot encode an empty text")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    weights: dict[int, float] = {}
    rows = []
    for tok in tokens:
        d = _digest(seed, "term", tok)
        term = int.from_bytes(d[:4], "little")
        weights[term] = weights.get(term, 0.0) + 1.0 + d[4] / 255.0
        rng = np.random.default_rng(int.from_bytes(_digest(seed, "vec", tok)[:8], "little"))
        v = rng.standard_normal(dim)
        rows.append(v / np.linalg.norm(v))
    return SparseVector.from_entries(sorted(weights.items())), np.vstack(rows)


def read_text_lines(path: str | os.PathLike) -> list[tuple[str, str]]:
    """Lines of ``text`` or ``id<TAB>text``; line ``i`` (1-based) defaults to id ``q{i}``."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            qid, sep, text = line.partition("\t")
            if not sep:
                qid, text = f"q{lineno}", line
            if not text.strip():
                raise DataError(f"{path}:{lineno}: empty line cannot be encoded")
            out.append((qid, text))
    return out


def toy_encode(queries_path: str | os.PathLike, out_path: str | os.PathLike, seed: int, dim: int,
               mode: str = "hybrid", k_candidates: int = 200, k_results: int = 100,
               store_dim: int | None = None) -> int:
    """Encode a text query file into a request-payload file (blank-line separated)."""
    if store_dim is not None and store_dim != dim:
        raise DataError(f"dim {dim} does not match the store's dim {store_dim}")
    payloads = []
    for qid, text in read_text_lines(queries_path):
        sparse, dense = toy_encode_text(text, seed, dim)
        payloads.append(encode_request(SearchRequest(qid, mode, k_candidates, k_results, sparse, dense)))
    write_request_file(payloads, out_path)
    return len(payloads)


def toy_encode_corpus(docs_path: str | os.PathLike, out_dir: str | os.PathLike, seed: int,
                      dim: int) -> tuple[Path, Path]:
    """Encode one document per line into dense and sparse corpus input files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dense_path, sparse_path = out / "dense.tsv", out / "sparse.tsv"
    encoded = [toy_encode_text(text, seed, dim) for _, text in read_text_lines(docs_path)]
    write_dense_text(((i, d) for i, (_, d) in enumerate(encoded)), dense_path)
    with open(sparse_path, "w") as fh:
        for i, (s, _) in enumerate(encoded):
            fh.write(f"{i}\t{s.format()}\n")
    return dense_path, sparse_path


def read_request_file(path: str | os.PathLike) -> list[str]:
    """Request payloads separated by blank lines."""
    text = Path(path).read_text()
    return [block.strip("\n") for block in text.split("\n\n") if block.strip()]


def write_request_file(payloads: Sequence[str], path: str | os.PathLike) -> None:
    Path(path).write_text("\n\n".join(payloads) + "\n")
