import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import dequantized_doc, requantize_doc

from lateserve.store import (
    ENTRY_DTYPE,
    HEADER,
    MAGIC,
    StoreFormatError,
    StoreTruncatedError,
    build_store,
    dequantize,
    get_doc_embeddings,
    open_store,
    quantize,
    resident_bytes,
)


def test_zero_vector_roundtrips_exactly(tmp_path):
    path = tmp_path / "z.store"
    build_store([(0, np.zeros((1, 4)))], 4, path)
    with open_store(path, "mapped") as h:
        codes, _ = h.doc_codes(0)
        assert codes.tolist() == [[0, 0, 0, 0]]
        assert get_doc_embeddings(h, 0).tokens.tolist() == [[0.0, 0.0, 0.0, 0.0]]


def test_quantize_hand_example():
    # round(x * 127 / 1.0): 127, -127, 63.5 -> 64, 0
    codes = quantize([1.0, -1.0, 0.5, 0.0], 1.0)
    assert codes.tolist() == [127, -127, 64, 0]
    back = dequantize(codes, 1.0)
    assert np.all(np.abs(back - [1.0, -1.0, 0.5, 0.0]) <= 1 / 127)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_quantization_roundtrip_bound(x):
    scale = float(np.float32(np.abs(x).max())) or 1.0
    err = np.abs(dequantize(quantize(x, scale), scale) - x)
    assert np.all(err <= scale / 127 * (1 + 1e-6))


def test_file_layout_is_bit_exact(tmp_path):
    path = tmp_path / "s.store"
    docs = [(0, np.array([[1.0, -1.0, 0.5, 0.0]])), (1, np.array([[2.0, 0, 0, 0], [0, 0, 0, -1.0]]))]
    build_store(docs, 4, path)
    raw = path.read_bytes()
    magic, version, dim, bits, n, total = HEADER.unpack_from(raw)
    assert (magic, version, dim, bits, n, total) == (MAGIC, 1, 4, 8, 2, 3)
    entries = np.frombuffer(raw, ENTRY_DTYPE, count=2, offset=HEADER.size)
    assert entries["offset"].tolist() == [0, 4]
    assert entries["token_count"].tolist() == [1, 2]
    assert entries["scale"].tolist() == [1.0, 2.0]
    (end,) = struct.unpack_from("<Q", raw, HEADER.size + 2 * 16)
    assert end == 12
    payload = np.frombuffer(raw, np.int8, offset=HEADER.size + 2 * 16 + 8)
    assert payload.tolist() == [127, -127, 64, 0, 127, 0, 0, 0, 0, 0, 0, -64]
    assert len(raw) == 32 + 32 + 8 + 12


def test_build_rejects_bad_documents(tmp_path):
    with pytest.raises(ValueError, match="dim=4"):
        build_store([(0, np.zeros((2, 3)))], 4, tmp_path / "a.store")
    with pytest.raises(ValueError, match="document 1 has no tokens"):
        build_store([(0, np.ones((1, 4))), (1, np.zeros((0, 4)))], 4, tmp_path / "b.store")
    with pytest.raises(ValueError, match="dense and ordered"):
        build_store([(1, np.ones((1, 4)))], 4, tmp_path / "c.store")


@pytest.fixture
def random_store(tmp_path, rng):
    docs = [(i, rng.standard_normal((int(rng.integers(1, 12)), 16))) for i in range(100)]
    path = tmp_path / "r.store"
    build_store(docs, 16, path)
    return path, docs


def test_modes_are_identical_and_match_requantization(random_store):
    path, docs = random_store
    with open_store(path, "eager") as eager, open_store(path, "mapped") as mapped:
        for doc_id, mat in docs:
            a = eager.get(doc_id).tokens
            b = mapped.get(doc_id).tokens
            assert a.tobytes() == b.tobytes()
            assert np.array_equal(a, np.array(dequantized_doc(mat)))
            codes, scale = requantize_doc(mat)
            assert eager.doc_codes(doc_id)[0].tolist() == codes
            assert eager.get(doc_id).scale == scale


def test_offsets_monotone_and_consistent(random_store):
    path, docs = random_store
    with open_store(path, "mapped") as h:
        off = h.table.offsets
        assert np.all(np.diff(off) > 0)
        assert off[-1] == h.payload_bytes == sum(m.shape[0] * 16 for _, m in docs)
        assert h.manifest.total_tokens == sum(m.shape[0] for _, m in docs)


def test_lookup_errors(random_store):
    path, _ = random_store
    with open_store(path, "mapped") as h:
        with pytest.raises(IndexError):
            h.get(100)
        with pytest.raises(IndexError):
            h.get(-1)


def test_open_rejects_bad_magic_version_and_truncation(random_store, tmp_path):
    path, _ = random_store
    raw = path.read_bytes()
    bad = tmp_path / "bad.store"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(StoreFormatError, match="magic"):
        open_store(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(StoreFormatError, match="format_version"):
        open_store(bad)
    bad.write_bytes(raw[:-1])
    for mode in ("mapped", "eager"):
        with pytest.raises(StoreTruncatedError):
            open_store(bad, mode)
    bad.write_bytes(raw[:20])
    with pytest.raises(StoreTruncatedError):
        open_store(bad)


def test_open_rejects_unknown_mode(random_store):
    with pytest.raises(ValueError):
        open_store(random_store[0], "lazy")


def test_single_doc_store(tmp_path):
    m = np.array([[0.25, -0.5], [1.0, 0.0]])
    build_store([(0, m)], 2, tmp_path / "one.store")
    with open_store(tmp_path / "one.store", "eager") as h:
        assert np.allclose(h.get(0).tokens, m, atol=1 / 127)


def test_resident_bytes_tracks_page_touches(random_store):
    path, docs = random_store
    with open_store(path, "mapped") as h:
        assert resident_bytes(h) == h.metadata_bytes
        assert resident_bytes(h) <= h.metadata_bytes + h.page_size
        h.get(0)
        assert set(h.touched_pages().tolist()) == set(h.doc_pages(0))
        for i in range(len(docs)):
            h.get(i)
        assert resident_bytes(h) == h.metadata_bytes + h.payload_bytes
        h.reset_access_stats()
        assert resident_bytes(h) == h.metadata_bytes and h.bytes_read == 0
    with open_store(path, "eager") as h:
        assert resident_bytes(h) >= h.payload_bytes


def test_concurrent_readers_agree(random_store):
    from concurrent.futures import ThreadPoolExecutor

    path, docs = random_store
    with open_store(path, "mapped") as h:
        expected = [h.get(i).tokens for i in range(len(docs))]
        with ThreadPoolExecutor(8) as pool:
            got = list(pool.map(lambda i: h.get(i).tokens, [i % len(docs) for i in range(800)]))
        assert all(np.array_equal(g, expected[i % len(docs)]) for i, g in enumerate(got))


def test_iter_blocks_covers_every_doc_once(random_store):
    path, docs = random_store
    with open_store(path, "mapped") as h:
        seen = []
        for first, end, tokens, owner in h.iter_blocks(block_bytes=500):
            seen.extend(range(first, end))
            assert tokens.shape[0] == owner.size == h.table.token_counts[first:end].sum()
            for j, doc_id in enumerate(range(first, end)):
                assert np.array_equal(tokens[owner == j], h.get(doc_id).tokens)
        assert seen == list(range(len(docs)))
