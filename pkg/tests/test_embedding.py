import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kickdir.dataset import Direction
from kickdir.embedding import (
    CACHE_MAGIC,
    BackendKind,
    BackendSpec,
    ChunkEmbeddingSet,
    PoolMode,
    StageTag,
    SyntheticSignal,
    chunk_count,
    embed,
    encode_cache,
    decode_cache,
    make_chunks,
    open_backend,
    pool_chunks,
    read_cache,
    write_cache,
)
from kickdir.errors import (
    BackendUnavailable,
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    EmptyInput,
    EmptySet,
    MissingPrecomputedEntry,
    TruncatedFile,
)
from kickdir.preprocess import make_frame


def frames(n):
    return [make_frame(2, 2, i) for i in range(n)]


def first_ids(chunks):
    return [int(c.frames[0][0, 0, 0]) for c in chunks]


def test_chunk_counts():
    assert len(make_chunks(frames(32), 8)) == 25
    (only,) = make_chunks(frames(16), 16)
    assert [int(f[0, 0, 0]) for f in only.frames] == list(range(16))
    (padded,) = make_chunks(frames(16), 32)
    assert [int(f[0, 0, 0]) for f in padded.frames] == [0] * 16 + list(range(16))
    with pytest.raises(EmptyInput):
        make_chunks([], 4)


@given(st.integers(1, 40), st.integers(1, 40))
def test_chunk_count_law_and_overlap(T, w):
    chunks = make_chunks(frames(T), w)
    assert len(chunks) == (T - w + 1 if T >= w else 1) == chunk_count(T, w)
    assert all(len(c.frames) == w for c in chunks)
    assert [c.chunk_index for c in chunks] == list(range(len(chunks)))
    for a, b in zip(chunks, chunks[1:]):
        assert [id(f) for f in a.frames[1:]] == [id(f) for f in b.frames[:-1]]


def synthetic(window=8, dim=6, **kw):
    return open_backend(BackendSpec(BackendKind.SYNTHETIC, window, dim, **kw))


def test_synthetic_is_deterministic():
    chunk = make_chunks(frames(8), 8)[0]
    a = embed(synthetic(), chunk, "clip1", StageTag.RUN)
    b = embed(synthetic(), chunk, "clip1", StageTag.RUN)
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()
    assert embed(synthetic(), chunk, "clip2", StageTag.RUN).tobytes() != a.tobytes()
    assert embed(synthetic(seed=1), chunk, "clip1", StageTag.RUN).tobytes() != a.tobytes()


def test_window_mismatch():
    with pytest.raises(DimensionMismatch):
        embed(synthetic(window=8), make_chunks(frames(4), 4)[0], "c")


def test_signal_injection_concentrates():
    n = 400
    labels = {f"r{i}": Direction.RIGHT for i in range(n)}
    labels.update({f"l{i}": Direction.LEFT for i in range(n)})
    be = synthetic(dim=4, signal=SyntheticSignal(labels, noise_sigma=0.3))
    chunk = make_chunks(frames(16), 8)[0]
    right = np.array([embed(be, chunk, f"r{i}", StageTag.KICK)[0] for i in range(n)], dtype=np.float64)
    left = np.array([embed(be, chunk, f"l{i}", StageTag.KICK)[0] for i in range(n)], dtype=np.float64)
    run = np.array([embed(be, chunk, f"r{i}", StageTag.RUN)[0] for i in range(n)], dtype=np.float64)
    tol = 3 * 0.3 / math.sqrt(n)
    assert abs(right.mean() - 1.0) < tol
    assert abs(left.mean() + 1.0) < tol
    assert abs(run.mean()) < tol


def test_precomputed_backend(tmp_path):
    vec = np.arange(3, dtype=np.float32) + 0.25
    path = tmp_path / "pre.pkemb"
    write_cache(path, {("a", StageTag.KICK, 2): vec})
    be = open_backend(BackendSpec(BackendKind.PRECOMPUTED, 4, 3, str(path)))
    chunks = make_chunks(frames(7), 4)
    assert embed(be, chunks[2], "a", StageTag.KICK).tobytes() == vec.tobytes()
    with pytest.raises(MissingPrecomputedEntry):
        embed(be, chunks[1], "a", StageTag.KICK)
    with pytest.raises(DimensionMismatch):
        open_backend(BackendSpec(BackendKind.PRECOMPUTED, 4, 5, str(path)))


def test_external_backend_needs_runtime_or_model(tmp_path):
    with pytest.raises(BackendUnavailable):
        open_backend(BackendSpec(BackendKind.EXTERNAL, 8, 4, str(tmp_path / "missing.onnx")))


def test_pool_hand_cases():
    single = ChunkEmbeddingSet(StageTag.RUN, np.array([[1.5, -2.0]], dtype=np.float32))
    for mode in PoolMode:
        assert pool_chunks(single, mode).vector.tolist() == [1.5, -2.0]
    two = ChunkEmbeddingSet(StageTag.KICK, np.array([[1, 3], [3, 5]], dtype=np.float32))
    assert pool_chunks(two, "avg").vector.tolist() == [2, 4]
    assert pool_chunks(two, PoolMode.MAX).vector.tolist() == [3, 5]
    with pytest.raises(EmptySet):
        ChunkEmbeddingSet(StageTag.RUN, np.zeros((0, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_pool_properties(rows, dim, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(scale=3.0, size=(rows, dim)).astype(np.float32)
    s = ChunkEmbeddingSet(StageTag.RUN, m)
    avg = pool_chunks(s, PoolMode.AVERAGE).vector
    mx = pool_chunks(s, PoolMode.MAX).vector
    for j in range(dim):
        oracle = math.fsum(float(x) for x in m[:, j]) / rows
        assert abs(avg[j] - oracle) <= 1e-12 * abs(oracle) or avg[j] == oracle
    assert np.all(mx >= avg)
    perm = ChunkEmbeddingSet(StageTag.RUN, m[rng.permutation(rows)])
    assert np.array_equal(pool_chunks(perm, PoolMode.MAX).vector, mx)
    assert np.allclose(pool_chunks(perm, PoolMode.AVERAGE).vector, avg, rtol=1e-12, atol=0)


def sample_entries(dim=5):
    rng = np.random.default_rng(0)
    return {
        ("clip-a", StageTag.RUN, 0): rng.normal(size=dim).astype(np.float32),
        ("clip-a", StageTag.KICK, 3): rng.normal(size=dim).astype(np.float32),
        ("klé", StageTag.RUN, 70000): rng.normal(size=dim).astype(np.float32),
    }


def test_cache_round_trip(tmp_path):
    entries = sample_entries()
    path = tmp_path / "c.pkemb"
    write_cache(path, entries)
    back = read_cache(path)
    assert list(back) == list(entries)
    assert all(back[k].tobytes() == entries[k].tobytes() for k in entries)


def test_cache_layout_is_bit_exact():
    vec = np.array([1.0, -2.0], dtype=np.float32)
    data = encode_cache({("ab", StageTag.KICK, 7): vec})
    body = (b"PKEMB1" + struct.pack("<II", 1, 2) + struct.pack("<H", 2) + b"ab"
            + struct.pack("<BI", 1, 7) + struct.pack("<2f", 1.0, -2.0))
    assert data == body + struct.pack("<I", zlib.crc32(body))


def test_cache_faults(tmp_path):
    data = encode_cache(sample_entries())
    with pytest.raises(BadMagic):
        decode_cache(b"PKEMB2" + data[6:])
    cut = len(data) - 10
    with pytest.raises(TruncatedFile) as err:
        decode_cache(data[:cut])
    assert err.value.offset > len(CACHE_MAGIC)
    assert str(err.value.offset) in str(err.value)
    flipped = bytearray(data)
    flipped[20] ^= 0x01
    with pytest.raises(ChecksumMismatch):
        decode_cache(bytes(flipped))
    assert decode_cache(b"PKEMB1" + struct.pack("<II", 0, 4) + struct.pack("<I", zlib.crc32(b"PKEMB1" + struct.pack("<II", 0, 4)))) == {}


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(
    st.tuples(st.text(max_size=8), st.sampled_from(list(StageTag)), st.integers(0, 2**32 - 1)),
    st.lists(st.floats(allow_nan=False, width=32), min_size=3, max_size=3),
    max_size=6,
))
def test_cache_round_trip_property(raw):
    entries = {k: np.array(v, dtype=np.float32) for k, v in raw.items()}
    back = decode_cache(encode_cache(entries, 3))
    assert list(back) == list(entries)
    assert all(back[k].tobytes() == entries[k].tobytes() for k in entries)
