"""Chunking, backbone embedding backends, temporal pooling and the embedding cache."""
from __future__ import annotations

import enum
import hashlib
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .dataset import Direction
from .errors import (
    BackendUnavailable,
    BadMagic,
    ChecksumMismatch,
    DimensionMismatch,
    EmptyInput,
    EmptySet,
    MissingFile,
    MissingPrecomputedEntry,
    TruncatedFile,
)
from .preprocess import Frame, StageSplit, pad_front


class StageTag(enum.IntEnum):
    RUN = 0
    KICK = 1

    @property
    def label(self) -> str:
        return self.name.lower()


class PoolMode(enum.Enum):
    AVERAGE = "avg"
    MAX = "max"

    @classmethod
    def parse(cls, value: "str | PoolMode") -> "PoolMode":
        if isinstance(value, PoolMode):
            return value
        value = value.lower()
        return {"average": cls.AVERAGE, "mean": cls.AVERAGE}.get(value) or cls(value)


class BackendKind(enum.Enum):
    SYNTHETIC = "synthetic"
    PRECOMPUTED = "precomputed"
    EXTERNAL = "external"


@dataclass(frozen=True)
class Chunk:
    frames: tuple
    chunk_index: int


@dataclass(frozen=True)
class SyntheticSignal:
    """Label-dependent bias injected by the synthetic backend (test mode).

    Right-labelled clips get ``+bias`` on coordinate ``coord`` of every chunk of
    ``stage``, left-labelled clips ``-bias``, center clips nothing. All
    coordinates carry per-chunk Gaussian noise ``noise_sigma``; ``clip_sigma``
    adds noise shared by all chunks of one clip stage, which pooling cannot
    average away.
    """
    labels: Mapping[str, Direction]
    stage: StageTag = StageTag.KICK
    coord: int = 0
    bias: float = 1.0
    noise_sigma: float = 0.3
    clip_sigma: float = 0.0


@dataclass(frozen=True)
class BackendSpec:
    kind: BackendKind
    window: int
    dim: int
    identifier: str = "synthetic"
    seed: int = 0
    signal: Optional[SyntheticSignal] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.window < 1 or self.dim < 1:
            raise ValueError(f"window and dim must be >= 1, got {self.window}, {self.dim}")


@dataclass
class ChunkEmbeddingSet:
    stage: StageTag
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix))
        if self.matrix.shape[0] == 0 or self.matrix.size == 0:
            raise EmptySet(f"{self.stage.label} stage has no chunk embeddings")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("chunk embeddings contain non-finite values")


@dataclass
class StageEmbedding:
    stage: StageTag
    vector: np.ndarray
    pooling: PoolMode


def make_chunks(stage_frames: Sequence[Frame], window: int) -> list[Chunk]:
    """Stride-1 windows over a stage; a stage shorter than ``window`` is front-padded to one chunk."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(stage_frames) == 0:
        raise EmptyInput("cannot chunk an empty stage")
    frames = list(stage_frames)
    if len(frames) < window:
        frames = pad_front(frames, window)
    return [Chunk(tuple(frames[i:i + window]), i) for i in range(len(frames) - window + 1)]


def chunk_count(stage_len: int, window: int) -> int:
    return stage_len - window + 1 if stage_len >= window else 1


# -- backends -----------------------------------------------------------------

class Backend:
    """Produces one embedding per chunk. Implementations must be deterministic."""

    spec: BackendSpec
    thread_safe = True

    def embed(self, chunk: Chunk, clip_id: str, stage: StageTag) -> np.ndarray:
        raise NotImplementedError


class SyntheticBackend(Backend):
    def __init__(self, spec: BackendSpec):
        self.spec = spec

    def _rng(self, *key) -> np.random.Generator:
        text = "\x00".join(str(k) for k in (self.spec.identifier, self.spec.seed) + key)
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
        return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))

    def embed(self, chunk: Chunk, clip_id: str, stage: StageTag) -> np.ndarray:
        dim = self.spec.dim
        signal = self.spec.signal
        noise = self._rng(clip_id, int(stage), chunk.chunk_index).standard_normal(dim)
        if signal is None:
            return noise.astype(np.float32)
        vec = signal.noise_sigma * noise
        if signal.clip_sigma:
            vec += signal.clip_sigma * self._rng(clip_id, int(stage), "clip").standard_normal(dim)
        if stage is signal.stage:
            label = signal.labels.get(clip_id)
            sign = {Direction.RIGHT: 1.0, Direction.LEFT: -1.0}.get(label, 0.0)
            vec[signal.coord] += sign * signal.bias
        return vec.astype(np.float32)


class PrecomputedBackend(Backend):
    """Looks embeddings up in a cache file (``identifier`` is its path)."""

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        dim, self.entries = read_cache(spec.identifier, with_dim=True)
        if self.entries and dim != spec.dim:
            raise DimensionMismatch(f"{spec.identifier} holds dim {dim}, backend expects {spec.dim}")

    def embed(self, chunk: Chunk, clip_id: str, stage: StageTag) -> np.ndarray:
        try:
            return self.entries[(clip_id, StageTag(stage), chunk.chunk_index)]
        except KeyError:
            raise MissingPrecomputedEntry(clip_id, StageTag(stage).label, chunk.chunk_index) from None


class ExternalRuntimeBackend(Backend):
    """Runs an exported video network (ONNX) on each chunk.

    Chunks are fed as float32 ``(1, 3, T, H, W)`` in [0, 1], normalised with the
    Kinetics mean 0.45 / std 0.225. The output is flattened to ``dim`` values.
    Sessions run with one intra-op thread, so calls are serialised.
    """

    thread_safe = False

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        try:
            import onnxruntime as ort
        except ImportError as exc:
            raise BackendUnavailable("external backend needs the optional 'onnxruntime' package") from exc
        if not Path(spec.identifier).is_file():
            raise BackendUnavailable(f"model file not found: {spec.identifier}")
        opts = ort.SessionOptions()
        opts.intra_op_num_threads = 1
        opts.inter_op_num_threads = 1
        self.session = ort.InferenceSession(spec.identifier, opts, providers=["CPUExecutionProvider"])
        self.input_name = self.session.get_inputs()[0].name

    def embed(self, chunk: Chunk, clip_id: str, stage: StageTag) -> np.ndarray:
        clip = np.stack(chunk.frames).astype(np.float32) / 255.0
        clip = (clip - 0.45) / 0.225
        clip = clip.transpose(3, 0, 1, 2)[None]
        out = np.asarray(self.session.run(None, {self.input_name: clip})[0], dtype=np.float32).ravel()
        if out.size != self.spec.dim:
            raise DimensionMismatch(f"model produced {out.size} values, backend expects {self.spec.dim}")
        return out


_BACKENDS = {
    BackendKind.SYNTHETIC: SyntheticBackend,
    BackendKind.PRECOMPUTED: PrecomputedBackend,
    BackendKind.EXTERNAL: ExternalRuntimeBackend,
}


def open_backend(spec: BackendSpec) -> Backend:
    return _BACKENDS[spec.kind](spec)


def embed(backend: Union[Backend, BackendSpec], chunk: Chunk, clip_id: str,
          stage: StageTag = StageTag.RUN) -> np.ndarray:
    if isinstance(backend, BackendSpec):
        backend = open_backend(backend)
    if len(chunk.frames) != backend.spec.window:
        raise DimensionMismatch(f"chunk has {len(chunk.frames)} frames, backend window is {backend.spec.window}")
    vec = np.asarray(backend.embed(chunk, clip_id, StageTag(stage)), dtype=np.float32)
    if vec.shape != (backend.spec.dim,):
        raise DimensionMismatch(f"embedding shape {vec.shape}, expected ({backend.spec.dim},)")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"non-finite embedding for {clip_id} chunk {chunk.chunk_index}")
    return vec


def embed_split(backend: Backend, split: StageSplit, clip_id: str) -> dict:
    """Cache entries ``(clip_id, stage, chunk_index) -> vector`` for both stages of one clip."""
    entries = {}
    for stage, frames in ((StageTag.RUN, split.run_frames), (StageTag.KICK, split.kick_frames)):
        for chunk in make_chunks(frames, backend.spec.window):
            entries[(clip_id, stage, chunk.chunk_index)] = embed(backend, chunk, clip_id, stage)
    return entries


def stage_sets(entries: Mapping, clip_id: str) -> dict[StageTag, ChunkEmbeddingSet]:
    """Group a clip's cache entries into per-stage matrices ordered by chunk index."""
    rows: dict[StageTag, list] = {StageTag.RUN: [], StageTag.KICK: []}
    for (cid, stage, idx), vec in entries.items():
        if cid == clip_id:
            rows[StageTag(stage)].append((idx, vec))
    out = {}
    for stage, items in rows.items():
        if not items:
            raise MissingPrecomputedEntry(clip_id, stage.label, 0)
        items.sort(key=lambda it: it[0])
        out[stage] = ChunkEmbeddingSet(stage, np.stack([v for _, v in items]))
    return out


def pool_chunks(chunks: ChunkEmbeddingSet, mode: "PoolMode | str") -> StageEmbedding:
    """Element-wise average or max over chunk rows, accumulated in float64."""
    mode = PoolMode.parse(mode)
    matrix = np.asarray(chunks.matrix, dtype=np.float64)
    if matrix.shape[0] == 0:
        raise EmptySet("no chunk embeddings to pool")
    if mode is PoolMode.AVERAGE:
        vector = matrix.sum(axis=0) / matrix.shape[0]
    else:
        vector = matrix.max(axis=0)
    return StageEmbedding(chunks.stage, vector, mode)


# -- cache file -----------------------------------------------------------------
# little-endian: b"PKEMB1", u32 count, u32 dim, entries, u32 crc32 of all prior bytes
# entry: u16 id length, utf-8 clip_id, u8 stage, u32 chunk_index, dim x f32

CACHE_MAGIC = b"PKEMB1"
_HEAD = struct.Struct("<II")


def encode_cache(entries: Mapping, dim: Optional[int] = None) -> bytes:
    if dim is None:
        dim = len(next(iter(entries.values()))) if entries else 0
    parts = [CACHE_MAGIC, _HEAD.pack(len(entries), dim)]
    for (clip_id, stage, chunk_index), vec in entries.items():
        raw_id = clip_id.encode("utf-8")
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise DimensionMismatch(f"entry {clip_id}/{chunk_index} has shape {vec.shape}, expected ({dim},)")
        parts.append(struct.pack("<H", len(raw_id)))
        parts.append(raw_id)
        parts.append(struct.pack("<BI", int(stage), chunk_index))
        parts.append(vec.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_cache(path: "str | os.PathLike", entries: Mapping, dim: Optional[int] = None) -> None:
    data = encode_cache(entries, dim)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def decode_cache(data: bytes, with_dim: bool = False):
    if len(data) < len(CACHE_MAGIC) or data[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise BadMagic("not an embedding cache (bad magic)")
    pos = len(CACHE_MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        # the final 4 bytes are the checksum
        if pos + n > len(data) - 4:
            raise TruncatedFile(pos, f"reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    count, dim = _HEAD.unpack(take(_HEAD.size, "header"))
    entries = {}
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2, "clip_id length"))
        clip_id = take(id_len, "clip_id").decode("utf-8")
        stage, chunk_index = struct.unpack("<BI", take(5, "entry key"))
        vec = np.frombuffer(take(4 * dim, "vector"), dtype="<f4").astype(np.float32)
        entries[(clip_id, StageTag(stage), chunk_index)] = vec
    if len(data) - pos < 4:
        raise TruncatedFile(pos, "reading checksum")
    if len(data) - pos > 4:
        raise ChecksumMismatch(f"{len(data) - pos - 4} unexpected trailing bytes before checksum")
    (stored,) = struct.unpack("<I", data[pos:])
    if zlib.crc32(data[:pos]) != stored:
        raise ChecksumMismatch("embedding cache CRC32 mismatch")
    return (dim, entries) if with_dim else entries


def read_cache(path: "str | os.PathLike", with_dim: bool = False):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"embedding cache not found: {path}")
    return decode_cache(path.read_bytes(), with_dim=with_dim)
