"""Two-stream fusion classifier trained from scratch with numpy.

Run and kick stage embeddings each go through their own fully connected ReLU
layer, the two binary metadata indicators through a third; the three hidden
vectors are concatenated and passed through a ReLU fusion layer and a softmax
output layer. Training minimises class-weighted cross-entropy with Adam.
"""
from __future__ import annotations

import copy
import csv
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    Divergence,
    DimensionMismatch,
    EmptyBatch,
    EmptySplit,
    InvalidDimensions,
    MissingClass,
    MissingFile,
    NonFiniteActivation,
    NonFiniteGradient,
    TruncatedFile,
)

PROB_FLOOR = 1e-12
META_DIM = 2
RUN, KICK, META, FUSION, OUTPUT = range(5)
LAYER_NAMES = ("run", "kick", "meta", "fusion", "output")


@dataclass
class FeatureRecord:
    t_run: np.ndarray
    t_kick: np.ndarray
    gamma: tuple
    label: int
    clip_id: str = ""


@dataclass
class Batch:
    t_run: np.ndarray   # (m, D)
    t_kick: np.ndarray  # (m, D)
    gamma: np.ndarray   # (m, 2)
    labels: np.ndarray  # (m,) int

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord]) -> "Batch":
        if not records:
            raise EmptyBatch("no records")
        return cls(
            t_run=np.stack([np.asarray(r.t_run, dtype=np.float64) for r in records]),
            t_kick=np.stack([np.asarray(r.t_kick, dtype=np.float64) for r in records]),
            gamma=np.array([r.gamma for r in records], dtype=np.float64).reshape(len(records), META_DIM),
            labels=np.array([r.label for r in records], dtype=np.int64),
        )

    def subset(self, idx) -> "Batch":
        return Batch(self.t_run[idx], self.t_kick[idx], self.gamma[idx], self.labels[idx])


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)


@dataclass
class ClassifierModel:
    layers: list[Layer]
    n_classes: int
    use_metadata: bool = True
    single_stream: bool = False

    @property
    def dim(self) -> int:
        return self.layers[RUN].weight.shape[0]

    @property
    def hidden(self) -> tuple[int, int, int]:
        return (self.layers[RUN].weight.shape[1], self.layers[META].weight.shape[1],
                self.layers[FUSION].weight.shape[1])

    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in (layer.weight, layer.bias)]

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 20
    class_weights: Optional[Sequence[float]] = None
    use_metadata: bool = True
    single_stream: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainResult:
    model: ClassifierModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0


def init_model(dim: int, n_classes: int, hidden: Sequence[int] = (256, 16, 128), seed: int = 0,
               use_metadata: bool = True, single_stream: bool = False) -> ClassifierModel:
    """Glorot-uniform weights, zero biases."""
    stream, meta, fusion = hidden
    if dim < 1 or n_classes < 1 or min(hidden) < 1:
        raise InvalidDimensions(f"dim={dim}, n={n_classes}, hidden={tuple(hidden)} must all be >= 1")
    rng = np.random.default_rng(seed)
    shapes = [(dim, stream), (dim, stream), (META_DIM, meta), (2 * stream + meta, fusion), (fusion, n_classes)]
    layers = []
    for fan_in, fan_out in shapes:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ClassifierModel(layers, n_classes, use_metadata, single_stream)


def zero_model(dim: int, n_classes: int, hidden: Sequence[int] = (256, 16, 128), **flags) -> ClassifierModel:
    model = init_model(dim, n_classes, hidden, **flags)
    for layer in model.layers:
        layer.weight[...] = 0.0
    return model


def _as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, FeatureRecord):
        return Batch.from_records([data])
    return Batch.from_records(list(data))


def _relu(x):
    return np.maximum(x, 0.0)


def _forward(model: ClassifierModel, batch: Batch):
    L = model.layers
    if batch.t_run.shape[1] != model.dim or batch.t_kick.shape[1] != model.dim:
        raise DimensionMismatch(f"features have dim {batch.t_run.shape[1]}, model expects {model.dim}")
    if batch.gamma.shape[1] != META_DIM:
        raise DimensionMismatch(f"metadata must have {META_DIM} entries")
    m = len(batch)
    stream = L[RUN].weight.shape[1]
    if model.single_stream:
        x_run = 0.5 * (batch.t_run + batch.t_kick)
    else:
        x_run = batch.t_run
    z_run = x_run @ L[RUN].weight + L[RUN].bias
    h_run = _relu(z_run)
    if model.single_stream:
        z_kick = np.zeros((m, stream))
        h_kick = z_kick
    else:
        z_kick = batch.t_kick @ L[KICK].weight + L[KICK].bias
        h_kick = _relu(z_kick)
    if model.use_metadata:
        z_meta = batch.gamma @ L[META].weight + L[META].bias
        h_meta = _relu(z_meta)
    else:
        z_meta = np.zeros((m, L[META].weight.shape[1]))
        h_meta = z_meta
    concat = np.concatenate([h_run, h_kick, h_meta], axis=1)
    z_fus = concat @ L[FUSION].weight + L[FUSION].bias
    h_fus = _relu(z_fus)
    scores = h_fus @ L[OUTPUT].weight + L[OUTPUT].bias
    if not np.all(np.isfinite(scores)):
        raise NonFiniteActivation("non-finite output scores")
    cache = dict(x_run=x_run, z_run=z_run, h_run=h_run, z_kick=z_kick, z_meta=z_meta,
                 concat=concat, z_fus=z_fus, h_fus=h_fus)
    return scores, cache


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: ClassifierModel, data) -> np.ndarray:
    """Class probabilities: shape ``(n,)`` for one record, ``(m, n)`` for a batch."""
    probs = softmax(_forward(model, _as_batch(data))[0])
    return probs[0] if isinstance(data, FeatureRecord) else probs


def scores(model: ClassifierModel, data) -> np.ndarray:
    return _forward(model, _as_batch(data))[0]


def predict(model: ClassifierModel, data):
    """Argmax class; ties go to the lowest index."""
    idx = np.argmax(forward(model, data), axis=-1)
    return int(idx) if isinstance(data, FeatureRecord) else idx


def loss(probabilities: np.ndarray, labels: Sequence[int], class_weights: Sequence[float]) -> float:
    """Mean class-weighted negative log-likelihood, with p floored at 1e-12."""
    probs = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[0] == 0 or labels.size == 0:
        raise EmptyBatch("loss of an empty batch")
    if probs.shape[0] != labels.size:
        raise DimensionMismatch("probabilities and labels differ in length")
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    p_true = probs[np.arange(labels.size), labels]
    return float(-np.sum(w * np.log(np.maximum(p_true, PROB_FLOOR))) / labels.size)


def compute_class_weights(labels: Sequence[int], n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``m / (n * count_k)``."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    missing = [k for k in range(n_classes) if counts[k] == 0]
    if missing:
        raise MissingClass(f"classes {missing} have no samples")
    return labels.size / (n_classes * counts.astype(np.float64))


def gradient(model: ClassifierModel, data, class_weights: Sequence[float],
             dropout_mask: Optional[np.ndarray] = None) -> list[Layer]:
    """Analytic gradient of ``loss(forward(model, data))`` via backpropagation."""
    batch = _as_batch(data)
    grads, _ = _loss_and_grad(model, batch, np.asarray(class_weights, dtype=np.float64), dropout_mask)
    return grads


def _loss_and_grad(model, batch, weights, dropout_mask=None):
    L = model.layers
    s, c = _forward(model, batch)
    h_fus = c["h_fus"]
    if dropout_mask is not None:
        h_fus = h_fus * dropout_mask
    s = h_fus @ L[OUTPUT].weight + L[OUTPUT].bias
    probs = softmax(s)
    m = len(batch)
    rows = np.arange(m)
    w = weights[batch.labels]
    p_true = probs[rows, batch.labels]
    value = float(-np.sum(w * np.log(np.maximum(p_true, PROB_FLOOR))) / m)

    onehot = np.zeros_like(probs)
    onehot[rows, batch.labels] = 1.0
    # below the floor log(max(p, eps)) is constant in the parameters
    active = (p_true >= PROB_FLOOR).astype(np.float64)
    d_s = (w * active / m)[:, None] * (probs - onehot)

    g_out = Layer(h_fus.T @ d_s, d_s.sum(axis=0))
    d_hf = d_s @ L[OUTPUT].weight.T
    if dropout_mask is not None:
        d_hf = d_hf * dropout_mask
    d_zf = d_hf * (c["z_fus"] > 0)
    g_fus = Layer(c["concat"].T @ d_zf, d_zf.sum(axis=0))
    d_concat = d_zf @ L[FUSION].weight.T

    stream = L[RUN].weight.shape[1]
    d_hr = d_concat[:, :stream]
    d_hk = d_concat[:, stream:2 * stream]
    d_hm = d_concat[:, 2 * stream:]

    d_zr = d_hr * (c["z_run"] > 0)
    g_run = Layer(c["x_run"].T @ d_zr, d_zr.sum(axis=0))
    if model.single_stream:
        g_kick = Layer(np.zeros_like(L[KICK].weight), np.zeros_like(L[KICK].bias))
    else:
        d_zk = d_hk * (c["z_kick"] > 0)
        g_kick = Layer(batch.t_kick.T @ d_zk, d_zk.sum(axis=0))
    if model.use_metadata:
        d_zm = d_hm * (c["z_meta"] > 0)
        g_meta = Layer(batch.gamma.T @ d_zm, d_zm.sum(axis=0))
    else:
        g_meta = Layer(np.zeros_like(L[META].weight), np.zeros_like(L[META].bias))

    grads = [g_run, g_kick, g_meta, g_fus, g_out]
    for g in grads:
        if not (np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias))):
            raise NonFiniteGradient("non-finite gradient")
    return grads, value


def evaluate_batch(model: ClassifierModel, batch: Batch, weights) -> tuple[float, float]:
    probs = forward(model, batch)
    acc = float(np.mean(np.argmax(probs, axis=1) == batch.labels))
    return loss(probs, batch.labels, weights), acc


def train(model: ClassifierModel, train_set, val_set, config: TrainConfig) -> TrainResult:
    """Mini-batch Adam; returns the parameters with the lowest validation loss."""
    train_batch = _as_batch(train_set) if len(train_set) else None
    val_batch = _as_batch(val_set) if len(val_set) else None
    if train_batch is None or val_batch is None:
        raise EmptySplit("train and validation sets must both be non-empty")
    model = model.copy()
    model.use_metadata = config.use_metadata
    model.single_stream = config.single_stream
    n = model.n_classes
    if config.class_weights is None:
        weights = compute_class_weights(train_batch.labels, n)
    else:
        weights = np.asarray(config.class_weights, dtype=np.float64)
        if weights.shape != (n,):
            raise DimensionMismatch(f"expected {n} class weights, got {weights.shape}")

    rng = np.random.default_rng(config.seed)
    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.adam_eps

    best = model.copy()
    best_val = np.inf
    best_epoch = 0
    since_best = 0
    history: list[EpochStats] = []
    m = len(train_batch)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(m)
        for start in range(0, m, config.batch_size):
            mb = train_batch.subset(order[start:start + config.batch_size])
            mask = None
            if config.dropout > 0:
                keep = 1.0 - config.dropout
                mask = (rng.random((len(mb), model.hidden[2])) < keep) / keep
            grads, value = _loss_and_grad(model, mb, weights, mask)
            if not np.isfinite(value):
                raise Divergence(f"non-finite training loss at epoch {epoch}")
            step += 1
            flat = [a for g in grads for a in (g.weight, g.bias)]
            for p, g, a, v in zip(params, flat, m1, m2):
                a *= b1
                a += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                a_hat = a / (1 - b1 ** step)
                v_hat = v / (1 - b2 ** step)
                p -= lr * a_hat / (np.sqrt(v_hat) + eps)
        tr_loss, tr_acc = evaluate_batch(model, train_batch, weights)
        va_loss, va_acc = evaluate_batch(model, val_batch, weights)
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise Divergence(f"non-finite loss at epoch {epoch}")
        history.append(EpochStats(epoch, tr_loss, va_loss, tr_acc, va_acc))
        if va_loss < best_val:
            best_val, best_epoch, since_best = va_loss, epoch, 0
            best = model.copy()
        else:
            since_best += 1
            if config.early_stop_patience and since_best >= config.early_stop_patience:
                break
    return TrainResult(best, history, best_epoch)


def write_history(path: "str | os.PathLike", history: Sequence[EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
        for h in history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.train_acc), repr(h.val_acc)])


# -- checkpoint -----------------------------------------------------------------
# little-endian: b"PKMDL1", u32 layer count, per layer u32 rows, u32 cols,
# rows*cols f64 weights (row-major), cols f64 biases; u32 crc32 of all prior bytes

MODEL_MAGIC = b"PKMDL1"


def encode_model(model: ClassifierModel) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        rows, cols = layer.weight.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_model(data: bytes, use_metadata: bool = True, single_stream: bool = False) -> ClassifierModel:
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise BadMagic("not a model checkpoint (bad magic)")
    pos = len(MODEL_MAGIC)
    end = len(data) - 4

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise TruncatedFile(pos)
        out = data[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack("<II", take(8))
        weight = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        bias = np.frombuffer(take(8 * cols), dtype="<f8").astype(np.float64)
        layers.append(Layer(weight, bias))
    if end < pos:
        raise TruncatedFile(pos, "reading checksum")
    if end > pos:
        raise ChecksumMismatch(f"{end - pos} unexpected bytes before checksum")
    (stored,) = struct.unpack("<I", data[pos:])
    if zlib.crc32(data[:pos]) != stored:
        raise ChecksumMismatch("model checkpoint CRC32 mismatch")
    if len(layers) != len(LAYER_NAMES):
        raise InvalidDimensions(f"expected {len(LAYER_NAMES)} layers, found {len(layers)}")
    return ClassifierModel(layers, layers[OUTPUT].weight.shape[1], use_metadata, single_stream)


def save_model(path: "str | os.PathLike", model: ClassifierModel) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path: "str | os.PathLike", **flags) -> ClassifierModel:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    return decode_model(path.read_bytes(), **flags)
