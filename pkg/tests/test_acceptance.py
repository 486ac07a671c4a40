"""Exit criteria for the build, one test per criterion.

Each test prints a PASS/FAIL line in the "acceptance criteria" section of the
pytest terminal summary.
"""
import hashlib
import math
import time

import numpy as np
import pytest
import yaml

from kickdir.classifier import (
    TrainConfig,
    compute_class_weights,
    decode_model,
    encode_model,
    gradient,
    init_model,
    loss,
)
from kickdir.cli import main
from kickdir.dataset import Direction, Regime
from kickdir.embedding import (
    BackendKind,
    BackendSpec,
    ChunkEmbeddingSet,
    PoolMode,
    StageTag,
    SyntheticSignal,
    decode_cache,
    encode_cache,
    make_chunks,
    open_backend,
    pool_chunks,
)
from kickdir.errors import BadMagic, ChecksumMismatch, TruncatedFile
from kickdir.evaluation import compute_metrics, cv_run, make_folds
from kickdir.pipeline import embed_records, pool_features
from kickdir.preprocess import average_frame, composite, make_frame, preprocess_clip
from kickdir.synthetic import synthetic_clip, synthetic_records, write_synthetic_dataset

from conftest import full_scale_records, random_batch
from gradcheck import flat, max_relative_error, numeric_gradient


def test_01_gradient_matches_finite_differences(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        for n in (2, 3):
            rng = np.random.default_rng(1000 + seed)
            model = init_model(6, n, (5, 3, 4), seed=seed)
            for layer in model.layers:
                layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
            batch = random_batch(rng, int(rng.integers(4, 12)), 6, n)
            weights = rng.uniform(0.5, 2.0, size=n)
            worst = max(worst, max_relative_error(flat(gradient(model, batch, weights)),
                                                  numeric_gradient(model, batch, weights, step=1e-5)))
    elapsed = time.perf_counter() - start
    criterion(1, "gradient vs central finite differences", worst < 1e-4 and elapsed < 30,
              f"max rel err {worst:.2e} < 1e-4, {elapsed:.1f}s < 30s")


def test_02_loss_oracles(criterion):
    uniform = loss(np.full((5, 3), 1 / 3), [0, 1, 2, 2, 0], np.ones(3))
    hand = loss([[0.5, 0.5], [0.75, 0.25]], [0, 1], [1.0, 1.0])
    ok = abs(uniform - math.log(3)) <= 1e-9 and abs(hand - 1.5 * math.log(2)) <= 1e-12
    criterion(2, "loss oracles", ok, f"uniform {uniform:.12f} vs ln3, hand {hand:.15f} vs 1.5 ln2")


def test_03_chunking_and_pooling_oracles(criterion):
    frames32 = [make_frame(2, 2, i) for i in range(32)]
    frames16 = [make_frame(2, 2, i) for i in range(16)]
    n_run = len(make_chunks(frames32, 8))
    padded = make_chunks(frames16, 32)
    pad_ok = len(padded) == 1 and [int(f[0, 0, 0]) for f in padded[0].frames] == [0] * 16 + list(range(16))
    rng = np.random.default_rng(0)
    worst_rel = 0.0
    max_ge_avg = True
    for _ in range(200):
        rows, dim = int(rng.integers(1, 40)), int(rng.integers(1, 32))
        m = rng.normal(loc=rng.normal(), scale=2.0, size=(rows, dim)).astype(np.float32)
        s = ChunkEmbeddingSet(StageTag.KICK, m)
        avg = pool_chunks(s, PoolMode.AVERAGE).vector
        oracle = np.array([math.fsum(float(x) for x in m[:, j]) / rows for j in range(dim)])
        nz = oracle != 0
        if nz.any():
            worst_rel = max(worst_rel, float(np.max(np.abs(avg[nz] - oracle[nz]) / np.abs(oracle[nz]))))
        max_ge_avg &= bool(np.all(pool_chunks(s, PoolMode.MAX).vector >= avg))
    ok = n_run == 25 and pad_ok and worst_rel <= 1e-12 and max_ge_avg
    criterion(3, "chunk counts and pooling", ok,
              f"T=32,w=8 -> {n_run} chunks; T=16,w=32 padded -> {len(padded)}; avg rel err {worst_rel:.1e}")


def test_04_compositing_invariant(criterion):
    frames, boxes = synthetic_clip(48, width=64, height=48, patch=10, seed=11)
    background = average_frame(frames)
    out = composite(frames, boxes, background)
    ok = True
    for o, src, b in zip(out, frames, boxes):
        inside = np.zeros(o.shape[:2], dtype=bool)
        inside[b.y:b.y + b.h, b.x:b.x + b.w] = True
        ok &= np.array_equal(o[~inside], background[~inside]) and np.array_equal(o[inside], src[inside])
    criterion(4, "compositing: outside box == average frame, inside == source", bool(ok), f"{len(out)} frames")


def test_05_stratified_folds(criterion):
    records = full_scale_records()
    plan = make_folds(records, 10, seed=0)
    shares = np.array([22.9, 30.3, 10.8])  # left, right, center
    sizes = [sum(c) for c in plan.class_counts]
    within = all(np.all(np.abs(np.array(c) - shares) <= 1) for c in plan.class_counts)
    once = sorted(plan.assignment) == sorted(r.clip_id for r in records) and len(plan.assignment) == 640
    ok = all(s == 64 for s in sizes) and within and once
    criterion(5, "stratified 10-fold plan", ok, f"fold sizes {sorted(set(sizes))}, per-class counts within +-1")


def test_06_class_weights(criterion):
    w = compute_class_weights([0] * 229 + [1] * 303 + [2] * 108, 3)
    oracle = [640 / (3 * c) for c in (229, 303, 108)]
    ok = np.allclose(w, oracle, atol=1e-12, rtol=0) and np.allclose(w, [0.9316, 0.7040, 1.9753], atol=1e-4, rtol=0)
    criterion(6, "inverse-frequency class weights", ok, f"{np.round(w, 4).tolist()}")


def _clip_splits(records, width=16, height=12):
    splits = {}
    for i, r in enumerate(sorted(records, key=lambda r: r.clip_id)):
        frames, boxes = synthetic_clip(48, width, height, patch=4, seed=i)
        splits[r.clip_id] = preprocess_clip(frames, boxes, 40)
    return splits


def test_07_end_to_end_learnability(criterion):
    start = time.perf_counter()
    records = synthetic_records(200, seed=7)
    spec = BackendSpec(BackendKind.SYNTHETIC, window=8, dim=16, seed=0,
                       signal=SyntheticSignal({r.clip_id: r.label for r in records}, stage=StageTag.KICK,
                                              coord=0, bias=1.0, noise_sigma=0.3))
    splits = _clip_splits(records)
    entries = embed_records(records, lambda r: splits[r.clip_id], open_backend(spec))
    features = pool_features(records, entries, PoolMode.AVERAGE)
    result = cv_run(records, features, PoolMode.AVERAGE, Regime.TWO_CLASS, k=10, seed=0, jobs=1)
    elapsed = time.perf_counter() - start
    acc = result.pooled.accuracy
    criterion(7, "end-to-end learnability on signal-injected data", acc >= 0.95 and elapsed < 120,
              f"pooled accuracy {acc:.4f} >= 0.95 over {result.pooled.support} clips, {elapsed:.1f}s < 120s")


def test_08_ablation_directions(criterion):
    # label signal split between field side (85% agreement) and the run stream;
    # clip-level noise keeps the task short of perfect so both ablations can hurt
    records = synthetic_records(500, seed=3, meta_agreement=0.85)
    spec = BackendSpec(BackendKind.SYNTHETIC, window=8, dim=8, seed=0,
                       signal=SyntheticSignal({r.clip_id: r.label for r in records}, stage=StageTag.RUN,
                                              coord=0, bias=1.0, noise_sigma=0.3, clip_sigma=1.0))
    frames, boxes = synthetic_clip(48, 8, 8, patch=2, seed=0)
    split = preprocess_clip(frames, boxes, 40)
    entries = embed_records(records, lambda r: split, open_backend(spec))
    features = pool_features(records, entries, PoolMode.AVERAGE)
    acc = {}
    for name, flags in [("full", {}), ("no_metadata", {"use_metadata": False}), ("single_stream", {"single_stream": True})]:
        res = cv_run(records, features, PoolMode.AVERAGE, Regime.TWO_CLASS, train_config=TrainConfig(**flags),
                     k=10, seed=0)
        acc[name] = res.pooled.accuracy
    ok = acc["full"] - acc["no_metadata"] > 0 and acc["full"] - acc["single_stream"] > 0
    criterion(8, "ablations lower accuracy", ok,
              f"full {acc['full']:.4f}, no metadata {acc['no_metadata']:.4f}, single stream {acc['single_stream']:.4f}")


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_09_cli_determinism(tmp_path, capsys, criterion):
    records = synthetic_records(15, classes=(Direction.LEFT, Direction.RIGHT, Direction.CENTER), seed=5,
                                gk_accuracy=0.5)
    write_synthetic_dataset(tmp_path / "data", records, width=12, height=10)
    cfg = {
        "data": {"manifest": "data/manifest.csv"},
        "run": {"regime": "three", "pooling": "auto", "seed": 4, "folds": 5},
        "backend": {"kind": "synthetic", "dim": 6, "signal": {"stage": "kick", "bias": 1.0, "noise_sigma": 0.3}},
        "variants": [{"name": "A_8", "family": "A", "window": 8}, {"name": "B_16", "family": "B", "window": 16}],
        "model": {"hidden": [32, 8, 16]},
        "train": {"max_epochs": 30},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    outputs = []
    for run, jobs in (("w1", "1"), ("w2", "2")):
        work = tmp_path / run
        for cmd in ("preprocess", "embed"):
            assert main([cmd, "--config", str(path), "--work-dir", str(work), "--jobs", jobs]) == 0
        capsys.readouterr()
        assert main(["evaluate", "--config", str(path), "--work-dir", str(work), "--jobs", jobs]) == 0
        stdout = capsys.readouterr().out
        outputs.append((_digest(work / "cache"), _digest(work / "reports"), stdout))
    (c1, r1, s1), (c2, r2, s2) = outputs
    ok = c1 == c2 and r1 == r2 and s1 == s2 and len(c1) == 2 and "metrics.csv" in r1
    criterion(9, "evaluate is deterministic across reruns and --jobs", ok,
              f"{len(c1)} caches, {len(r1)} report files identical for --jobs 1 vs 2")


def test_10_metric_oracle(criterion):
    rep = compute_metrics([0] * 8 + [1] * 2 + [0] * 3 + [1] * 7, [0] * 10 + [1] * 10, 2)
    exact = (rep.confusion.tolist() == [[8, 2], [3, 7]] and rep.accuracy == 0.75
             and abs(rep.precision[0] - 8 / 11) < 1e-12 and abs(rep.recall[0] - 0.8) < 1e-12
             and abs(rep.f1[0] - 0.7619047619047619) <= 1e-9)
    degenerate = compute_metrics([0] * 6, [0, 1, 2, 0, 1, 2], 3)
    zero = all(degenerate.precision[k] == degenerate.recall[k] == degenerate.f1[k] == 0 for k in (1, 2))
    criterion(10, "metric oracle and degenerate columns", exact and zero,
              f"acc {rep.accuracy}, p0 {rep.precision[0]:.6f}, r0 {rep.recall[0]}, F1_0 {rep.f1[0]:.9f}")


def _faults(decode, data):
    found = []
    for mutate, expected in ((lambda d: b"XXXXXX" + d[6:], BadMagic),
                             (lambda d: d[: len(d) // 2], TruncatedFile),
                             (lambda d: d[:30] + bytes([d[30] ^ 0xFF]) + d[31:], ChecksumMismatch)):
        try:
            decode(mutate(data))
            found.append(False)
        except expected:
            found.append(True)
    return all(found)


def test_11_format_round_trips(criterion):
    rng = np.random.default_rng(0)
    entries = {(f"clip{i}", StageTag(i % 2), i * 3): rng.normal(size=7).astype(np.float32) for i in range(5)}
    cache = encode_cache(entries)
    back = decode_cache(cache)
    cache_ok = list(back) == list(entries) and all(back[k].tobytes() == entries[k].tobytes() for k in entries)
    model = init_model(7, 3, (9, 4, 6), seed=2)
    blob = encode_model(model)
    restored = decode_model(blob)
    model_ok = all(a.tobytes() == b.tobytes() for a, b in zip(model.params(), restored.params()))
    faults_ok = _faults(decode_cache, cache) and _faults(decode_model, blob)
    criterion(11, "cache and checkpoint round-trips and fault detection", cache_ok and model_ok and faults_ok,
              "bit-exact round trips; BadMagic, TruncatedFile, ChecksumMismatch detected")
