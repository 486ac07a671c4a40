"""Stratified cross-validation, metrics, goalkeeper baseline and variant summaries."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .classifier import Batch, FeatureRecord, TrainConfig, init_model, predict, train, zero_model
from .dataset import CLASS_INDEX, CLASS_NAMES, ClipRecord, Direction, Regime, apply_regime
from .embedding import PoolMode
from .errors import (
    EmptyFamily,
    IncomparableResults,
    LengthMismatch,
    NoAnnotations,
    TooFewSamples,
)

log = logging.getLogger(__name__)


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]
    class_counts: list[list[int]]  # [fold][class]

    def members(self, fold: int) -> list[str]:
        return [cid for cid, f in self.assignment.items() if f == fold]

    @property
    def fingerprint(self) -> str:
        text = ";".join(f"{cid}={f}" for cid, f in sorted(self.assignment.items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: int

    @property
    def precision_macro(self) -> float:
        return float(np.mean(self.precision))

    @property
    def recall_macro(self) -> float:
        return float(np.mean(self.recall))

    @property
    def f1_macro(self) -> float:
        return float(np.mean(self.f1))


@dataclass
class ModelConfig:
    hidden: tuple = (256, 16, 128)
    zero_init: bool = False  # all-zero weights: a constant predictor, for baselines and tests


@dataclass
class CVResult:
    plan: FoldPlan
    pooling: PoolMode
    test: list[MetricsReport]
    validation: list[MetricsReport]
    pooled: MetricsReport
    predictions: dict[str, int] = field(default_factory=dict)

    @property
    def mean_val_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.validation]))

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.test]))

    @property
    def mean_test_f1(self) -> float:
        return float(np.mean([r.f1_macro for r in self.test]))


@dataclass
class VariantResult:
    family: str
    variant: str
    window: int
    pooling: PoolMode
    fold_accuracy: list[float]
    fold_f1: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))


@dataclass
class FamilySummary:
    family: str
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    outliers: list[str]
    best_accuracy: float
    best_variant: str


DistributionSummary = dict  # family -> FamilySummary


def make_folds(records: Sequence[ClipRecord], k: int = 10, seed: int = 0) -> FoldPlan:
    """Stratified fold assignment.

    Each class is shuffled with ``seed`` and dealt round-robin; the dealing
    position carries over from one class to the next so fold sizes stay within 1.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(records) < k:
        raise TooFewSamples(f"{len(records)} records cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for r in records:
        by_class.setdefault(r.class_index, []).append(r.clip_id)
    n_classes = max(by_class) + 1
    assignment: dict[str, int] = {}
    counts = [[0] * n_classes for _ in range(k)]
    cursor = 0
    for cls in sorted(by_class):
        ids = by_class[cls]
        if len(ids) < k:
            log.warning("class %s has %d samples for %d folds; stratification is best effort",
                        CLASS_NAMES[cls], len(ids), k)
        for i in rng.permutation(len(ids)):
            fold = cursor % k
            assignment[ids[i]] = fold
            counts[fold][cls] += 1
            cursor += 1
    ordered = {r.clip_id: assignment[r.clip_id] for r in records}
    return FoldPlan(k, seed, ordered, counts)


def compute_metrics(predictions: Sequence[int], labels: Sequence[int], n: int) -> MetricsReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise LengthMismatch(f"{predictions.size} predictions vs {labels.size} labels")
    if labels.size == 0:
        raise LengthMismatch("no samples to score")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return metrics_from_confusion(cm)


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = int(cm.sum())
    return MetricsReport(cm, float(tp.sum() / total) if total else 0.0, precision, recall, f1, total)


def gk_baseline(records: Sequence[ClipRecord], regime: "Regime | str") -> MetricsReport:
    """Score the goalkeeper's dive as a prediction of the shot direction.

    In the two-class regime a center dive is counted as wrong for either class.
    """
    regime = Regime.parse(regime)
    annotated = [r for r in apply_regime(records, regime) if r.gk_dive is not None]
    if not annotated:
        raise NoAnnotations("no records carry a goalkeeper dive annotation")
    n = regime.n_classes
    labels = [r.class_index for r in annotated]
    preds = []
    for r in annotated:
        if n == 2 and r.gk_dive is Direction.CENTER:
            preds.append(1 - r.class_index)
        else:
            preds.append(CLASS_INDEX[r.gk_dive])
    return compute_metrics(preds, labels, n)


def select_pooling(results: Mapping[PoolMode, CVResult]) -> PoolMode:
    """Pick the pooling mode with the higher mean validation accuracy; ties go to average."""
    avg, mx = results[PoolMode.AVERAGE], results[PoolMode.MAX]
    if avg.plan.fingerprint != mx.plan.fingerprint:
        raise IncomparableResults("pooling results were computed over different folds")
    return PoolMode.MAX if mx.mean_val_accuracy > avg.mean_val_accuracy else PoolMode.AVERAGE


def _fold_job(args):
    fold, k, features, assignment, n_classes, model_config, config, seed = args
    val_fold = (fold + 1) % k
    train_ids = [cid for cid, f in assignment.items() if f not in (fold, val_fold)]
    val_ids = [cid for cid, f in assignment.items() if f == val_fold]
    test_ids = [cid for cid, f in assignment.items() if f == fold]
    tr = Batch.from_records([features[c] for c in train_ids])
    va = Batch.from_records([features[c] for c in val_ids])
    te = Batch.from_records([features[c] for c in test_ids])
    cfg = TrainConfig(**{**config.__dict__, "seed": seed + fold})
    init = zero_model if model_config.zero_init else init_model
    model = init(tr.t_run.shape[1], n_classes, tuple(model_config.hidden), seed=seed + fold,
                 use_metadata=cfg.use_metadata, single_stream=cfg.single_stream)
    result = train(model, tr, va, cfg)
    val_pred = predict(result.model, va)
    test_pred = predict(result.model, te)
    return (fold,
            compute_metrics(test_pred, te.labels, n_classes),
            compute_metrics(val_pred, va.labels, n_classes),
            dict(zip(test_ids, (int(p) for p in test_pred))))


def cv_run(records: Sequence[ClipRecord], features: Mapping[str, FeatureRecord], pooling: "PoolMode | str",
           regime: "Regime | str" = Regime.TWO_CLASS, model_config: Optional[ModelConfig] = None,
           train_config: Optional[TrainConfig] = None, k: int = 10, seed: int = 0, jobs: int = 1,
           plan: Optional[FoldPlan] = None) -> CVResult:
    """k-fold run: fold f is the test fold, fold (f+1) mod k validates, the rest train.

    ``features`` maps clip_id to pooled features already built with ``pooling``.
    """
    regime = Regime.parse(regime)
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    records = apply_regime(records, regime)
    if plan is None:
        plan = make_folds(records, k, seed)
    n = regime.n_classes
    feats = {r.clip_id: features[r.clip_id] for r in records}
    jobs_args = [(f, plan.k, feats, plan.assignment, n, model_config, train_config, seed)
                 for f in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_fold_job, jobs_args))
    else:
        outputs = [_fold_job(a) for a in jobs_args]
    outputs.sort(key=lambda o: o[0])
    test = [o[1] for o in outputs]
    validation = [o[2] for o in outputs]
    predictions: dict[str, int] = {}
    for o in outputs:
        predictions.update(o[3])
    pooled = metrics_from_confusion(sum(r.confusion for r in test))
    return CVResult(plan, PoolMode.parse(pooling), test, validation, pooled,
                    {cid: predictions[cid] for cid in sorted(predictions)})


def _nearest_rank(sorted_values: Sequence[float], q: float) -> float:
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


def aggregate_variants(results: Sequence[VariantResult]) -> DistributionSummary:
    """Per-family five-number summary of mean accuracies (nearest-rank quartiles)."""
    families: dict[str, list[VariantResult]] = {}
    for r in results:
        families.setdefault(r.family, []).append(r)
    summary = {}
    for family in sorted(families):
        members = families[family]
        if not members:
            raise EmptyFamily(family)
        accs = sorted(m.mean_accuracy for m in members)
        q1, med, q3 = (_nearest_rank(accs, q) for q in (0.25, 0.5, 0.75))
        iqr = q3 - q1
        lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        outliers = [m.variant for m in members if m.mean_accuracy < lo or m.mean_accuracy > hi]
        best = max(members, key=lambda m: m.mean_accuracy)
        summary[family] = FamilySummary(family, len(members), accs[0], q1, med, q3, accs[-1],
                                        outliers, best.mean_accuracy, best.variant)
    return summary


# -- exports ------------------------------------------------------------------

METRICS_HEADER = ["variant", "pooling", "fold", "accuracy", "precision_macro", "recall_macro", "f1_macro"]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metric_rows(variant: str, pooling: str, result: CVResult) -> list[list[str]]:
    rows = []
    for f, rep in enumerate(result.test):
        rows.append([variant, pooling, str(f), _fmt(rep.accuracy), _fmt(rep.precision_macro),
                     _fmt(rep.recall_macro), _fmt(rep.f1_macro)])
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in result.test]))  # noqa: E731
    rows.append([variant, pooling, "mean", _fmt(mean("accuracy")), _fmt(mean("precision_macro")),
                 _fmt(mean("recall_macro")), _fmt(mean("f1_macro"))])
    p = result.pooled
    rows.append([variant, pooling, "pooled", _fmt(p.accuracy), _fmt(p.precision_macro),
                 _fmt(p.recall_macro), _fmt(p.f1_macro)])
    return rows


def baseline_row(report: MetricsReport) -> list[str]:
    return ["gk_baseline", "-", "pooled", _fmt(report.accuracy), _fmt(report.precision_macro),
            _fmt(report.recall_macro), _fmt(report.f1_macro)]


def format_metrics_table(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def format_confusion(title: str, report: MetricsReport) -> str:
    n = report.confusion.shape[0]
    names = CLASS_NAMES[:n]
    width = max(8, *(len(x) for x in names))
    lines = [f"# {title}", "true\\pred".ljust(width) + "".join(nm.rjust(width) for nm in names)]
    for i, nm in enumerate(names):
        lines.append(nm.ljust(width) + "".join(str(v).rjust(width) for v in report.confusion[i]))
    lines.append(f"accuracy {_fmt(report.accuracy)}  samples {report.support}")
    return "\n".join(lines) + "\n"


DISTRIBUTION_HEADER = ["family", "count", "min", "q1", "median", "q3", "max", "outliers",
                       "best_accuracy", "best_variant"]


def format_distribution(summary: DistributionSummary) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DISTRIBUTION_HEADER)
    for s in summary.values():
        writer.writerow([s.family, s.count, _fmt(s.minimum), _fmt(s.q1), _fmt(s.median), _fmt(s.q3),
                         _fmt(s.maximum), ";".join(s.outliers), _fmt(s.best_accuracy), s.best_variant])
    return buf.getvalue()
