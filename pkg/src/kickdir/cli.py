"""Command line entry point: ``kickdir {preprocess,embed,evaluate,report}``.

Exit codes: 0 success, 1 input or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .dataset import ClipRecord, Direction, apply_regime, load_manifest, summarize
from .embedding import PoolMode, embed_split, open_backend, read_cache, write_cache
from .errors import InputError, KickDirError, MissingFile, NoAnnotations, PipelineError
from .evaluation import (
    VariantResult,
    aggregate_variants,
    baseline_row,
    cv_run,
    format_confusion,
    format_distribution,
    format_metrics_table,
    gk_baseline,
    make_folds,
    metric_rows,
    select_pooling,
    ModelConfig,
)
from .pipeline import pool_features, preprocess_record
from .preprocess import KICK_LEN, RUN_LEN, StageSplit, read_frames, write_frames

log = logging.getLogger("kickdir")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


# -- preprocess -----------------------------------------------------------------

def _preprocess_one(args) -> tuple[str, Optional[int], Optional[str]]:
    record, out_dir = args
    try:
        split = preprocess_record(record)
        clip_dir = Path(out_dir) / record.clip_id
        write_frames(clip_dir / "run", split.run_frames)
        write_frames(clip_dir / "kick", split.kick_frames)
        (clip_dir / "split.json").write_text(json.dumps({"padding_count": split.padding_count}) + "\n")
        return record.clip_id, split.padding_count, None
    except KickDirError as exc:
        return record.clip_id, None, str(exc)


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def cmd_preprocess(cfg: RunConfig) -> int:
    records = load_manifest(cfg.manifest)
    cfg.stages_dir.mkdir(parents=True, exist_ok=True)
    results = _map(_preprocess_one, [(r, str(cfg.stages_dir)) for r in records], cfg.jobs)
    failures = 0
    padded = 0
    for clip_id, padding, error in sorted(results):
        if error is not None:
            failures += 1
            _err(f"clip {clip_id}: {error}")
        else:
            padded += padding > 0
            print(f"{clip_id}\tpadding_count={padding}")
    print(f"preprocessed {len(records) - failures}/{len(records)} clips, {padded} padded")
    return 1 if failures else 0


def load_split(cfg: RunConfig, record: ClipRecord) -> StageSplit:
    clip_dir = cfg.stages_dir / record.clip_id
    meta = clip_dir / "split.json"
    if not meta.is_file():
        raise MissingFile(f"no preprocessed stages for {record.clip_id} at {clip_dir} (run 'preprocess' first)")
    run = read_frames(clip_dir / "run")
    kick = read_frames(clip_dir / "kick")
    if len(run) != RUN_LEN or len(kick) != KICK_LEN:
        raise InputError(f"{clip_dir}: expected {RUN_LEN}+{KICK_LEN} frames")
    return StageSplit(run, kick, json.loads(meta.read_text())["padding_count"])


# -- embed ------------------------------------------------------------------------

def _embed_group(args):
    cfg, variant, records, all_records = args
    backend = open_backend(variant.backend_spec(cfg.seed, all_records))
    entries = {}
    for r in records:
        try:
            entries.update(embed_split(backend, load_split(cfg, r), r.clip_id))
        except KickDirError as exc:
            cls = InputError if isinstance(exc, InputError) else PipelineError
            raise cls(f"clip {r.clip_id}: {exc}") from exc
    return entries


def cmd_embed(cfg: RunConfig) -> int:
    records = sorted(load_manifest(cfg.manifest), key=lambda r: r.clip_id)
    cfg.cache_dir.mkdir(parents=True, exist_ok=True)
    for variant in cfg.variants:
        backend = open_backend(variant.backend_spec(cfg.seed, records))
        jobs = cfg.jobs if backend.thread_safe else 1
        groups = [list(g) for g in np.array_split(np.array(records, dtype=object), jobs) if len(g)] or [[]]
        parts = _map(_embed_group, [(cfg, variant, g, records) for g in groups], jobs)
        entries = {}
        for part in parts:
            entries.update(part)
        path = cfg.cache_path(variant)
        write_cache(path, entries, variant.dim)
        print(f"{variant.name}: {len(entries)} chunk embeddings (window {variant.window}, dim {variant.dim}) -> {path}")
    return 0


# -- evaluate ---------------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig) -> int:
    all_records = load_manifest(cfg.manifest)
    records = apply_regime(all_records, cfg.regime)
    summary = summarize(records)
    print(f"dataset: {summary.total} clips, labels {summary.labels}, regime {cfg.regime.value}")
    plan = make_folds(records, cfg.folds, cfg.seed)
    model_cfg = ModelConfig(cfg.hidden)
    rows, blocks, selection, variant_results = [], [], [], []
    for variant in cfg.variants:
        path = cfg.cache_path(variant)
        if not path.is_file():
            raise MissingFile(f"embedding cache for variant {variant.name} not found at {path} (run 'embed' first)")
        entries = read_cache(path)
        modes = [PoolMode.AVERAGE, PoolMode.MAX] if cfg.pooling == "auto" else [PoolMode.parse(cfg.pooling)]
        results = {}
        for mode in modes:
            feats = pool_features(records, entries, mode)
            results[mode] = cv_run(records, feats, mode, cfg.regime, model_cfg, cfg.train,
                                   k=cfg.folds, seed=cfg.seed, jobs=cfg.jobs, plan=plan)
        chosen = select_pooling(results) if cfg.pooling == "auto" else modes[0]
        if cfg.pooling == "auto":
            avg, mx = results[PoolMode.AVERAGE].mean_val_accuracy, results[PoolMode.MAX].mean_val_accuracy
            selection.append([variant.name, f"{avg:.6f}", f"{mx:.6f}", chosen.value])
            print(f"{variant.name}: selected pooling {chosen.value} (validation accuracy avg {avg:.4f}, max {mx:.4f})")
        res = results[chosen]
        rows.extend(metric_rows(variant.name, chosen.value, res))
        blocks.append(format_confusion(f"{variant.name} pooling={chosen.value} pooled over {cfg.folds} folds",
                                       res.pooled))
        variant_results.append(VariantResult(variant.family, variant.name, variant.window, chosen,
                                             [r.accuracy for r in res.test], [r.f1_macro for r in res.test]))
    try:
        gk = gk_baseline(records, cfg.regime)
        rows.append(baseline_row(gk))
        blocks.append(format_confusion("gk_baseline", gk))
    except NoAnnotations:
        log.info("no goalkeeper annotations; baseline skipped")

    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    table = format_metrics_table(rows)
    (cfg.reports_dir / "metrics.csv").write_text(table)
    (cfg.reports_dir / "confusion.txt").write_text("\n".join(blocks))
    (cfg.reports_dir / "distribution.csv").write_text(format_distribution(aggregate_variants(variant_results)))
    if selection:
        with open(cfg.reports_dir / "pooling.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "val_acc_avg", "val_acc_max", "selected"])
            w.writerows(selection)
    sys.stdout.write(table)
    return 0


# -- report -----------------------------------------------------------------------

def cmd_report(cfg: RunConfig) -> int:
    metrics_path = cfg.reports_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise MissingFile(f"no metrics at {metrics_path} (run 'evaluate' first)")
    with open(metrics_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    variants = {v.name: v for v in cfg.variants}
    header = f"{'Architecture':<14}{'Model':<18}{'#Frames':>8}{'Pooling':>9}{'Acc':>8}{'Prec':>8}{'Rec':>8}{'F1':>8}"
    print(f"regime: {cfg.regime.value}-class, pooled test metrics over all folds")
    print(header)
    print("-" * len(header))
    for row in rows:
        if row["fold"] != "pooled":
            continue
        v = variants.get(row["variant"])
        family = "GK Baseline" if row["variant"] == "gk_baseline" else (v.family if v else "?")
        name = "-" if row["variant"] == "gk_baseline" else row["variant"]
        frames = str(v.window) if v else "-"
        pct = lambda key: f"{100 * float(row[key]):.1f}%"  # noqa: E731
        print(f"{family:<14}{name:<18}{frames:>8}{row['pooling']:>9}{pct('accuracy'):>8}"
              f"{pct('precision_macro'):>8}{pct('recall_macro'):>8}{pct('f1_macro'):>8}")
    dist = cfg.reports_dir / "distribution.csv"
    if dist.is_file():
        print()
        print("per-family distribution of mean fold accuracy:")
        sys.stdout.write(dist.read_text())
    return 0


# -- synthetic demo data ----------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    from .synthetic import synthetic_records, write_synthetic_dataset

    classes = [Direction.LEFT, Direction.RIGHT] + ([Direction.CENTER] if args.center else [])
    records = synthetic_records(args.per_class, classes, seed=args.seed, meta_agreement=args.meta_agreement,
                                gk_accuracy=args.gk_accuracy)
    manifest = write_synthetic_dataset(args.out, records, seed=args.seed)
    print(f"wrote {len(records)} clips and {manifest}")
    return 0


COMMANDS = {"preprocess": cmd_preprocess, "embed": cmd_embed, "evaluate": cmd_evaluate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--manifest", help="manifest CSV (overrides data.manifest)")
    common.add_argument("--work-dir", dest="work_dir", help="work directory (overrides data.work_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--regime", choices=["two", "three"])
    common.add_argument("--pooling", choices=["avg", "max", "auto"])
    common.add_argument("--folds", type=int)
    common.add_argument("--no-metadata", dest="use_metadata", action="store_const", const=False)
    common.add_argument("--single-stream", dest="single_stream", action="store_const", const=True)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="kickdir", description="Penalty-kick direction anticipation pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", parents=[common], help="composite and segment clips into stages")
    sub.add_parser("embed", parents=[common], help="embed stage chunks into a cache file per variant")
    sub.add_parser("evaluate", parents=[common], help="cross-validate every variant and write reports")
    sub.add_parser("report", parents=[common], help="print the result tables from a previous evaluate")

    synth = sub.add_parser("make-synthetic", help="write a synthetic demo dataset")
    synth.add_argument("out")
    synth.add_argument("--per-class", type=int, default=20)
    synth.add_argument("--center", action="store_true", help="include center-labelled clips")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--meta-agreement", type=float, default=0.5)
    synth.add_argument("--gk-accuracy", type=float, default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "make-synthetic":
            return cmd_make_synthetic(args)
        overrides = {k: getattr(args, k) for k in ("manifest", "work_dir", "seed", "jobs", "regime",
                                                    "pooling", "folds", "use_metadata", "single_stream")}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except InputError as exc:
        _err(str(exc))
        return 1
    except KickDirError as exc:
        _err(str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001
        _err(f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
