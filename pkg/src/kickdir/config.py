"""Run configuration: a YAML file with namespaced sections, overridable from the CLI.

Example::

    data:
      manifest: data/manifest.csv
      work_dir: work
    run:
      regime: two          # two | three
      pooling: auto        # avg | max | auto
      seed: 0
      folds: 10
      jobs: 1
    backend:               # defaults shared by all variants
      kind: synthetic      # synthetic | precomputed | external
      dim: 16
      signal: {stage: kick, coord: 0, bias: 1.0, noise_sigma: 0.3}
    variants:
      - {name: MViTv2_S, family: MViTv2, window: 16}
      - {name: X3D_M, family: X3D, window: 13}
    model:
      hidden: [256, 16, 128]
    train:
      learning_rate: 0.001
      max_epochs: 200
      batch_size: 32
      early_stop_patience: 20
    ablation:
      use_metadata: true
      single_stream: false

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .classifier import TrainConfig
from .dataset import ClipRecord, Regime
from .embedding import BackendKind, BackendSpec, StageTag, SyntheticSignal
from .errors import InputError, MissingFile


@dataclass
class VariantConfig:
    name: str
    family: str
    window: int
    kind: BackendKind = BackendKind.SYNTHETIC
    dim: int = 16
    identifier: str = ""
    signal: Optional[dict] = None

    def backend_spec(self, seed: int, records: Optional[list[ClipRecord]] = None) -> BackendSpec:
        signal = None
        if self.signal is not None and self.kind is BackendKind.SYNTHETIC:
            opts = dict(self.signal)
            stage = StageTag[str(opts.pop("stage", "kick")).upper()]
            labels = {r.clip_id: r.label for r in records or []}
            signal = SyntheticSignal(labels=labels, stage=stage, **opts)
        return BackendSpec(self.kind, self.window, self.dim, self.identifier or self.name, seed, signal)


@dataclass
class RunConfig:
    manifest: Path
    work_dir: Path
    regime: Regime = Regime.TWO_CLASS
    pooling: str = "auto"
    seed: int = 0
    folds: int = 10
    jobs: int = 1
    variants: list[VariantConfig] = field(default_factory=list)
    hidden: tuple = (256, 16, 128)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def stages_dir(self) -> Path:
        return self.work_dir / "stages"

    @property
    def cache_dir(self) -> Path:
        return self.work_dir / "cache"

    @property
    def reports_dir(self) -> Path:
        return self.work_dir / "reports"

    def cache_path(self, variant: VariantConfig) -> Path:
        return self.cache_dir / f"{variant.name}.pkemb"


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"use_metadata", "single_stream", "seed"}


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise InputError(f"config section '{name}' must be a mapping")
    return value


def load_config(path=None, overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    """Load a config file (optional) and apply flag overrides (``None`` values ignored)."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise InputError(f"{path}: top level must be a mapping")
        base = path.parent
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    data = _section(raw, "data")
    run = {**_section(raw, "run"), **{k: overrides[k] for k in ("regime", "pooling", "seed", "jobs", "folds")
                                      if k in overrides}}
    manifest = overrides.get("manifest", data.get("manifest"))
    work_dir = overrides.get("work_dir", data.get("work_dir", "work"))
    if manifest is None:
        raise InputError("no manifest given (data.manifest or --manifest)")

    def resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    pooling = str(run.get("pooling", "auto")).lower()
    if pooling not in ("avg", "max", "auto"):
        raise InputError(f"pooling must be avg, max or auto, got {pooling!r}")
    try:
        regime = Regime.parse(str(run.get("regime", "two")))
    except ValueError:
        raise InputError(f"unknown regime {run.get('regime')!r}") from None

    backend = _section(raw, "backend")
    variants = []
    for v in raw.get("variants") or [{"name": "synthetic", "family": "synthetic", "window": 8}]:
        merged = {**backend, **v}
        try:
            kind = BackendKind(merged.get("kind", "synthetic"))
            identifier = merged.get("identifier", "")
            if kind is not BackendKind.SYNTHETIC and identifier:
                identifier = str(resolve(identifier))
            variants.append(VariantConfig(
                name=str(merged["name"]),
                family=str(merged.get("family", merged["name"])),
                window=int(merged["window"]),
                kind=kind,
                dim=int(merged.get("dim", 16)),
                identifier=identifier,
                signal=merged.get("signal"),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"bad variant entry {v!r}: {exc}") from None
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise InputError("variant names must be unique")

    ablation = _section(raw, "ablation")
    train_raw = _section(raw, "train")
    unknown = set(train_raw) - _TRAIN_KEYS
    if unknown:
        raise InputError(f"unknown train keys: {sorted(unknown)}")
    try:
        train = TrainConfig(**train_raw,
                            seed=int(run.get("seed", 0)),
                            use_metadata=bool(overrides.get("use_metadata", ablation.get("use_metadata", True))),
                            single_stream=bool(overrides.get("single_stream", ablation.get("single_stream", False))))
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad train config: {exc}") from None

    return RunConfig(
        manifest=resolve(manifest),
        work_dir=resolve(work_dir),
        regime=regime,
        pooling=pooling,
        seed=int(run.get("seed", 0)),
        folds=int(run.get("folds", 10)),
        jobs=max(1, int(run.get("jobs", 1))),
        variants=variants,
        hidden=tuple(int(h) for h in _section(raw, "model").get("hidden", (256, 16, 128))),
        train=train,
    )
