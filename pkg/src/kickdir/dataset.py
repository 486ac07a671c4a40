"""Penalty-kick manifest: typed clip records, validation and label regimes."""
from __future__ import annotations

import csv
import enum
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DuplicateClipId,
    EmptyResult,
    MalformedRow,
    MissingFile,
    UnknownEnumValue,
)

MANIFEST_HEADER = [
    "clip_id",
    "frames_path",
    "bbox_path",
    "kick_frame_index",
    "field_side",
    "kicking_foot",
    "label",
    "gk_dive",
]

# frames needed around the kick: 8 before it, 8 from it onwards
KICK_HALF_WINDOW = 8


class Side(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


class Direction(enum.Enum):
    LEFT = "left"
    CENTER = "center"
    RIGHT = "right"


# Class indices. Left/Right keep the same index in both regimes so the
# two-class problem is a prefix of the three-class one.
CLASS_INDEX = {Direction.LEFT: 0, Direction.RIGHT: 1, Direction.CENTER: 2}
CLASS_NAMES = ["left", "right", "center"]


class Regime(enum.Enum):
    THREE_CLASS = "three"
    TWO_CLASS = "two"

    @property
    def n_classes(self) -> int:
        return 3 if self is Regime.THREE_CLASS else 2

    @classmethod
    def parse(cls, value: "str | Regime") -> "Regime":
        if isinstance(value, Regime):
            return value
        aliases = {"3": "three", "2": "two", "threeclass": "three", "twoclass": "two"}
        value = aliases.get(value.lower(), value.lower())
        return cls(value)


@dataclass(frozen=True)
class LabelRegime:
    mode: Regime

    @property
    def n(self) -> int:
        return self.mode.n_classes


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frames_path: str
    bbox_path: str
    kick_frame_index: int
    field_side: Side
    kicking_foot: Side
    label: Direction
    gk_dive: Optional[Direction] = None

    @property
    def class_index(self) -> int:
        return CLASS_INDEX[self.label]

    @property
    def gamma(self) -> tuple[int, int]:
        """Metadata as binary indicators, 0 = left and 1 = right."""
        return (int(self.field_side is Side.RIGHT), int(self.kicking_foot is Side.RIGHT))


@dataclass
class DatasetSummary:
    total: int
    labels: dict[str, int] = field(default_factory=dict)
    field_side: dict[str, int] = field(default_factory=dict)
    kicking_foot: dict[str, int] = field(default_factory=dict)
    gk_annotated: int = 0


def _parse_enum(enum_cls, value: str, line: int, name: str):
    try:
        return enum_cls(value.strip().lower())
    except ValueError:
        raise UnknownEnumValue(line, name, value) from None


def load_manifest(path: "str | os.PathLike") -> list[ClipRecord]:
    """Read a manifest CSV and return validated records in file order.

    Relative frame and box paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "missing header row") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise MalformedRow(1, f"expected header {','.join(MANIFEST_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise MalformedRow(line, f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            clip_id, frames_path, bbox_path, kick, side, foot, label, dive = (c.strip() for c in row)
            if not clip_id:
                raise MalformedRow(line, "empty clip_id")
            if clip_id in seen:
                raise DuplicateClipId(f"line {line}: duplicate clip_id {clip_id!r}")
            try:
                kick_index = int(kick)
            except ValueError:
                raise MalformedRow(line, f"kick_frame_index is not an integer: {kick!r}") from None
            if kick_index < KICK_HALF_WINDOW:
                raise MalformedRow(line, f"kick_frame_index must be >= {KICK_HALF_WINDOW}")
            record = ClipRecord(
                clip_id=clip_id,
                frames_path=_resolve(base, frames_path),
                bbox_path=_resolve(base, bbox_path),
                kick_frame_index=kick_index,
                field_side=_parse_enum(Side, side, line, "field_side"),
                kicking_foot=_parse_enum(Side, foot, line, "kicking_foot"),
                label=_parse_enum(Direction, label, line, "label"),
                gk_dive=_parse_enum(Direction, dive, line, "gk_dive") if dive else None,
            )
            seen.add(clip_id)
            records.append(record)
    return records


def _resolve(base: Path, value: str) -> str:
    if not value:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def write_manifest(path: "str | os.PathLike", records: Iterable[ClipRecord], relative_to=None) -> None:
    """Write records as a manifest CSV.

    If ``relative_to`` is given, frame and box paths under it are written relative to it.
    """
    def rel(p: str) -> str:
        if relative_to is None or not p:
            return p
        try:
            return os.path.relpath(p, relative_to)
        except ValueError:
            return p

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([
                r.clip_id,
                rel(r.frames_path),
                rel(r.bbox_path),
                r.kick_frame_index,
                r.field_side.value,
                r.kicking_foot.value,
                r.label.value,
                r.gk_dive.value if r.gk_dive is not None else "",
            ])


def summarize(records: Iterable[ClipRecord]) -> DatasetSummary:
    records = list(records)
    labels = Counter(r.label.value for r in records)
    sides = Counter(r.field_side.value for r in records)
    feet = Counter(r.kicking_foot.value for r in records)
    return DatasetSummary(
        total=len(records),
        labels={d.value: labels.get(d.value, 0) for d in Direction},
        field_side={s.value: sides.get(s.value, 0) for s in Side},
        kicking_foot={s.value: feet.get(s.value, 0) for s in Side},
        gk_annotated=sum(r.gk_dive is not None for r in records),
    )


def apply_regime(records: Iterable[ClipRecord], regime: "LabelRegime | Regime | str") -> list[ClipRecord]:
    """Filter records for a label regime; the two-class regime drops center kicks."""
    if isinstance(regime, LabelRegime):
        regime = regime.mode
    regime = Regime.parse(regime)
    records = list(records)
    if regime is Regime.THREE_CLASS:
        return records
    kept = [r for r in records if r.label is not Direction.CENTER]
    if records and not kept:
        raise EmptyResult("two-class regime removed every record")
    return kept
