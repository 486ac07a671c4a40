"""Synthetic penalty-kick clips for tests and demos.

A clip is a static random background with a small coloured patch (the
"kicker") moving across it; the patch's box is the annotation.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import ClipRecord, Direction, Side, write_manifest
from .preprocess import BoundingBox, Frame, write_boxes, write_frames


def synthetic_clip(n_frames: int = 48, width: int = 32, height: int = 24, patch: int = 6,
                   seed: int = 0) -> tuple[list[Frame], list[BoundingBox]]:
    rng = np.random.default_rng(seed)
    background = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    colour = rng.integers(0, 256, size=3, dtype=np.uint8)
    x0 = int(rng.integers(0, width - patch + 1))
    y0 = int(rng.integers(0, height - patch + 1))
    frames, boxes = [], []
    for t in range(n_frames):
        x = (x0 + t) % (width - patch + 1)
        y = y0
        frame = background.copy()
        frame[y:y + patch, x:x + patch] = colour
        frames.append(frame)
        boxes.append(BoundingBox(t, x, y, patch, patch))
    return frames, boxes


def synthetic_records(n_per_class: int, classes=(Direction.LEFT, Direction.RIGHT), seed: int = 0,
                      meta_agreement: float = 0.5, gk_accuracy: Optional[float] = None,
                      prefix: str = "clip") -> list[ClipRecord]:
    """Labelled records without media.

    ``meta_agreement`` is the probability that ``field_side`` matches a left/right
    label, which makes the metadata informative when above 0.5.
    """
    rng = np.random.default_rng(seed)
    labels = [c for c in classes for _ in range(n_per_class)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    width = len(str(len(labels)))
    records = []
    for i, label in enumerate(labels):
        if label is Direction.CENTER:
            side = Side.RIGHT if rng.random() < 0.5 else Side.LEFT
        else:
            same = Side(label.value)
            other = Side.LEFT if same is Side.RIGHT else Side.RIGHT
            side = same if rng.random() < meta_agreement else other
        foot = Side.RIGHT if rng.random() < 0.75 else Side.LEFT
        dive = None
        if gk_accuracy is not None:
            if rng.random() < gk_accuracy:
                dive = label
            else:
                dive = [d for d in (Direction.LEFT, Direction.CENTER, Direction.RIGHT) if d is not label][
                    int(rng.integers(0, 2))]
        records.append(ClipRecord(f"{prefix}{i:0{width}d}", "", "", 40, side, foot, label, dive))
    return records


def write_synthetic_dataset(root, records: list[ClipRecord], n_frames: int = 48, width: int = 32,
                            height: int = 24, seed: int = 0) -> Path:
    """Write frames, box tracks and ``manifest.csv`` for ``records`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for i, r in enumerate(records):
        frames, boxes = synthetic_clip(n_frames, width, height, seed=seed * 100003 + i)
        frame_dir = root / "frames" / r.clip_id
        box_path = root / "boxes" / f"{r.clip_id}.csv"
        box_path.parent.mkdir(parents=True, exist_ok=True)
        write_frames(frame_dir, frames)
        write_boxes(box_path, boxes)
        kick = min(r.kick_frame_index, n_frames - 8)
        written.append(ClipRecord(r.clip_id, str(frame_dir), str(box_path), kick, r.field_side,
                                  r.kicking_foot, r.label, r.gk_dive))
    manifest = root / "manifest.csv"
    write_manifest(manifest, written, relative_to=root)
    return manifest
