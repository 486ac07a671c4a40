"""Context constraint and stage segmentation.

Frames are ``(height, width, 3)`` uint8 arrays. The kicker's box is pasted onto
the sequence-average frame so the kicker is the only moving element, and the
clip is then cut into a 32-frame running stage and a 16-frame kicking stage.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    BoxOutOfBounds,
    DimensionMismatch,
    EmptyInput,
    InsufficientTail,
    InvalidKickIndex,
    MalformedRow,
    MissingBox,
    MissingFile,
)

RUN_LEN = 32
KICK_LEN = 16
KICK_HALF = KICK_LEN // 2

Frame = np.ndarray


@dataclass(frozen=True)
class BoundingBox:
    frame_index: int
    x: int
    y: int
    w: int
    h: int

    def check(self, width: int, height: int) -> None:
        if self.w <= 0 or self.h <= 0:
            raise BoxOutOfBounds(f"frame {self.frame_index}: box has non-positive extent {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > width or self.y + self.h > height:
            raise BoxOutOfBounds(
                f"frame {self.frame_index}: box ({self.x},{self.y},{self.w},{self.h}) "
                f"outside {width}x{height} frame"
            )


@dataclass
class StageSplit:
    run_frames: list[Frame]
    kick_frames: list[Frame]
    padding_count: int = 0

    def __post_init__(self):
        if len(self.run_frames) != RUN_LEN or len(self.kick_frames) != KICK_LEN:
            raise ValueError(
                f"stage split must hold {RUN_LEN}+{KICK_LEN} frames, "
                f"got {len(self.run_frames)}+{len(self.kick_frames)}"
            )


def make_frame(width: int, height: int, value=0) -> Frame:
    frame = np.empty((height, width, 3), dtype=np.uint8)
    frame[...] = value
    return frame


def _check_frame(frame: Frame) -> None:
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise DimensionMismatch(f"expected (h, w, 3) uint8 frame, got {frame.shape} {frame.dtype}")


def average_frame(frames: Sequence[Frame]) -> Frame:
    """Per-channel mean over ``frames``, rounded half-up."""
    if len(frames) == 0:
        raise EmptyInput("average_frame needs at least one frame")
    shape = frames[0].shape
    total = np.zeros(shape, dtype=np.int64)
    for f in frames:
        _check_frame(f)
        if f.shape != shape:
            raise DimensionMismatch(f"frame shape {f.shape} differs from {shape}")
        total += f
    n = len(frames)
    # floor(sum/n + 1/2) in exact integer arithmetic
    mean = (2 * total + n) // (2 * n)
    return np.clip(mean, 0, 255).astype(np.uint8)


def composite(frames: Sequence[Frame], boxes: Sequence[BoundingBox], background: Frame) -> list[Frame]:
    """Paste each frame's box region onto ``background``.

    ``boxes`` are matched to frames by ``frame_index`` (position in ``frames``).
    """
    _check_frame(background)
    height, width = background.shape[:2]
    by_index = {b.frame_index: b for b in boxes}
    out = []
    for t, frame in enumerate(frames):
        _check_frame(frame)
        if frame.shape != background.shape:
            raise DimensionMismatch(f"frame {t} shape {frame.shape} differs from background {background.shape}")
        box = by_index.get(t)
        if box is None:
            raise MissingBox(t)
        box.check(width, height)
        result = background.copy()
        ys, xs = slice(box.y, box.y + box.h), slice(box.x, box.x + box.w)
        result[ys, xs] = frame[ys, xs]
        out.append(result)
    return out


def pad_front(frames: Sequence[Frame], target_len: int) -> list[Frame]:
    """Prepend copies of the first frame until the list is ``target_len`` long."""
    if len(frames) == 0:
        raise EmptyInput("cannot pad an empty frame list")
    missing = max(0, target_len - len(frames))
    return [frames[0]] * missing + list(frames)


def segment_stages(frames: Sequence[Frame], kick_frame_index: int) -> StageSplit:
    """Split a clip around its kick frame into running and kicking stages.

    The kicking stage is the 8 frames before the kick plus the 8 from it on;
    the running stage is up to 32 frames before that, front-padded to 32.
    """
    if kick_frame_index < KICK_HALF or kick_frame_index >= len(frames):
        raise InvalidKickIndex(
            f"kick_frame_index {kick_frame_index} must lie in [{KICK_HALF}, {len(frames)})"
        )
    if kick_frame_index + KICK_HALF > len(frames):
        raise InsufficientTail(
            f"kick at {kick_frame_index} leaves {len(frames) - kick_frame_index} frames, need {KICK_HALF}"
        )
    kick_start = kick_frame_index - KICK_HALF
    kick = list(frames[kick_start:kick_frame_index + KICK_HALF])
    run = list(frames[max(0, kick_start - RUN_LEN):kick_start])
    if not run:
        # no run-up at all: hold the first kick frame
        run = [kick[0]]
        padding = RUN_LEN
    else:
        padding = RUN_LEN - len(run)
    return StageSplit(run_frames=pad_front(run, RUN_LEN)[-RUN_LEN:], kick_frames=kick, padding_count=padding)


def trim_window(n_frames: int, kick_frame_index: int) -> tuple[int, int]:
    """Frame range ``[start, stop)`` that feeds the two stages."""
    start = max(0, kick_frame_index - KICK_HALF - RUN_LEN)
    return start, min(n_frames, kick_frame_index + KICK_HALF)


def preprocess_clip(frames: Sequence[Frame], boxes: Sequence[BoundingBox], kick_frame_index: int) -> StageSplit:
    """Trim, composite onto the trimmed-sequence average and segment one clip.

    Box frame indices refer to positions in the untrimmed ``frames``.
    """
    if kick_frame_index + KICK_HALF > len(frames):
        raise InsufficientTail(
            f"kick at {kick_frame_index} leaves {len(frames) - kick_frame_index} frames, need {KICK_HALF}"
        )
    start, stop = trim_window(len(frames), kick_frame_index)
    trimmed = list(frames[start:stop])
    if not trimmed:
        raise EmptyInput("no frames in the trimmed window")
    shifted = [
        BoundingBox(b.frame_index - start, b.x, b.y, b.w, b.h)
        for b in boxes
        if start <= b.frame_index < stop
    ]
    background = average_frame(trimmed)
    return segment_stages(composite(trimmed, shifted, background), kick_frame_index - start)


# -- file formats -------------------------------------------------------------

def read_boxes(path: "str | os.PathLike") -> list[BoundingBox]:
    """Read a ``frame_index,x,y,w,h`` track file."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"bounding-box file not found: {path}")
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise MalformedRow(lineno, f"{path}: expected frame_index,x,y,w,h")
            try:
                boxes.append(BoundingBox(*(int(p) for p in parts)))
            except ValueError:
                raise MalformedRow(lineno, f"{path}: non-integer field") from None
    indices = [b.frame_index for b in boxes]
    if indices != sorted(indices):
        raise MalformedRow(0, f"{path}: frame indices must be sorted ascending")
    return boxes


def write_boxes(path: "str | os.PathLike", boxes: Sequence[BoundingBox]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in sorted(boxes, key=lambda b: b.frame_index):
            fh.write(f"{b.frame_index},{b.x},{b.y},{b.w},{b.h}\n")


def read_frames(directory: "str | os.PathLike") -> list[Frame]:
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"frame directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise EmptyInput(f"no PNG frames in {directory}")
    frames = []
    for p in files:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    return frames


def write_frames(directory: "str | os.PathLike", frames: Sequence[Frame]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob("*.png"):
        stale.unlink()
    width = max(3, len(str(len(frames) - 1)))
    for i, frame in enumerate(frames):
        Image.fromarray(np.ascontiguousarray(frame)).save(directory / f"{i:0{width}d}.png", optimize=False)
