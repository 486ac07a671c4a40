"""Glue between stages: clip preprocessing, embedding of stage splits and feature pooling."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

from .classifier import FeatureRecord
from .dataset import ClipRecord
from .embedding import Backend, PoolMode, StageTag, embed_split, pool_chunks, stage_sets
from .preprocess import StageSplit, preprocess_clip, read_boxes, read_frames


def preprocess_record(record: ClipRecord) -> StageSplit:
    frames = read_frames(record.frames_path)
    boxes = read_boxes(record.bbox_path)
    return preprocess_clip(frames, boxes, record.kick_frame_index)


def embed_records(records: Iterable[ClipRecord], load_split: Callable[[ClipRecord], StageSplit],
                  backend: Backend) -> dict:
    """Chunk embeddings for every clip, keyed ``(clip_id, stage, chunk_index)`` in clip_id order."""
    entries = {}
    for record in sorted(records, key=lambda r: r.clip_id):
        entries.update(embed_split(backend, load_split(record), record.clip_id))
    return entries


def pool_features(records: Sequence[ClipRecord], entries: Mapping, pooling: "PoolMode | str") -> dict[str, FeatureRecord]:
    """Pool each clip's run and kick chunks into one ``FeatureRecord``."""
    pooling = PoolMode.parse(pooling)
    out = {}
    for r in records:
        sets = stage_sets(entries, r.clip_id)
        out[r.clip_id] = FeatureRecord(
            t_run=pool_chunks(sets[StageTag.RUN], pooling).vector,
            t_kick=pool_chunks(sets[StageTag.KICK], pooling).vector,
            gamma=r.gamma,
            label=r.class_index,
            clip_id=r.clip_id,
        )
    return out
