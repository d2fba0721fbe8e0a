"""Projection of instance detections into per-category / per-attribute score planes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import RleMask, decode, resize_bitmap

MAX_DETECTIONS = 100
MAX_ATTRIBUTES = 20


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionRecord:
    category_index: int
    score: float
    mask: RleMask
    attributes: tuple[tuple[int, float], ...] = ()
    instance_id: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ChannelError(f"detection score {self.score} outside [0, 1]")
        for _, s in self.attributes:
            if not 0.0 <= s <= 1.0:
                raise ChannelError(f"attribute score {s} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "category_index": self.category_index,
            "score": self.score,
            "rle": self.mask.to_json(),
            "attributes": [[i, s] for i, s in self.attributes],
        }

    @classmethod
    def from_json(cls, obj: dict, instance_id: int | None = None) -> "DetectionRecord":
        return cls(
            int(obj["category_index"]),
            float(obj["score"]),
            RleMask.from_json(obj["rle"]),
            tuple((int(i), float(s)) for i, s in obj.get("attributes", [])),
            instance_id,
        )


def top_detections(detections: Sequence[DetectionRecord], limit: int = MAX_DETECTIONS) -> list[DetectionRecord]:
    """Highest-scoring ``limit`` detections (stable on ties)."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    return [detections[i] for i in order[:limit]]


def build_channels(
    detections: Sequence[DetectionRecord], n_categories: int, height: int, width: int
) -> np.ndarray:
    """``C[c_i, m_i] = max(s_i, C[c_i, m_i])`` over the top detections."""
    stack = np.zeros((n_categories, height, width))
    for det in top_detections(detections):
        c = det.category_index
        if not 0 <= c < n_categories:
            raise ChannelError(f"category index {c} out of range [0, {n_categories})")
        m = _mask_bitmap(det.mask, height, width)
        np.maximum(stack[c], np.where(m, det.score, 0.0), out=stack[c])
    return stack


def build_attribute_channels(
    detections: Sequence[DetectionRecord], n_attributes: int, height: int, width: int
) -> np.ndarray:
    """Same max-projection over each detection's top attribute scores."""
    stack = np.zeros((n_attributes, height, width))
    for det in top_detections(detections):
        m = None
        attrs = sorted(det.attributes, key=lambda a: -a[1])[:MAX_ATTRIBUTES]
        for idx, score in attrs:
            if not 0 <= idx < n_attributes:
                raise ChannelError(f"attribute index {idx} out of range [0, {n_attributes})")
            if m is None:
                m = _mask_bitmap(det.mask, height, width)
            np.maximum(stack[idx], np.where(m, score, 0.0), out=stack[idx])
    return stack


def _mask_bitmap(mask: RleMask, height: int, width: int) -> np.ndarray:
    bm = decode(mask)
    if (mask.height, mask.width) != (height, width):
        # detections live at image resolution; channels are coarser
        bm = resize_bitmap(bm, height, width)
    return bm


def load_detections(path: str | Path) -> dict:
    """``image_id -> list[DetectionRecord]`` from a JSON Lines detections file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "image_id" not in rec:
                raise ChannelError(f"line {lineno}: missing field 'image_id'")
            dets = [DetectionRecord.from_json(d, k) for k, d in enumerate(rec.get("detections", []))]
            out[rec["image_id"]] = dets
    return out
