"""Annotator verification against VG boxes, trust thresholds and de-duplication."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import BoundingBox, ImageSize, PolygonRegion, RleMask, decode, rasterize_bitmap
from .seeding import stage_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QcParams:
    iou_coefficient: float = 0.8
    threshold_start: float = 0.95
    threshold_step: float = 0.05
    threshold_floor: float = 0.7
    min_annotations: int = 10


@dataclass(frozen=True)
class Annotation:
    task_id: str
    worker_id: str
    polygons: tuple[PolygonRegion, ...]


@dataclass
class WorkerRecord:
    worker_id: str
    annotations: list[tuple[str, Sequence[PolygonRegion]]] = field(default_factory=list)
    agreement_scores: list[float] = field(default_factory=list)


def agreement_counts(ann: np.ndarray, vg_boxes: Sequence[BoundingBox]) -> tuple[int, int, int]:
    """(polygon area, intersection, union) against the union of the VG boxes."""
    ref = np.zeros_like(ann, dtype=bool)
    h, w = ann.shape
    size = ImageSize(w, h)
    for b in vg_boxes:
        c = b.clamp(size)
        ref[c.y : c.y2, c.x : c.x2] = True
    s_poly = int(np.count_nonzero(ann))
    inter = int(np.count_nonzero(ann & ref))
    union = s_poly + int(np.count_nonzero(ref)) - inter
    return s_poly, inter, union


def agreement(ann: RleMask | np.ndarray, vg_boxes: Sequence[BoundingBox], params: QcParams = QcParams()) -> float:
    """IoP + 0.8 * IoU of an annotation mask against the union of the task's VG boxes."""
    bitmap = decode(ann) if isinstance(ann, RleMask) else np.asarray(ann, dtype=bool)
    s_poly, inter, union = agreement_counts(bitmap, vg_boxes)
    if s_poly == 0 or union == 0:
        return 0.0
    return inter / s_poly + params.iou_coefficient * (inter / union)


def polygons_bitmap(polygons: Sequence[PolygonRegion], width: int, height: int) -> np.ndarray:
    """Pixel union of several polygons, each rasterized on its own."""
    acc = np.zeros((height, width), dtype=bool)
    for p in polygons:
        acc |= rasterize_bitmap(p)
    return acc


def worker_threshold(n_annotations: int, params: QcParams = QcParams()) -> float:
    return max(params.threshold_floor, params.threshold_start - params.threshold_step * n_annotations)


@dataclass(frozen=True)
class WorkerVerdict:
    worker_id: str
    n_annotations: int
    mean_agreement: float | None
    threshold: float
    trusted: bool
    ignored: bool

    def to_json(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "n_annotations": self.n_annotations,
            "mean_agreement": self.mean_agreement,
            "threshold": self.threshold,
            "trusted": self.trusted,
            "ignored": self.ignored,
        }


@dataclass(frozen=True)
class TrustReport:
    workers: tuple[WorkerVerdict, ...]
    kept: int
    removed: int
    ignored: int

    @property
    def trusted_workers(self) -> frozenset[str]:
        return frozenset(w.worker_id for w in self.workers if w.trusted)

    def to_json(self) -> dict:
        return {
            "workers": [w.to_json() for w in self.workers],
            "n_workers": len(self.workers),
            "n_trusted": sum(w.trusted for w in self.workers),
            "annotations_kept": self.kept,
            "annotations_removed": self.removed,
            "annotations_ignored": self.ignored,
        }


def verify_workers(records: Sequence[WorkerRecord], params: QcParams = QcParams()) -> TrustReport:
    """Workers under ``min_annotations`` are ignored; others are trusted iff mean >= threshold."""
    verdicts = []
    kept = removed = ignored = 0
    for rec in records:
        n = len(rec.agreement_scores)
        thresh = worker_threshold(n, params)
        mean = float(np.mean(rec.agreement_scores)) if n else None
        if n < params.min_annotations:
            verdicts.append(WorkerVerdict(rec.worker_id, n, mean, thresh, False, True))
            ignored += n
            continue
        trusted = mean >= thresh
        verdicts.append(WorkerVerdict(rec.worker_id, n, mean, thresh, trusted, False))
        if trusted:
            kept += n
        else:
            removed += n
    return TrustReport(tuple(verdicts), kept, removed, ignored)


def choose_one(candidates: Sequence, rng: np.random.Generator):
    return candidates[int(rng.integers(len(candidates)))]


def dedup(per_task: Mapping[str, Sequence], global_seed: int) -> tuple[dict, int]:
    """One uniformly chosen annotation per task; tasks with none are dropped and counted."""
    chosen = {}
    dropped = 0
    for task_id in sorted(per_task, key=str):
        cands = per_task[task_id]
        if not cands:
            dropped += 1
            continue
        chosen[task_id] = choose_one(cands, stage_rng(global_seed, "dedup", task_id))
    if dropped:
        log.info("dedup: dropped %d task(s) without surviving annotations", dropped)
    return chosen, dropped
