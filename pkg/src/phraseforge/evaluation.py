"""Phrase-region evaluation: mean-IoU, cum-IoU and Pr@k, overall and per subset.

Intersections and unions are accumulated as exact integers; Pr@k compares
``I >= k * U`` in rational arithmetic so threshold boundaries are exact.
mean-IoU is summed with ``math.fsum`` (correctly rounded, hence independent of
task order).
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .builder import ALL_TAGS, PhraseTask
from .geometry import RleMask, decode
from .scene_graph import CategoryVocabulary

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.7, 0.9)
EMPTY_PAIR_CONVENTION = "empty prediction vs empty ground truth scores IoU 1"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    task_id: str
    mask: RleMask

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "rle": self.mask.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> "PredictionRecord":
        return cls(str(obj["task_id"]), RleMask.from_json(obj["rle"]))


@dataclass(frozen=True)
class PairStat:
    task_id: str
    intersection: int
    union: int

    @property
    def empty(self) -> bool:
        return self.union == 0

    @property
    def iou(self) -> float:
        return 1.0 if self.union == 0 else self.intersection / self.union

    def meets(self, threshold: float) -> bool:
        if self.union == 0:
            return True
        return Fraction(self.intersection, self.union) >= Fraction(str(threshold))


@dataclass
class EvalReport:
    n_pairs: int
    mean_iou: float | None
    cum_iou: float | None
    pr: dict[str, float | None]
    total_intersection: int = 0
    total_union: int = 0
    n_empty_pairs: int = 0
    subsets: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "n_pairs": self.n_pairs,
            "mean_iou": self.mean_iou,
            "cum_iou": self.cum_iou,
            "pr": dict(self.pr),
            "total_intersection": self.total_intersection,
            "total_union": self.total_union,
            "n_empty_pairs": self.n_empty_pairs,
        }
        if self.subsets:
            out["subsets"] = {k: v.to_json() for k, v in self.subsets.items()}
        return out


def _pr_key(t: float) -> str:
    return f"{t:g}"


def pair_stat(task_id: str, gt: RleMask, pred: RleMask) -> PairStat:
    if (gt.width, gt.height) != (pred.width, pred.height):
        raise EvalError(
            f"task {task_id!r}: prediction is {pred.width}x{pred.height}, ground truth {gt.width}x{gt.height}"
        )
    inter = int(np.count_nonzero(decode(gt) & decode(pred)))
    return PairStat(task_id, inter, gt.area + pred.area - inter)


def summarize(stats: Sequence[PairStat], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    n = len(stats)
    if n == 0:
        return EvalReport(0, None, None, {_pr_key(t): None for t in thresholds})
    total_i = sum(s.intersection for s in stats)
    total_u = sum(s.union for s in stats)
    mean = math.fsum(s.iou for s in stats) / n
    cum = total_i / total_u if total_u else 0.0
    pr = {_pr_key(t): sum(s.meets(t) for s in stats) / n for t in thresholds}
    return EvalReport(n, mean, cum, pr, total_i, total_u, sum(s.empty for s in stats))


def _index_predictions(tasks: Sequence[PhraseTask], predictions: Iterable[PredictionRecord]) -> dict[str, RleMask]:
    preds: dict[str, RleMask] = {}
    for p in predictions:
        if p.task_id in preds:
            raise EvalError(f"duplicate prediction for task {p.task_id!r}")
        preds[p.task_id] = p.mask
    seen = set()
    for t in tasks:
        if t.task_id in seen:
            raise EvalError(f"duplicate task {t.task_id!r}")
        seen.add(t.task_id)
        if t.task_id not in preds:
            raise EvalError(f"missing prediction for task {t.task_id!r}")
    extra = set(preds) - seen
    if extra:
        raise EvalError(f"prediction for unknown task {sorted(extra)[0]!r}")
    return preds


def pair_stats(
    tasks: Sequence[PhraseTask], predictions: Iterable[PredictionRecord], jobs: int = 1
) -> list[PairStat]:
    preds = _index_predictions(tasks, predictions)

    def one(t: PhraseTask) -> PairStat:
        return pair_stat(t.task_id, t.gt_mask(), preds[t.task_id])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, tasks))
    return [one(t) for t in tasks]


def evaluate(
    tasks: Sequence[PhraseTask],
    predictions: Iterable[PredictionRecord],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    jobs: int = 1,
) -> EvalReport:
    return summarize(pair_stats(tasks, predictions, jobs), thresholds)


def evaluate_by_subset(
    tasks: Sequence[PhraseTask],
    predictions: Iterable[PredictionRecord],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    jobs: int = 1,
    known_tags: Sequence[str] = ALL_TAGS,
) -> EvalReport:
    stats = pair_stats(tasks, predictions, jobs)
    report = summarize(stats, thresholds)
    unknown: Counter[str] = Counter()
    buckets: dict[str, list[PairStat]] = {tag: [] for tag in known_tags}
    for t, s in zip(tasks, stats):
        for tag in sorted(t.subset_tags):
            if tag in buckets:
                buckets[tag].append(s)
            else:
                unknown[tag] += 1
    for tag, n in sorted(unknown.items()):
        log.warning("ignoring unknown subset tag %r on %d task(s)", tag, n)
    report.subsets = {tag: summarize(bucket, thresholds) for tag, bucket in buckets.items()}
    return report


# ---------------------------------------------------------------- substitution baseline


@dataclass(frozen=True)
class SubstitutionEntry:
    source: str
    substitute: str
    train_mean_iou: float | None
    n_tasks: int
    votes: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "substitute": self.substitute,
            "train_mean_iou": self.train_mean_iou,
            "n_tasks": self.n_tasks,
            "votes": dict(self.votes),
        }


def _bitmap_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    return 1.0 if union == 0 else inter / union


def best_substitute(
    source: str,
    tasks: Sequence[PhraseTask],
    channels: Mapping[str, np.ndarray],
    vocab: CategoryVocabulary,
    threshold: float = 0.5,
    gt_bitmaps: Mapping[str, np.ndarray] | None = None,
) -> SubstitutionEntry:
    """Category whose thresholded channel most often gives the best IoU on ``source`` phrases.

    ``channels`` maps task id to an ``(N, H, W)`` score stack indexed by
    vocabulary position; ``gt_bitmaps`` optionally supplies ground truth at
    channel resolution (otherwise the task's own masks are used).
    Per-task argmax ties and vote ties both go to the more frequent category.
    """
    relevant = [t for t in tasks if t.category == source and t.task_id in channels]
    if not relevant:
        return SubstitutionEntry(source, source, None, 0)
    order = list(range(len(vocab)))  # vocabulary order is descending frequency
    votes: Counter[int] = Counter()
    for t in relevant:
        stack = channels[t.task_id]
        gt = gt_bitmaps[t.task_id] if gt_bitmaps is not None else decode(t.gt_mask())
        best_c, best_iou = None, -1.0
        for c in order:
            iou = _bitmap_iou(stack[c] >= threshold, gt)
            if iou > best_iou:
                best_c, best_iou = c, iou
        votes[best_c] += 1
    top = max(votes.values())
    winner = min(c for c, v in votes.items() if v == top)
    ious = []
    for t in relevant:
        gt = gt_bitmaps[t.task_id] if gt_bitmaps is not None else decode(t.gt_mask())
        ious.append(_bitmap_iou(channels[t.task_id][winner] >= threshold, gt))
    return SubstitutionEntry(
        source,
        vocab.categories[winner],
        math.fsum(ious) / len(ious),
        len(relevant),
        {vocab.categories[c]: v for c, v in sorted(votes.items())},
    )
