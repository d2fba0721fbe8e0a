"""Two-stage training (per-module pretraining, then joint fine-tuning) and threshold selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from ..evaluation import summarize
from ..seeding import stage_rng
from .network import LOSS_TERMS, ModelConfig, Params, Sample, batch_loss, forward, init_params

log = logging.getLogger(__name__)

THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    pretrain_epochs: int = 5
    joint_epochs: int = 20
    grad_clip: float = 0.0  # 0 disables global-norm clipping
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)


class SGD:
    """Plain SGD with (heavy-ball) momentum over a subset of parameter names."""

    def __init__(self, params: Params, names: Sequence[str], lr: float, momentum: float):
        self.params = params
        self.names = list(names)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(params[k]) for k in self.names}

    def step(self, grads: Params) -> None:
        for k in self.names:
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            self.params[k] -= self.lr * v


def _clip(grads: Params, names: Sequence[str], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = math.sqrt(math.fsum(float(np.sum(grads[k] ** 2)) for k in names))
    if norm > max_norm:
        scale = max_norm / norm
        for k in names:
            grads[k] *= scale


def run_stage(
    samples: Sequence[Sample],
    params: Params,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    names: Sequence[str],
    terms: tuple[str, ...],
    epochs: int,
    stage: str,
    dropout: bool = True,
    jobs: int = 1,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Minibatch SGD over ``names`` only; returns the per-step batch losses."""
    if not samples or epochs <= 0:
        return []
    opt = SGD(params, names, tcfg.learning_rate, tcfg.momentum)
    order_rng = stage_rng(tcfg.seed, f"order:{stage}")
    losses = []
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(samples))
        for start in range(0, len(samples), tcfg.batch_size):
            batch = [samples[i] for i in order[start : start + tcfg.batch_size]]
            rngs = None
            if dropout and cfg.dropout > 0:
                rngs = [stage_rng(tcfg.seed, f"dropout:{stage}:{step}", s.task_id) for s in batch]
            loss, grads = batch_loss(batch, params, cfg, terms, rngs, jobs=jobs)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"stage {stage!r}, epoch {epoch}, step {step}: loss is {loss}")
            _clip(grads, names, tcfg.grad_clip)
            opt.step(grads)
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss)
            step += 1
        log.info("stage %s epoch %d loss %.5f", stage, epoch, losses[-1])
    return losses


def _names(params: Params, *prefixes: str) -> list[str]:
    return [k for k in params if k.split(".")[0] in prefixes]


def train(
    samples: Sequence[Sample],
    cfg: ModelConfig,
    tcfg: TrainConfig = TrainConfig(),
    params: Params | None = None,
    jobs: int = 1,
) -> tuple[Params, dict]:
    """Pretrain the category and attribute branches separately, then fine-tune everything.

    Returns the parameters and a history dict of per-step losses per stage.
    """
    if not samples:
        raise ValueError("training set is empty")
    params = init_params(cfg) if params is None else {k: v.copy() for k, v in params.items()}
    history = {}
    history["cat"] = run_stage(
        samples, params, cfg, tcfg, _names(params, "cat"), ("cat",), tcfg.pretrain_epochs, "cat", jobs=jobs
    )
    if "att" in cfg.modules:
        with_att = [s for s in samples if s.embedding.has_att]
        history["att"] = run_stage(
            with_att, params, cfg, tcfg, _names(params, "att"), ("att",), tcfg.pretrain_epochs, "att", jobs=jobs
        )
    joint = _names(params, *cfg.modules, "ens")
    history["joint"] = run_stage(samples, params, cfg, tcfg, joint, LOSS_TERMS, tcfg.joint_epochs, "joint", jobs=jobs)
    return params, history


# ---------------------------------------------------------------- thresholding


def _mean_iou_at(scores: Sequence[np.ndarray], gts: Sequence[np.ndarray], threshold: float) -> float:
    from ..evaluation import PairStat

    stats = []
    for k, (s, g) in enumerate(zip(scores, gts)):
        pred = s >= threshold
        inter = int(np.count_nonzero(pred & g))
        stats.append(PairStat(str(k), inter, int(np.count_nonzero(pred)) + int(np.count_nonzero(g)) - inter))
    return summarize(stats).mean_iou


def select_threshold(
    scores: Sequence[np.ndarray], gts: Sequence[np.ndarray], grid: Sequence[float] = THRESHOLD_GRID
) -> tuple[float, float]:
    """Grid threshold maximizing validation mean-IoU (ties to the lower threshold).

    Returns ``(threshold, mean_iou)``.
    """
    if not scores:
        raise ValueError("validation set is empty")
    best_t, best = None, -1.0
    for t in grid:
        m = _mean_iou_at(scores, gts, t)
        if m > best:
            best_t, best = t, m
    return best_t, best


def predict_scores(samples: Sequence[Sample], params: Params, cfg: ModelConfig) -> list[np.ndarray]:
    return [forward(s, params, cfg).O for s in samples]


def mean_iou(samples: Sequence[Sample], params: Params, cfg: ModelConfig, threshold: float) -> float:
    return _mean_iou_at(predict_scores(samples, params, cfg), [s.gt for s in samples], threshold)
