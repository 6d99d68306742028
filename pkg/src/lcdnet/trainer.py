"""Training loop: dual-head BCE loss, AdamW, per-epoch validation and
best-IoU checkpointing."""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import normalize_images
from .core import backward, no_grad, reset_tape
from .core.ops import bce_with_logits
from .core.tensor import NonFiniteError
from .data import AugmentConfig, SamplePair, augment, stack_pairs
from .metrics import ConfusionCounts, MetricSet, accumulate, compute_metrics
from .model import LcdNet, logits_to_mask, save_checkpoint

__all__ = ["bce_with_logits", "OptimState", "step", "TrainConfig", "TrainLog", "EpochRecord",
           "TrainingError", "fit", "train_step", "evaluate", "LOG_FIELDS"]

LOG_FIELDS = ["epoch", "train_loss", "pc", "rc", "f1", "oa", "kappa", "iou", "seconds"]


class TrainingError(RuntimeError):
    pass


# -- optimizer -------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 5e-4
    weight_decay: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def step(params: Sequence[Tuple[str, object]], state: OptimState) -> None:
    """One AdamW update over ``(name, Parameter)`` pairs, in place.

    Weight decay is decoupled (``theta -= lr * wd * theta`` before the Adam
    move) and skipped for parameters whose ``decay`` flag is off.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {name} has no gradient")
        if p.grad.shape != p.data.shape:
            raise TrainingError(f"gradient for {name} has shape {p.grad.shape}, expected {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if getattr(p, "decay", True) and state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)


# -- loop --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 2.5e-3
    seed: int = 0
    threshold: float = 0.5
    augment: Optional[AugmentConfig] = None
    out_dir: Optional[str] = None
    checkpoint_name: str = "best.lcdn"
    log_name: str = "train_log.csv"
    verbose: bool = False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    metrics: MetricSet
    seconds: float


@dataclass
class TrainLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_iou: float = -math.inf
    best_epoch: Optional[int] = None
    checkpoint: Optional[str] = None
    wall_time: float = 0.0

    def csv_rows(self):
        for r in self.epochs:
            m = r.metrics
            yield [r.epoch, f"{r.train_loss:.6f}"] + [
                "undefined" if v is None else f"{v:.6f}"
                for v in (m.pc, m.rc, m.f1, m.oa, m.kappa_standard, m.iou)] + [f"{r.seconds:.3f}"]


def _inputs(pairs: Sequence[SamplePair]):
    t1, t2, y = stack_pairs(pairs)
    return normalize_images(t1), normalize_images(t2), y


def train_step(model: LcdNet, state: OptimState, t1, t2, y) -> float:
    """Forward both heads, sum their losses, backpropagate and update."""
    reset_tape()
    model.zero_grad()
    logits0, logits1 = model(t1, t2)
    loss = bce_with_logits(logits0, y) + bce_with_logits(logits1, y)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NonFiniteError(f"loss is {value}")
    backward(loss)
    step(model.named_parameters(), state)
    return value


def evaluate(model: LcdNet, pairs: Sequence[SamplePair], batch_size: int = 8,
             threshold: float = 0.5) -> Tuple[ConfusionCounts, List[np.ndarray]]:
    """Confusion counts over ``pairs`` and the per-pair (H, W) predicted masks."""
    was_training = model.training
    model.eval()
    counts = ConfusionCounts()
    masks = []
    try:
        with no_grad():
            for i in range(0, len(pairs), batch_size):
                chunk = pairs[i:i + batch_size]
                t1, t2, y = _inputs(chunk)
                reset_tape()
                logits0, _ = model(t1, t2)
                pred = logits_to_mask(logits0.data, threshold)
                counts = counts + accumulate(pred, y.astype(np.uint8))
                masks.extend(pred[:, 0])
    finally:
        model.train(was_training)
    return counts, masks


def _write_log(path: str, log: TrainLog) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        w.writerows(log.csv_rows())


def fit(model: LcdNet, train_data: Sequence[SamplePair], val_data: Sequence[SamplePair],
        epochs: Optional[int] = None, config: TrainConfig = TrainConfig(),
        state: Optional[OptimState] = None) -> TrainLog:
    """Train ``model`` in place; returns the per-epoch log.

    A checkpoint is written whenever validation IoU strictly exceeds the best
    so far (requires ``config.out_dir``).
    """
    epochs = config.epochs if epochs is None else epochs
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    log = TrainLog()
    if epochs == 0:
        return log
    if not train_data or not val_data:
        raise ValueError("training and validation sets must be non-empty")
    state = state if state is not None else OptimState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    out_dir = config.out_dir
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if config.augment is None:
        base = _inputs(train_data)
    start = time.perf_counter()
    model.train()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_data))
        losses = []
        for b, i in enumerate(range(0, len(order), config.batch_size)):
            idx = order[i:i + config.batch_size]
            if config.augment is None:
                t1, t2, y = (a[idx] for a in base)
            else:
                t1, t2, y = _inputs([augment(train_data[j], config.augment, rng) for j in idx])
            try:
                losses.append(train_step(model, state, t1, t2, y))
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
        counts, _ = evaluate(model, val_data, config.batch_size, config.threshold)
        metrics = compute_metrics(counts)
        rec = EpochRecord(epoch, float(np.mean(losses)), metrics, time.perf_counter() - t0)
        log.epochs.append(rec)
        if metrics.iou is not None and metrics.iou > log.best_iou:
            log.best_iou, log.best_epoch = metrics.iou, epoch
            if out_dir is not None:
                log.checkpoint = os.path.join(out_dir, config.checkpoint_name)
                save_checkpoint(model, log.checkpoint, epoch=epoch, best_iou=repr(metrics.iou))
        if out_dir is not None:
            _write_log(os.path.join(out_dir, config.log_name), log)
        if config.verbose:
            print(f"epoch {epoch:3d}  loss {rec.train_loss:.4f}  f1 {metrics.f1}  "
                  f"iou {metrics.iou}  {rec.seconds:.1f}s", flush=True)
    log.wall_time = time.perf_counter() - start
    return log
