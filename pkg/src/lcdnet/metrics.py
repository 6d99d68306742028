"""Confusion counts, change-detection scores and confusion-map rendering.

All scores refer to the "changed" class. A score whose denominator is zero
is undefined and comes back as ``None`` (never a silent 0/0).
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

LABEL_THRESHOLD = 127

TP_COLOR = (255, 255, 255)
FP_COLOR = (255, 0, 0)
TN_COLOR = (0, 0, 0)
FN_COLOR = (0, 255, 255)

CSV_FIELDS = ["dataset", "split", "pc", "rc", "f1", "oa", "kappa", "iou"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "tn", "fn"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a non-negative integer, got {v}")
            object.__setattr__(self, k, int(v))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def merge(cls, parts: Iterable["ConfusionCounts"]) -> "ConfusionCounts":
        out = cls()
        for p in parts:
            out = out + p
        return out


@dataclass(frozen=True)
class MetricSet:
    pc: Optional[float]
    rc: Optional[float]
    f1: Optional[float]
    oa: Optional[float]
    kappa_standard: Optional[float]
    kappa_literal: Optional[float]
    iou: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def undefined(self) -> tuple:
        return tuple(k for k, v in asdict(self).items() if v is None)


def binarize_label(label: np.ndarray) -> np.ndarray:
    """8-bit label image to {0, 1}: values above 127 mean change."""
    label = np.asarray(label)
    return (label > LABEL_THRESHOLD).astype(np.uint8)


def _check_masks(pred, label):
    pred, label = np.asarray(pred), np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    for name, m in (("prediction", pred), ("label", label)):
        if m.dtype == bool:
            continue
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (0 or 1)")
    return pred.astype(bool), label.astype(bool)


def accumulate(pred_mask, label_mask) -> ConfusionCounts:
    p, y = _check_masks(pred_mask, label_mask)
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


def compute_metrics(counts: ConfusionCounts) -> MetricSet:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    n = counts.total
    if n == 0:
        raise ValueError("no pixels were evaluated")
    pc = _ratio(tp, tp + fp)
    rc = _ratio(tp, tp + fn)
    # 2TP / (2TP + FP + FN) equals the harmonic mean of pc and rc whenever both exist
    f1 = _ratio(2 * tp, 2 * tp + fp + fn) if pc is not None and rc is not None else None
    oa = (tp + tn) / n
    iou = _ratio(tp, tp + fp + fn)
    pe = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / (n * n)
    kappa_standard = _ratio(oa - pe, 1 - pe)
    kappa_literal = _ratio(oa - pc, tp + fp) if pc is not None else None
    return MetricSet(pc, rc, f1, oa, kappa_standard, kappa_literal, iou)


def iou_from_f1(f1: float) -> float:
    """Change-class IoU implied by an F1 score."""
    return f1 / (2.0 - f1)


def render_confusion_map(pred_mask, label_mask) -> np.ndarray:
    """(H, W, 3) uint8: TP white, FP red, TN black, FN cyan."""
    p, y = _check_masks(pred_mask, label_mask)
    if p.ndim != 2:
        raise ValueError(f"confusion maps need 2-D masks, got shape {p.shape}")
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & y] = TP_COLOR
    img[p & ~y] = FP_COLOR
    img[~p & y] = FN_COLOR
    return img


def save_confusion_png(pred_mask, label_mask, path) -> None:
    from PIL import Image

    Image.fromarray(render_confusion_map(pred_mask, label_mask), mode="RGB").save(os.fspath(path))


def _fmt(v: Optional[float]) -> str:
    return "undefined" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def metrics_csv(rows) -> str:
    """``rows`` holds (dataset, split, MetricSet) triples; kappa is Cohen's."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for dataset, split, m in rows:
        w.writerow([dataset, split, _fmt(m.pc), _fmt(m.rc), _fmt(m.f1), _fmt(m.oa),
                    _fmt(m.kappa_standard), _fmt(m.iou)])
    return buf.getvalue()


def write_metrics_csv(path, rows) -> None:
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(rows))
