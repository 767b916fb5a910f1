"""Accumulated IoU metrics for binary few-shot segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` pixel counts for binary masks."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def _iou(tp: int, fp: int, fn: int) -> float:
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


@dataclass
class MetricsReport:
    class_iou: dict[int, float]
    miou: float
    fb_iou: float
    episodes: int
    seed: int

    def row(self) -> dict:
        out = {"miou": self.miou, "fb_iou": self.fb_iou, "episodes": self.episodes, "seed": self.seed}
        out.update({f"iou_class{c}": v for c, v in sorted(self.class_iou.items())})
        return out


@dataclass
class IoUAccumulator:
    """Sums TP/FP/FN per class (and class-agnostic FG/BG) before dividing.

    Integer sums make the result independent of episode order.
    """

    counts: dict[int, np.ndarray] = field(default_factory=dict)
    totals: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    episodes: int = 0

    def add(self, class_id: int, pred: np.ndarray, gt: np.ndarray) -> None:
        c = np.array(confusion(pred, gt), dtype=np.int64)
        self.counts.setdefault(class_id, np.zeros(4, dtype=np.int64))
        self.counts[class_id] += c
        self.totals += c
        self.episodes += 1

    def report(self, seed: int = 0) -> MetricsReport:
        per_class = {cls: _iou(*c[:3]) for cls, c in sorted(self.counts.items())}
        miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
        tp, fp, fn, tn = (int(v) for v in self.totals)
        fg = _iou(tp, fp, fn)
        bg = _iou(tn, fn, fp)  # background: predicted-bg & gt-bg, etc.
        return MetricsReport(per_class, miou, (fg + bg) / 2, self.episodes, seed)
