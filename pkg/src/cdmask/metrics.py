"""Confusion counting and change-class metrics (precision, recall, F1, IoU, OA)."""
from dataclasses import asdict, dataclass

import numpy as np

from . import ops

METRIC_NAMES = ("F1", "Pre", "Rec", "IoU", "OA")


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def _as_binary(x, name):
    a = np.asarray(x.detach().cpu() if hasattr(x, "detach") else x)
    if a.dtype == bool:
        return a.astype(np.uint8)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be a binary (0/1) map")
    return a.astype(np.uint8)


def accumulate(pred, gt, counts: ConfusionCounts = None) -> ConfusionCounts:
    """Add the per-pixel outcomes of one (or a batch of) prediction(s)."""
    counts = counts or ConfusionCounts()
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"pred and gt shapes differ: {p.shape} vs {g.shape}")
    tp, fp, fn, tn = ops.confusion_counts(p, g)
    return counts + ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def compute(counts: ConfusionCounts) -> dict:
    """Metrics of the change class as fractions in ``[0, 1]``.

    When neither prediction nor ground truth contains a positive pixel,
    precision, recall, F1 and IoU are all 1 (a correct "no change" verdict).
    Otherwise an empty denominator makes the affected metric 0.
    """
    if counts.total <= 0:
        raise ValueError("cannot compute metrics over zero pixels")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    oa = (tp + tn) / counts.total
    if tp + fp == 0 and tp + fn == 0:
        return {"F1": 1.0, "Pre": 1.0, "Rec": 1.0, "IoU": 1.0, "OA": oa}
    pre = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * pre * rec / (pre + rec) if pre + rec else 0.0
    iou = tp / (tp + fp + fn)
    return {"F1": f1, "Pre": pre, "Rec": rec, "IoU": iou, "OA": oa}


def format_report(metrics: dict, counts: ConfusionCounts = None) -> str:
    """``key: value`` lines, metrics as percentages with two decimals."""
    lines = [f"{name}: {100 * metrics[name]:.2f}" for name in METRIC_NAMES]
    if counts is not None:
        lines += [f"{k.upper()}: {v}" for k, v in asdict(counts).items()]
    return "\n".join(lines) + "\n"
