"""Confusion counts, mIoU / F1 / OA, and hard-sample selection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies with cloud (1) as the positive class.

    Counts add, so a dataset score is the sum of per-image counts.
    """

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DomainError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionCounts":
        """Counts with the clear class treated as positive."""
        return ConfusionCounts(self.tn, self.tp, self.fn, self.fp)

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def _binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if not np.isin(arr, (0, 1)).all():
        raise DomainError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def confusion_counts(pred, label) -> ConfusionCounts:
    p, y = _binary(pred, "prediction"), _binary(label, "label")
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and label {y.shape} differ")
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _nonempty(c: ConfusionCounts) -> None:
    if c.total == 0:
        raise DomainError("metrics are undefined for zero pixels")


def _ratio(num: int, den: int) -> float:
    # a class absent from both prediction and label scores 1
    return 1.0 if den == 0 else num / den


def miou(c: ConfusionCounts) -> float:
    _nonempty(c)
    return 0.5 * (_ratio(c.tp, c.tp + c.fp + c.fn) + _ratio(c.tn, c.tn + c.fp + c.fn))


def f1(c: ConfusionCounts) -> float:
    _nonempty(c)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def oa(c: ConfusionCounts) -> float:
    _nonempty(c)
    return (c.tp + c.tn) / c.total


def report(c: ConfusionCounts, digits: int = 4) -> dict:
    """Counts plus the three scores rounded for printing."""
    return {**c.as_dict(), "miou": round(miou(c), digits), "f1": round(f1(c), digits), "oa": round(oa(c), digits)}


def hard_subset(mean_uncertainty, fraction: float = 0.10) -> list[int]:
    """Indices of the ceil(fraction * n) most uncertain images, most uncertain first.

    Ties are broken by ascending index.
    """
    scores = [float(s) for s in mean_uncertainty]
    if not scores:
        raise DomainError("no images to select from")
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    # the small slack keeps e.g. 0.1 * 30 = 3.0000000000000004 from rounding up to 4
    k = max(1, math.ceil(fraction * len(scores) - 1e-9))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]
