"""SRCC, PLCC, element accuracy and the weighted overall score."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, NumericError

SRCC_WEIGHT = 0.25
PLCC_WEIGHT = 0.25
ACC_WEIGHT = 0.5
DEFAULT_THRESHOLD = 0.5


def _pair(x, y, min_len=2):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise InputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise InputError(f"need at least {min_len} values, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NumericError("non-finite input")
    return x, y


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise InputError("correlation undefined for a constant vector")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def plcc(x, y) -> float:
    x, y = _pair(x, y)
    return _pearson(x, y)


def srcc(x, y) -> float:
    x, y = _pair(x, y)
    return _pearson(fractional_ranks(x), fractional_ranks(y))


def accuracy(preds, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Share of positions where ``pred >= threshold`` agrees with ``label >= threshold``."""
    p, lab = _pair(preds, labels, min_len=1)
    return float(np.mean((p >= threshold) == (lab >= threshold)))


def per_image_accuracy(preds_by_image, labels_by_image,
                       threshold: float = DEFAULT_THRESHOLD) -> float:
    """Mean over images of each image's element accuracy (instance-level is :func:`accuracy`)."""
    if len(preds_by_image) != len(labels_by_image):
        raise InputError("image count mismatch")
    accs = [accuracy(p, lab, threshold)
            for p, lab in zip(preds_by_image, labels_by_image) if len(p)]
    if not accs:
        raise InputError("no elements to score")
    return float(np.mean(accs))


def composite(s: float, p: float, a: float) -> float:
    if not all(math.isfinite(v) for v in (s, p, a)):
        raise NumericError("composite inputs must be finite")
    return SRCC_WEIGHT * s + PLCC_WEIGHT * p + ACC_WEIGHT * a


@dataclass(frozen=True)
class MetricReport:
    srcc: float
    plcc: float
    acc: float
    overall: float

    @classmethod
    def from_parts(cls, s: float, p: float, a: float) -> "MetricReport":
        return cls(float(s), float(p), float(a), composite(s, p, a))

    def is_consistent(self, tol: float = 1e-12) -> bool:
        return abs(composite(self.srcc, self.plcc, self.acc) - self.overall) <= tol

    def to_json(self) -> str:
        """Fixed field order, 6-decimal values."""
        body = ", ".join(f'"{k}": {v:.6f}' for k, v in asdict(self).items())
        return "{" + body + "}"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(d["srcc"], d["plcc"], d["acc"], d["overall"])


def evaluate(total_pred, total_true, elem_pred, elem_true,
             threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    return MetricReport.from_parts(
        srcc(total_pred, total_true),
        plcc(total_pred, total_true),
        accuracy(elem_pred, elem_true, threshold),
    )
