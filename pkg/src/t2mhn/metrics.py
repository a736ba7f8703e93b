"""Accuracy aggregation, harmonic mean and area under the precision-recall curve."""
from __future__ import annotations

import math

import numpy as np


def harmonic_mean(seen: float, unseen: float) -> float:
    """Generalized zero-shot harmonic mean ``2ab / (a + b)``; 0 when both are 0."""
    if seen < 0 or unseen < 0:
        raise ValueError(f"accuracies must be non-negative, got {seen}, {unseen}")
    total = seen + unseen
    if total == 0:
        return 0.0
    return 2.0 * seen * unseen / total


def mean_and_sem(values) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(n)); SEM is 0 for a single value.

    Uses correctly rounded sums, so the result does not depend on the order
    of ``values``.
    """
    v = [float(x) for x in values]
    n = len(v)
    if n == 0:
        raise ValueError("no values to aggregate")
    mean = math.fsum(v) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((x - mean) ** 2 for x in v) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve, step-wise (no interpolation).

    Thresholds sweep the distinct scores from high to low; tied scores enter
    together. Each step adds ``delta_recall * precision``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    seen = np.flatnonzero(last_of_group) + 1
    precision = tp / seen
    gained = np.diff(np.r_[0, tp])
    return float(np.sum(gained * precision) / n_pos)
