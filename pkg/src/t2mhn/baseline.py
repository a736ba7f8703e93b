"""Fixed-representation baseline: a ridge map between descriptor and feature space.

Classes are recognised by the nearest projected anchor under cosine
similarity. ``text->visual`` maps descriptors into feature space (DEM style);
``visual->text`` maps features into descriptor space (DeViSE style). Both use
a linear ridge map in place of a deep one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import MAX_EVAL_TASKS, MetricsReport, run_protocol
from .episodes import ClassPool

DIRECTIONS = ("text->visual", "visual->text")


class SingularSystemError(np.linalg.LinAlgError):
    pass


def ridge_fit(X, Y, lam: float) -> np.ndarray:
    """``argmin_V |X V - Y|^2 + lam |V|^2`` solved as an augmented least-squares problem."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if lam < 0:
        raise ValueError("ridge lambda must be non-negative")
    d = X.shape[1]
    if lam == 0 and np.linalg.matrix_rank(X) < d:
        raise SingularSystemError(
            f"normal equations are singular (rank {np.linalg.matrix_rank(X)} < {d}); use lambda > 0"
        )
    Xa = np.vstack([X, np.sqrt(lam) * np.eye(d)])
    Ya = np.vstack([Y, np.zeros((d, Y.shape[1]))])
    V, *_ = np.linalg.lstsq(Xa, Ya, rcond=None)
    return V


def cosine_predict(queries, anchors) -> np.ndarray:
    """Index of the most cosine-similar anchor; zero vectors score 0, ties go low."""
    q = np.asarray(queries, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    an = np.linalg.norm(a, axis=1, keepdims=True)
    qs = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
    as_ = np.divide(a, an, out=np.zeros_like(a), where=an > 0)
    return np.argmax(qs @ as_.T, axis=1)


@dataclass
class FixedRepClassifier:
    direction: str
    mapping: np.ndarray  # text->visual: e x m; visual->text: m x e

    def predictor(self, descriptors):
        if self.direction == "text->visual":
            anchors = np.asarray(descriptors) @ self.mapping
            return lambda X: cosine_predict(X, anchors)
        return lambda X: cosine_predict(np.asarray(X) @ self.mapping, descriptors)


def fit_fixed_rep(pool: ClassPool, direction: str = "text->visual", lam: float = 1.0) -> FixedRepClassifier:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    seen = pool.partition.seen
    S = np.stack([pool.descriptors[c][0] for c in seen])
    V = np.stack([pool.rows(c, "train").mean(axis=0) for c in seen])
    if direction == "text->visual":
        return FixedRepClassifier(direction, ridge_fit(S, V, lam))
    return FixedRepClassifier(direction, ridge_fit(V, S, lam))


def baseline_fixed_rep(pool: ClassPool, direction: str = "text->visual", lam: float = 1.0,
                       k: int = 2, splits=("seen", "unseen"), threads: int = 1,
                       max_tasks: int = MAX_EVAL_TASKS) -> tuple[FixedRepClassifier, MetricsReport]:
    """Fit on seen classes, then evaluate under the same task protocol as the hypernetwork."""
    clf = fit_fixed_rep(pool, direction, lam)
    results = {s: run_protocol(pool, k, s, clf.predictor, max_tasks, threads) for s in splits}
    meta = {"model": "fixed_rep", "direction": direction, "ridge_lambda": lam, "k": k}
    return clf, MetricsReport(results.get("seen"), results.get("unseen"), meta)
