"""The on-demand classifier whose weights the hypernetwork emits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hypernet import ContractError, WeightBundle
from .numerics import (
    DimensionError,
    as_matrix,
    batch_softmax_cross_entropy,
    logistic_loss,
    relu_grad,
)

SPLIT_TAGS = ("train", "seen_eval", "unseen_eval")


@dataclass
class Episode:
    """One task: k descriptors (row order = label order) and a labelled batch."""

    descriptors: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    class_ids: tuple = ()
    row_tags: tuple = ()

    def __post_init__(self):
        self.descriptors = as_matrix(self.descriptors)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError("an episode needs at least one feature row")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ValueError(f"labels must lie in 0..{self.k - 1}")
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")

    @property
    def k(self) -> int:
        return self.descriptors.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]


def _forward(X: np.ndarray, W: WeightBundle):
    if W.W_pen is not None:
        if X.shape[1] != W.W_pen.shape[1]:
            raise DimensionError(f"features of width {X.shape[1]} vs W_pen{W.W_pen.shape}")
        pre = X @ W.W_pen.T
        if W.b_pen is not None:
            pre = pre + W.b_pen
        hidden = np.maximum(pre, 0.0)
    else:
        pre = None
        hidden = X
    if hidden.shape[1] != W.W_last.shape[1]:
        raise DimensionError(f"inputs of width {hidden.shape[1]} vs W_last{W.W_last.shape}")
    logits = hidden @ W.W_last.T
    if W.b_last is not None:
        logits = logits + W.b_last
    return logits, (X, pre, hidden)


def _backward(dlogits: np.ndarray, W: WeightBundle, cache) -> WeightBundle:
    X, pre, hidden = cache
    grads = WeightBundle(W_last=dlogits.T @ hidden)
    if W.b_last is not None:
        grads.b_last = dlogits.sum(axis=0)
    if W.W_pen is not None:
        dpre = (dlogits @ W.W_last) * relu_grad(pre)
        grads.W_pen = dpre.T @ X
        if W.b_pen is not None:
            grads.b_pen = dpre.sum(axis=0)
    return grads


def logits_batch(X, W: WeightBundle) -> np.ndarray:
    """Logits for every row of ``X`` (n x m)."""
    logits, _ = _forward(as_matrix(X), W)
    return logits


def classify(x, W: WeightBundle) -> np.ndarray:
    """Logits of a single feature vector."""
    return logits_batch(x, W)[0]


def predict(X, W: WeightBundle) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits_batch(X, W), axis=1)


def episode_loss(ep: Episode, W: WeightBundle) -> tuple[float, WeightBundle]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. ``W``."""
    if W.k != ep.k:
        raise ContractError(f"bundle has {W.k} classes, episode has {ep.k}")
    logits, cache = _forward(ep.features, W)
    loss, dlogits = batch_softmax_cross_entropy(logits, ep.labels)
    return loss, _backward(dlogits, W, cache)


def _require_one_class(W: WeightBundle) -> None:
    if W.k != 1:
        raise ContractError(f"one-class scoring needs a k=1 bundle, got k={W.k}")


def one_class_scores(X, W: WeightBundle) -> np.ndarray:
    _require_one_class(W)
    return logits_batch(X, W)[:, 0]


def one_class_score(x, W: WeightBundle) -> float:
    return float(one_class_scores(x, W)[0])


def one_class_loss(positives, negatives, W: WeightBundle) -> tuple[float, WeightBundle]:
    """Mean logistic loss with positives labelled 1 and negatives 0."""
    _require_one_class(W)
    P = as_matrix(positives)
    N = as_matrix(negatives)
    X = np.vstack([P, N])
    targets = np.concatenate([np.ones(len(P)), np.zeros(len(N))])
    logits, cache = _forward(X, W)
    loss, dscores = logistic_loss(logits[:, 0], targets)
    return loss, _backward(dscores[:, None], W, cache)
