"""Dense numerics shared by every other module.

Matrices are plain ``float64`` numpy arrays. Everything here is small and
explicit on purpose: the gradient checks in the test-suite depend on exact
control over the arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not conform."""


class EvaluationError(ArithmeticError):
    """Raised when a function evaluation returns a non-finite value."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def affine(X, W, b) -> np.ndarray:
    """Row-wise affine map: ``out[i] = W @ X[i] + b``."""
    X = as_matrix(X)
    W = as_matrix(W)
    b = np.asarray(b, dtype=np.float64)
    if W.shape[1] != X.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"cannot apply W{W.shape} with b{b.shape} to X{X.shape}"
        )
    return X @ W.T + b


def relu(X) -> np.ndarray:
    return np.maximum(np.asarray(X, dtype=np.float64), 0.0)


def relu_grad(pre) -> np.ndarray:
    # subgradient 0 at the kink
    return (np.asarray(pre) > 0.0).astype(np.float64)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return float(-logp[label]), grad


def batch_softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows of ``logits``; gradient is w.r.t. the logits."""
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but labels of shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in 0..{k - 1}")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def log_sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return -np.logaddexp(0.0, -z)


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.exp(log_sigmoid(z))


def logistic_loss(scores, targets) -> tuple[float, np.ndarray]:
    """Mean binary log-loss of raw scores against 0/1 targets."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionError(f"scores {s.shape} vs targets {t.shape}")
    losses = -(t * log_sigmoid(s) + (1.0 - t) * log_sigmoid(-s))
    grad = (sigmoid(s) - t) / s.size
    return float(losses.mean()), grad


@dataclass
class OptimState:
    """Velocity buffer plus SGD hyperparameters.

    ``decay_mask`` selects the coordinates that receive weight decay (weights
    yes, biases no). ``None`` decays every coordinate.
    """

    velocity: np.ndarray
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.decay_mask is not None:
            self.decay_mask = np.asarray(self.decay_mask, dtype=np.float64)
            if self.decay_mask.shape != self.velocity.shape:
                raise DimensionError("decay_mask must match the velocity buffer")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "OptimState":
        return cls(velocity=np.zeros(n), **hyper)


def sgd_momentum_step(params, grads, state: OptimState) -> np.ndarray:
    """One heavy-ball step. Mutates ``state.velocity``; returns new params.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - learning_rate * v
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.velocity.shape:
        raise DimensionError(
            f"params {params.shape}, grads {grads.shape}, velocity {state.velocity.shape}"
        )
    decay = state.weight_decay * params
    if state.decay_mask is not None:
        decay = decay * state.decay_mask
    state.velocity = state.momentum * state.velocity + (grads + decay)
    return params - state.learning_rate * state.velocity


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    shape = x.shape
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(flat.reshape(shape))
        flat[i] = orig - h
        fm = f(flat.reshape(shape))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(shape)


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Relative error ``|a - b| / (|a| + |b|)`` in the Euclidean norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
