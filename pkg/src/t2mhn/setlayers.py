"""Permutation-symmetric building blocks with hand-written backward passes.

Every layer consumes a set of ``k`` elements stacked as the rows of a
``k x d`` matrix. Row order carries no meaning to the layer: equivariant
layers permute their output rows along with the input rows, invariant heads
ignore the order entirely.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .numerics import DimensionError, as_matrix, relu_grad

POOLING_MODES = ("sum", "mean")

# parameter names that receive weight decay; everything else is a bias
WEIGHT_NAMES = frozenset({"A", "B", "C", "H", "W"})


class EmptySetError(ValueError):
    """Raised when a set layer is applied to zero elements."""


def _check_set(X) -> np.ndarray:
    X = as_matrix(X)
    if X.shape[0] == 0:
        raise EmptySetError("set layers need at least one element")
    return X


def _pool(X: np.ndarray, pooling: str) -> np.ndarray:
    if pooling == "sum":
        return X.sum(axis=0)
    if pooling == "mean":
        return X.sum(axis=0) / X.shape[0]
    raise ValueError(f"unknown pooling mode {pooling!r}")


def _pool_scale(k: int, pooling: str) -> float:
    return 1.0 if pooling == "sum" else 1.0 / k


class ParamGroup:
    """Mixin giving dataclasses of arrays a stable flat layout."""

    def named_arrays(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, ParamGroup):
                yield from value.named_arrays(name + ".")
            else:
                yield name, value

    def zeros_like(self):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ParamGroup):
                kwargs[f.name] = value.zeros_like()
            else:
                kwargs[f.name] = np.zeros_like(value)
        return type(self)(**kwargs)


@dataclass
class EquivariantLayerParams(ParamGroup):
    A: np.ndarray  # per-element map, shared by all elements
    B: np.ndarray  # context map applied to the pooled set
    b: np.ndarray

    def __post_init__(self):
        if self.A.shape != self.B.shape or self.b.shape != (self.A.shape[0],):
            raise DimensionError(
                f"A{self.A.shape}, B{self.B.shape}, b{self.b.shape} do not conform"
            )

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]


@dataclass
class InvariantHeadParams(ParamGroup):
    inner: EquivariantLayerParams
    C: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.C.shape[1] != self.inner.d_out or self.c.shape != (self.C.shape[0],):
            raise DimensionError(
                f"C{self.C.shape}, c{self.c.shape} do not fit inner width {self.inner.d_out}"
            )


@dataclass
class EquivariantHeadParams(ParamGroup):
    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        if self.h.shape != (self.H.shape[0],):
            raise DimensionError(f"H{self.H.shape} and h{self.h.shape} do not conform")


@dataclass
class EVCache:
    X: np.ndarray
    context: np.ndarray
    pre: np.ndarray
    activation: bool
    pooling: str
    params: EquivariantLayerParams


def ev_forward(X, P: EquivariantLayerParams, activation: bool = True,
               pooling: str = "sum") -> tuple[np.ndarray, EVCache]:
    """``y_i = act(A x_i + B pool(X) + b)``; the pool includes ``x_i`` itself."""
    X = _check_set(X)
    if X.shape[1] != P.d_in:
        raise DimensionError(f"input width {X.shape[1]} but layer expects {P.d_in}")
    context = _pool(X, pooling)
    pre = X @ P.A.T + (P.B @ context + P.b)
    out = np.maximum(pre, 0.0) if activation else pre
    return out, EVCache(X, context, pre, activation, pooling, P)


def ev_backward(dY, cache: EVCache) -> tuple[np.ndarray, EquivariantLayerParams]:
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.pre.shape:
        raise DimensionError(f"upstream gradient {dY.shape} vs output {cache.pre.shape}")
    P = cache.params
    dpre = dY * relu_grad(cache.pre) if cache.activation else dY
    total = dpre.sum(axis=0)
    grads = EquivariantLayerParams(
        A=dpre.T @ cache.X,
        B=np.outer(total, cache.context),
        b=total,
    )
    scale = _pool_scale(cache.X.shape[0], cache.pooling)
    dX = dpre @ P.A + scale * (total @ P.B)
    return dX, grads


@dataclass
class InvCache:
    inner: EVCache
    pooled: np.ndarray
    k: int
    params: InvariantHeadParams


def inv_forward(X, P: InvariantHeadParams, activation: bool = True,
                pooling: str = "sum") -> tuple[np.ndarray, InvCache]:
    """Equivariant layer, then pooling over elements, then ``C u + c``."""
    Y, inner = ev_forward(X, P.inner, activation=activation, pooling=pooling)
    pooled = _pool(Y, pooling)
    z = P.C @ pooled + P.c
    return z, InvCache(inner, pooled, Y.shape[0], P)


def inv_backward(dz, cache: InvCache) -> tuple[np.ndarray, InvariantHeadParams]:
    dz = np.asarray(dz, dtype=np.float64)
    P = cache.params
    if dz.shape != P.c.shape:
        raise DimensionError(f"upstream gradient {dz.shape} vs head output {P.c.shape}")
    du = dz @ P.C
    scale = _pool_scale(cache.k, cache.inner.pooling)
    dY = np.broadcast_to(scale * du, (cache.k, du.size))
    dX, inner_grads = ev_backward(dY, cache.inner)
    return dX, InvariantHeadParams(inner=inner_grads, C=np.outer(dz, cache.pooled), c=dz.copy())


@dataclass
class EVHeadCache:
    X: np.ndarray
    params: EquivariantHeadParams


def evhead_forward(X, P: EquivariantHeadParams) -> tuple[np.ndarray, EVHeadCache]:
    """Row ``i`` of the output is ``H x_i + h``; no mixing across elements."""
    X = _check_set(X)
    if X.shape[1] != P.H.shape[1]:
        raise DimensionError(f"input width {X.shape[1]} but head expects {P.H.shape[1]}")
    return X @ P.H.T + P.h, EVHeadCache(X, P)


def evhead_backward(dY, cache: EVHeadCache) -> tuple[np.ndarray, EquivariantHeadParams]:
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != (cache.X.shape[0], cache.params.H.shape[0]):
        raise DimensionError(f"upstream gradient {dY.shape} does not match head output")
    grads = EquivariantHeadParams(H=dY.T @ cache.X, h=dY.sum(axis=0))
    return dY @ cache.params.H, grads
