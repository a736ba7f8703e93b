"""The hypernetwork: a set of class descriptors in, classifier weights out.

Two families live here. ``HyperNetParams`` is the equivariant design: a
trunk of equivariant layers, an equivariant head whose row ``i`` becomes the
weight row of class ``i``, and (for two-layer targets) an invariant head for
the hidden layer. ``NonEquivariantParams`` is the ablation: a plain MLP over
the concatenated descriptors, valid for a single fixed ``k``.

Emitted ``W_pen`` is filled row-major from the invariant head output:
the first ``hidden_dim * feature_dim`` entries give ``W_pen`` (hidden unit
by hidden unit), the next ``hidden_dim`` entries give ``b_pen``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import FORMAT_VERSION
from .numerics import DimensionError, as_matrix, relu_grad
from .setlayers import (
    POOLING_MODES,
    WEIGHT_NAMES,
    EquivariantHeadParams,
    EquivariantLayerParams,
    InvariantHeadParams,
    ev_backward,
    ev_forward,
    evhead_backward,
    evhead_forward,
    inv_backward,
    inv_forward,
)

HEAD_SCALE = 0.1


class ContractError(RuntimeError):
    """Raised when a cache or bundle does not belong to the call it is used with."""


@dataclass(frozen=True)
class TargetSpec:
    feature_dim: int
    layers: int = 1
    hidden_dim: int = 0
    emit_biases: bool = True

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.layers not in (1, 2):
            raise ValueError("target must have 1 or 2 layers")
        if self.layers == 2 and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1 for a 2-layer target")

    @property
    def last_width(self) -> int:
        """Input width of the output layer."""
        return self.hidden_dim if self.layers == 2 else self.feature_dim

    def n_floats(self, k: int) -> int:
        """Total number of emitted floats for ``k`` classes."""
        n = k * self.last_width + (k if self.emit_biases else 0)
        if self.layers == 2:
            n += self.hidden_dim * self.feature_dim
            n += self.hidden_dim if self.emit_biases else 0
        return n

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSpec":
        return cls(**d)


@dataclass
class WeightBundle:
    """Weights of one on-demand classifier. Also used to carry their gradients."""

    W_last: np.ndarray
    b_last: np.ndarray | None = None
    W_pen: np.ndarray | None = None
    b_pen: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.W_last.shape[0]

    @property
    def layers(self) -> int:
        return 1 if self.W_pen is None else 2

    def parts(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in ("W_last", "b_last", "W_pen", "b_pen"):
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.parts()])

    def permuted(self, perm) -> "WeightBundle":
        """Bundle for the classes reordered so new class ``i`` is old ``perm[i]``."""
        perm = np.asarray(perm)
        return WeightBundle(
            W_last=self.W_last[perm],
            b_last=None if self.b_last is None else self.b_last[perm],
            W_pen=self.W_pen,
            b_pen=self.b_pen,
        )

    def zeros_like(self) -> "WeightBundle":
        return WeightBundle(**{n: np.zeros_like(v) for n, v in self.parts()})

    def check(self, spec: TargetSpec, k: int) -> None:
        expect = {"W_last": (k, spec.last_width)}
        if spec.emit_biases:
            expect["b_last"] = (k,)
        if spec.layers == 2:
            expect["W_pen"] = (spec.hidden_dim, spec.feature_dim)
            if spec.emit_biases:
                expect["b_pen"] = (spec.hidden_dim,)
        got = {n: v.shape for n, v in self.parts()}
        if got != expect:
            raise ContractError(f"bundle shapes {got} do not match {expect}")


class _Params:
    """Shared flat-layout helpers for the two hypernetwork families."""

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        raise NotImplementedError

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.named_arrays()])

    def decay_mask(self) -> np.ndarray:
        parts = []
        for name, a in self.named_arrays():
            leaf = name.rsplit(".", 1)[-1]
            parts.append(np.full(a.size, 1.0 if leaf in WEIGHT_NAMES else 0.0))
        return np.concatenate(parts)

    def with_flat(self, flat):
        """Copy of these params with values taken from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        new = copy.deepcopy(self)
        pos = 0
        for _, a in new.named_arrays():
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != flat.size:
            raise DimensionError(f"flat vector has {flat.size} values, params need {pos}")
        return new

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


@dataclass
class HyperNetParams(_Params):
    spec: TargetSpec
    trunk: list[EquivariantLayerParams]
    last_head: EquivariantHeadParams
    pen_head: InvariantHeadParams | None = None
    pooling: str = "sum"

    kind = "ev"

    def __post_init__(self):
        if not self.trunk:
            raise ValueError("trunk needs at least one equivariant layer")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}")
        for prev, nxt in zip(self.trunk, self.trunk[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionError("trunk layer widths do not chain")
        width = self.trunk[-1].d_out
        bias = 1 if self.spec.emit_biases else 0
        if self.last_head.H.shape != (self.spec.last_width + bias, width):
            raise DimensionError(f"last head H{self.last_head.H.shape} does not fit spec")
        if (self.spec.layers == 2) != (self.pen_head is not None):
            raise ValueError("pen_head must be present exactly for 2-layer targets")
        if self.pen_head is not None:
            h, m = self.spec.hidden_dim, self.spec.feature_dim
            if self.pen_head.c.shape != (h * m + h * bias,):
                raise DimensionError("pen head output width does not fit spec")
            if self.pen_head.inner.d_in != width:
                raise DimensionError("pen head input width does not match trunk")

    @property
    def descriptor_dim(self) -> int:
        return self.trunk[0].d_in

    @property
    def trunk_widths(self) -> list[int]:
        return [layer.d_out for layer in self.trunk]

    def named_arrays(self):
        for i, layer in enumerate(self.trunk):
            yield from layer.named_arrays(f"trunk.{i}.")
        yield from self.last_head.named_arrays("last_head.")
        if self.pen_head is not None:
            yield from self.pen_head.named_arrays("pen_head.")


@dataclass
class NonEquivariantParams(_Params):
    spec: TargetSpec
    k: int
    descriptor_dim: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    kind = "nonev"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        if self.weights[0].shape[1] != self.k * self.descriptor_dim:
            raise DimensionError("first layer must read all k concatenated descriptors")
        if self.weights[-1].shape[0] != self.spec.n_floats(self.k):
            raise DimensionError("last layer must emit the full bundle")

    @property
    def trunk_widths(self) -> list[int]:
        return [W.shape[0] for W in self.weights[:-1]]

    def named_arrays(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            yield f"layers.{i}.W", W
            yield f"layers.{i}.b", b


# ---------------------------------------------------------------- forward


@dataclass
class HyperCache:
    k: int
    spec: TargetSpec
    trunk: list = field(default_factory=list)
    last: object = None
    pen: object = None
    params: object = None


def _check_descriptors(S, e: int) -> np.ndarray:
    S = as_matrix(S)
    if S.shape[1] != e:
        raise DimensionError(f"descriptor width {S.shape[1]} but hypernet expects {e}")
    return S


def _split_last(out: np.ndarray, spec: TargetSpec):
    width = spec.last_width
    W_last = out[:, :width]
    b_last = out[:, width] if spec.emit_biases else None
    return W_last, b_last


def _split_pen(z: np.ndarray, spec: TargetSpec):
    h, m = spec.hidden_dim, spec.feature_dim
    W_pen = z[: h * m].reshape(h, m)
    b_pen = z[h * m:] if spec.emit_biases else None
    return W_pen, b_pen


def emit_weights(S, params: HyperNetParams) -> tuple[WeightBundle, HyperCache]:
    """Run the equivariant hypernetwork on descriptor set ``S`` (k x e)."""
    S = _check_descriptors(S, params.descriptor_dim)
    spec = params.spec
    cache = HyperCache(k=S.shape[0], spec=spec, params=params)
    T = S
    for layer in params.trunk:
        T, c = ev_forward(T, layer, activation=True, pooling=params.pooling)
        cache.trunk.append(c)
    out, cache.last = evhead_forward(T, params.last_head)
    W_last, b_last = _split_last(out, spec)
    W_pen = b_pen = None
    if params.pen_head is not None:
        z, cache.pen = inv_forward(T, params.pen_head, activation=True, pooling=params.pooling)
        W_pen, b_pen = _split_pen(z, spec)
    return WeightBundle(W_last, b_last, W_pen, b_pen), cache


def _join_last(dW: WeightBundle, spec: TargetSpec) -> np.ndarray:
    if spec.emit_biases:
        return np.column_stack([dW.W_last, dW.b_last])
    return np.asarray(dW.W_last, dtype=np.float64)


def _join_pen(dW: WeightBundle, spec: TargetSpec) -> np.ndarray:
    parts = [dW.W_pen.ravel()]
    if spec.emit_biases:
        parts.append(dW.b_pen)
    return np.concatenate(parts)


def hypernet_backward(dW: WeightBundle, cache: HyperCache) -> HyperNetParams:
    """Gradients of every hypernetwork parameter given bundle gradients ``dW``."""
    if not isinstance(cache.params, HyperNetParams):
        raise ContractError("cache was not produced by emit_weights")
    dW.check(cache.spec, cache.k)
    params: HyperNetParams = cache.params
    dT, last_grads = evhead_backward(_join_last(dW, cache.spec), cache.last)
    pen_grads = None
    if cache.pen is not None:
        dT_pen, pen_grads = inv_backward(_join_pen(dW, cache.spec), cache.pen)
        dT = dT + dT_pen
    trunk_grads = []
    for c in reversed(cache.trunk):
        dT, g = ev_backward(dT, c)
        trunk_grads.append(g)
    trunk_grads.reverse()
    return HyperNetParams(
        spec=params.spec,
        trunk=trunk_grads,
        last_head=last_grads,
        pen_head=pen_grads,
        pooling=params.pooling,
    )


def emit_weights_nonev(S, params: NonEquivariantParams) -> tuple[WeightBundle, HyperCache]:
    """Ablation: MLP over the descriptors concatenated in the given order."""
    S = _check_descriptors(S, params.descriptor_dim)
    k = S.shape[0]
    if k != params.k:
        raise DimensionError(f"non-equivariant hypernet was built for k={params.k}, got k={k}")
    spec = params.spec
    cache = HyperCache(k=k, spec=spec, params=params)
    a = S.reshape(-1)
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        pre = W @ a + b
        cache.trunk.append((a, pre))
        a = np.maximum(pre, 0.0) if i < n_layers - 1 else pre
    pos = k * spec.last_width
    W_last = a[:pos].reshape(k, spec.last_width)
    b_last = W_pen = b_pen = None
    if spec.emit_biases:
        b_last = a[pos:pos + k]
        pos += k
    if spec.layers == 2:
        W_pen, b_pen = _split_pen(a[pos:], spec)
    return WeightBundle(W_last, b_last, W_pen, b_pen), cache


def nonev_backward(dW: WeightBundle, cache: HyperCache) -> NonEquivariantParams:
    if not isinstance(cache.params, NonEquivariantParams):
        raise ContractError("cache was not produced by emit_weights_nonev")
    dW.check(cache.spec, cache.k)
    params: NonEquivariantParams = cache.params
    parts = [dW.W_last.ravel()]
    if cache.spec.emit_biases:
        parts.append(dW.b_last)
    if cache.spec.layers == 2:
        parts.append(_join_pen(dW, cache.spec))
    d = np.concatenate(parts)
    n_layers = len(params.weights)
    dWs, dbs = [None] * n_layers, [None] * n_layers
    for i in reversed(range(n_layers)):
        a, pre = cache.trunk[i]
        if i < n_layers - 1:
            d = d * relu_grad(pre)
        dWs[i] = np.outer(d, a)
        dbs[i] = d
        d = params.weights[i].T @ d
    return NonEquivariantParams(params.spec, params.k, params.descriptor_dim, dWs, dbs)


def emit(S, params) -> tuple[WeightBundle, HyperCache]:
    """Dispatch to the right forward pass for either hypernetwork family."""
    if isinstance(params, NonEquivariantParams):
        return emit_weights_nonev(S, params)
    return emit_weights(S, params)


def backward(dW: WeightBundle, cache: HyperCache):
    if isinstance(cache.params, NonEquivariantParams):
        return nonev_backward(dW, cache)
    return hypernet_backward(dW, cache)


# ---------------------------------------------------------------- init


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


def _check_widths(trunk_widths) -> list[int]:
    widths = [int(w) for w in trunk_widths]
    if not widths or min(widths) < 1:
        raise ValueError(f"trunk widths must be a non-empty list of positive ints, got {trunk_widths}")
    return widths


def _ev_layer(rng, d_in: int, d_out: int) -> EquivariantLayerParams:
    return EquivariantLayerParams(
        A=_uniform(rng, (d_out, d_in), d_in),
        B=_uniform(rng, (d_out, d_in), d_in),
        b=np.zeros(d_out),
    )


def init_hypernet(spec: TargetSpec, trunk_widths, seed: int, descriptor_dim: int,
                  pooling: str = "sum", head_scale: float = HEAD_SCALE) -> HyperNetParams:
    """Uniform(-s, s) init with ``s = sqrt(1/fan_in)``; zero biases; scaled heads."""
    widths = _check_widths(trunk_widths)
    if descriptor_dim < 1:
        raise ValueError("descriptor_dim must be >= 1")
    rng = np.random.default_rng(seed)
    trunk = []
    d = descriptor_dim
    for w in widths:
        trunk.append(_ev_layer(rng, d, w))
        d = w
    bias = 1 if spec.emit_biases else 0
    p = spec.last_width + bias
    last_head = EquivariantHeadParams(H=head_scale * _uniform(rng, (p, d), d), h=np.zeros(p))
    pen_head = None
    if spec.layers == 2:
        q = spec.hidden_dim * spec.feature_dim + spec.hidden_dim * bias
        pen_head = InvariantHeadParams(
            inner=_ev_layer(rng, d, d),
            C=head_scale * _uniform(rng, (q, d), d),
            c=np.zeros(q),
        )
    return HyperNetParams(spec, trunk, last_head, pen_head, pooling)


def init_nonev(spec: TargetSpec, k: int, trunk_widths, seed: int, descriptor_dim: int,
               head_scale: float = HEAD_SCALE) -> NonEquivariantParams:
    widths = _check_widths(trunk_widths)
    rng = np.random.default_rng(seed)
    dims = [k * descriptor_dim, *widths, spec.n_floats(k)]
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        W = _uniform(rng, (d_out, d_in), d_in)
        if i == len(dims) - 2:
            W *= head_scale
        weights.append(W)
        biases.append(np.zeros(d_out))
    return NonEquivariantParams(spec, k, descriptor_dim, weights, biases)


def init_params(kind: str, spec: TargetSpec, trunk_widths, seed: int, descriptor_dim: int,
                k: int = 2, pooling: str = "sum"):
    if kind == "ev":
        return init_hypernet(spec, trunk_widths, seed, descriptor_dim, pooling=pooling)
    if kind == "nonev":
        return init_nonev(spec, k, trunk_widths, seed, descriptor_dim)
    raise ValueError(f"unknown hypernet kind {kind!r}")


# ---------------------------------------------------------------- checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def params_to_dict(params, seed: int | None = None, training_config: dict | None = None,
                   extra: dict | None = None) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": params.kind,
        "spec": asdict(params.spec),
        "trunk_widths": params.trunk_widths,
        "descriptor_dim": params.descriptor_dim,
        "seed": seed,
        "training_config_hash": config_hash(training_config) if training_config else None,
    }
    if isinstance(params, HyperNetParams):
        doc["pooling"] = params.pooling
    else:
        doc["k"] = params.k
    if extra:
        doc.update(extra)
    doc["params"] = {
        name: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}
        for name, a in params.named_arrays()
    }
    return doc


def params_from_dict(doc: dict):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    spec = TargetSpec.from_dict(doc["spec"])
    if doc["kind"] == "ev":
        template = init_hypernet(spec, doc["trunk_widths"], 0, doc["descriptor_dim"],
                                 pooling=doc.get("pooling", "sum"))
    elif doc["kind"] == "nonev":
        template = init_nonev(spec, doc["k"], doc["trunk_widths"], 0, doc["descriptor_dim"])
    else:
        raise ContractError(f"unknown hypernet kind {doc['kind']!r}")
    stored = doc["params"]
    names = [n for n, _ in template.named_arrays()]
    if sorted(names) != sorted(stored):
        raise ContractError("checkpoint parameter names do not match its architecture")
    flat = []
    for name, a in template.named_arrays():
        entry = stored[name]
        if tuple(entry["shape"]) != a.shape:
            raise ContractError(f"{name}: stored shape {entry['shape']} vs {list(a.shape)}")
        flat.append(np.asarray(entry["data"], dtype=np.float64))
    return template.with_flat(np.concatenate(flat))


def dumps_checkpoint(doc: dict) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(path, params, **kwargs) -> Path:
    path = Path(path)
    path.write_text(dumps_checkpoint(params_to_dict(params, **kwargs)), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[object, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return params_from_dict(doc), doc
