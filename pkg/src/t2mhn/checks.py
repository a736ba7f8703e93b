"""Executable symmetry laws and finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .hypernet import (
    HyperNetParams,
    NonEquivariantParams,
    TargetSpec,
    backward,
    emit,
    init_hypernet,
    init_nonev,
)
from .numerics import finite_diff_grad, rel_error
from .setlayers import (
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
from .target import Episode, episode_loss, logits_batch, one_class_loss

SYMMETRY_TOL = 1e-9
GRAD_TOL = 1e-4
FD_STEP = 1e-5


def _max_abs(a, b) -> float:
    if a is None and b is None:
        return 0.0
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


@dataclass
class EquivarianceReport:
    tolerance: float
    last_dev: float = 0.0       # W_last (and b_last) row-permutation law
    pen_dev: float = 0.0        # W_pen (and b_pen) invariance
    output_dev: float = 0.0     # permuted logits of the emitted classifier
    trials: int = 0
    skipped_k: list = field(default_factory=list)
    witness: dict | None = None

    @property
    def passed(self) -> bool:
        return max(self.last_dev, self.pen_dev, self.output_dev) <= self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _random_perm(k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 1:
        return np.zeros(1, dtype=int)
    while True:
        perm = rng.permutation(k)
        if np.any(perm != np.arange(k)):
            return perm


def check_equivariance(params, trials: int = 100, k_list=(2, 3, 5),
                       tolerance: float = SYMMETRY_TOL, seed: int = 0) -> EquivarianceReport:
    """Measure how far the hypernetwork is from the permutation laws.

    For random descriptor sets ``S``, permutations ``perm`` and inputs ``x``:
    emitting from ``S[perm]`` must give ``W_last[perm]``, the same ``W_pen``,
    and logits equal to the original logits reordered by ``perm``.
    """
    rng = np.random.default_rng(seed)
    rep = EquivarianceReport(tolerance)
    e = params.descriptor_dim
    m = params.spec.feature_dim
    for k in k_list:
        if isinstance(params, NonEquivariantParams) and k != params.k:
            rep.skipped_k.append(k)
            continue
        for t in range(trials):
            S = rng.standard_normal((k, e))
            x = rng.standard_normal(m)
            perm = _random_perm(k, rng)
            W, _ = emit(S, params)
            Wp, _ = emit(S[perm], params)
            last = max(_max_abs(Wp.W_last, W.W_last[perm]),
                       _max_abs(Wp.b_last, None if W.b_last is None else W.b_last[perm]))
            pen = max(_max_abs(Wp.W_pen, W.W_pen), _max_abs(Wp.b_pen, W.b_pen))
            out = _max_abs(logits_batch(x, Wp)[0], logits_batch(x, W)[0][perm])
            rep.trials += 1
            worst = max(last, pen, out)
            if rep.witness is None or worst > rep.witness["deviation"]:
                rep.witness = {"k": k, "trial": t, "perm": perm.tolist(), "deviation": worst}
            rep.last_dev = max(rep.last_dev, last)
            rep.pen_dev = max(rep.pen_dev, pen)
            rep.output_dev = max(rep.output_dev, out)
    return rep


# ---------------------------------------------------------------- gradient checks


def _fd_check(loss_fn, groups) -> float:
    """Relative error of the analytic gradient over all ``groups = [(array, grad)]`` jointly."""
    analytic, numeric = [], []
    for arr, grad in groups:
        def f(v, arr=arr):
            saved = arr.copy()
            arr[...] = v
            try:
                return loss_fn()
            finally:
                arr[...] = saved
        numeric.append(finite_diff_grad(f, arr.copy(), FD_STEP).ravel())
        analytic.append(np.asarray(grad).ravel())
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _rand_ev(rng, d_in, d_out) -> EquivariantLayerParams:
    return EquivariantLayerParams(rng.standard_normal((d_out, d_in)),
                                  rng.standard_normal((d_out, d_in)),
                                  rng.standard_normal(d_out))


def grad_check_ev_layer(rng, k=3, d_in=4, d_out=5, pooling="sum") -> float:
    X = rng.standard_normal((k, d_in))
    P = _rand_ev(rng, d_in, d_out)
    R = rng.standard_normal((k, d_out))

    def loss():
        return float(np.sum(R * ev_forward(X, P, True, pooling)[0]))

    _, cache = ev_forward(X, P, True, pooling)
    dX, g = ev_backward(R, cache)
    return _fd_check(loss, [(X, dX), (P.A, g.A), (P.B, g.B), (P.b, g.b)])


def grad_check_inv_head(rng, k=3, d_in=4, width=5, p=3, pooling="sum") -> float:
    X = rng.standard_normal((k, d_in))
    P = InvariantHeadParams(_rand_ev(rng, d_in, width), rng.standard_normal((p, width)),
                            rng.standard_normal(p))
    r = rng.standard_normal(p)

    def loss():
        return float(r @ inv_forward(X, P, True, pooling)[0])

    _, cache = inv_forward(X, P, True, pooling)
    dX, g = inv_backward(r, cache)
    return _fd_check(loss, [(X, dX), (P.inner.A, g.inner.A), (P.inner.B, g.inner.B),
                            (P.inner.b, g.inner.b), (P.C, g.C), (P.c, g.c)])


def grad_check_ev_head(rng, k=3, d=4, p=5) -> float:
    X = rng.standard_normal((k, d))
    P = EquivariantHeadParams(rng.standard_normal((p, d)), rng.standard_normal(p))
    R = rng.standard_normal((k, p))

    def loss():
        return float(np.sum(R * evhead_forward(X, P)[0]))

    _, cache = evhead_forward(X, P)
    dX, g = evhead_backward(R, cache)
    return _fd_check(loss, [(X, dX), (P.H, g.H), (P.h, g.h)])


def _random_episode(rng, k, e, m, n=12) -> Episode:
    labels = np.arange(n) % k
    return Episode(rng.standard_normal((k, e)), rng.standard_normal((n, m)), labels)


def grad_check_hypernet(rng, params, k=3, n=12) -> float:
    """Full episode loss through the emitted classifier back into every hypernet parameter."""
    ep = _random_episode(rng, k, params.descriptor_dim, params.spec.feature_dim, n)

    def loss():
        return episode_loss(ep, emit(ep.descriptors, params)[0])[0]

    W, cache = emit(ep.descriptors, params)
    _, dW = episode_loss(ep, W)
    grads = backward(dW, cache)
    return _fd_check(loss, [(a, g) for (_, a), (_, g) in zip(params.named_arrays(), grads.named_arrays())])


def _random_bundle(rng, spec: TargetSpec, k: int):
    from .hypernet import WeightBundle
    W = WeightBundle(rng.standard_normal((k, spec.last_width)))
    if spec.emit_biases:
        W.b_last = rng.standard_normal(k)
    if spec.layers == 2:
        W.W_pen = rng.standard_normal((spec.hidden_dim, spec.feature_dim))
        if spec.emit_biases:
            W.b_pen = rng.standard_normal(spec.hidden_dim)
    return W


def grad_check_target_loss(rng, spec: TargetSpec, k=3, n=12) -> float:
    ep = _random_episode(rng, k, 2, spec.feature_dim, n)
    W = _random_bundle(rng, spec, k)
    _, dW = episode_loss(ep, W)
    return _fd_check(lambda: episode_loss(ep, W)[0],
                     [(a, g) for (_, a), (_, g) in zip(W.parts(), dW.parts())])


def grad_check_one_class(rng, spec: TargetSpec, n=6) -> float:
    P = rng.standard_normal((n, spec.feature_dim))
    N = rng.standard_normal((n, spec.feature_dim))
    W = _random_bundle(rng, spec, 1)
    _, dW = one_class_loss(P, N, W)
    return _fd_check(lambda: one_class_loss(P, N, W)[0],
                     [(a, g) for (_, a), (_, g) in zip(W.parts(), dW.parts())])


def gradient_suite(seed: int = 0, kind: str = "ev", params=None, tolerance: float = GRAD_TOL) -> dict:
    """Run every backward pass against central differences; widths <= 8, k <= 5.

    ``params``, when given, is gradient-checked in addition to the small
    random hypernetworks.
    """
    rng = np.random.default_rng(seed)
    one = TargetSpec(feature_dim=4, layers=1)
    two = TargetSpec(feature_dim=4, layers=2, hidden_dim=3)
    errors = {}
    for k in (1, 2, 3, 5):
        errors[f"ev_layer_k{k}"] = grad_check_ev_layer(rng, k=k)
        errors[f"ev_layer_mean_k{k}"] = grad_check_ev_layer(rng, k=k, pooling="mean")
        errors[f"inv_head_k{k}"] = grad_check_inv_head(rng, k=k)
        errors[f"ev_head_k{k}"] = grad_check_ev_head(rng, k=k)
    for name, spec in (("1layer", one), ("2layer", two)):
        errors[f"target_loss_{name}"] = grad_check_target_loss(rng, spec)
        errors[f"one_class_loss_{name}"] = grad_check_one_class(rng, spec)
        if kind == "ev":
            hn = init_hypernet(spec, [6, 5], int(rng.integers(2**31)), descriptor_dim=5, head_scale=1.0)
            _perturb_biases(hn, rng)
            for k in (2, 3, 5):
                errors[f"hypernet_{name}_k{k}"] = grad_check_hypernet(rng, hn, k=k)
        else:
            hn = init_nonev(spec, 3, [6], int(rng.integers(2**31)), descriptor_dim=5, head_scale=1.0)
            _perturb_biases(hn, rng)
            errors[f"hypernet_nonev_{name}_k3"] = grad_check_hypernet(rng, hn, k=3)
    if params is not None:
        k = params.k if isinstance(params, NonEquivariantParams) else 2
        errors["checkpoint_hypernet"] = grad_check_hypernet(rng, params, k=k)
    return {
        "tolerance": tolerance,
        "max_rel_error": max(errors.values()),
        "errors": errors,
        "passed": all(v < tolerance for v in errors.values()),
    }


def _perturb_biases(params, rng) -> None:
    # zero-initialised biases would leave every check at a single, special point
    for name, a in params.named_arrays():
        if name.rsplit(".", 1)[-1] in ("b", "c", "h"):
            a[...] = 0.1 * rng.standard_normal(a.shape)


__all__ = [
    "EquivarianceReport",
    "HyperNetParams",
    "check_equivariance",
    "gradient_suite",
]
