import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2mhn import checks
from t2mhn.numerics import DimensionError, affine, relu
from t2mhn.setlayers import (
    EmptySetError,
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


def rand_ev(rng, d_in, d_out):
    return EquivariantLayerParams(rng.standard_normal((d_out, d_in)),
                                  rng.standard_normal((d_out, d_in)),
                                  rng.standard_normal(d_out))


def rand_inv(rng, d_in, width, p):
    return InvariantHeadParams(rand_ev(rng, d_in, width), rng.standard_normal((p, width)),
                               rng.standard_normal(p))


X2 = np.array([[1.0, 2.0], [3.0, 4.0]])


class TestEquivariantLayer:
    def test_identity(self):
        P = EquivariantLayerParams(np.eye(2), np.zeros((2, 2)), np.zeros(2))
        np.testing.assert_array_equal(ev_forward(X2, P, activation=False)[0], X2)

    def test_pure_context(self):
        P = EquivariantLayerParams(np.zeros((2, 2)), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(ev_forward(X2, P, activation=False)[0], [[4, 6], [4, 6]])

    def test_mean_pooling(self):
        P = EquivariantLayerParams(np.zeros((2, 2)), np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(ev_forward(X2, P, False, "mean")[0], [[2, 3], [2, 3]])

    def test_empty_set(self, rng):
        with pytest.raises(EmptySetError):
            ev_forward(np.zeros((0, 3)), rand_ev(rng, 3, 2))

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ev_forward(np.zeros((2, 4)), rand_ev(rng, 3, 2))

    def test_permutation_k5(self, rng):
        P = rand_ev(rng, 4, 6)
        X = rng.standard_normal((5, 4))
        perm = rng.permutation(5)
        Y = ev_forward(X, P)[0]
        assert np.max(np.abs(ev_forward(X[perm], P)[0] - Y[perm])) <= 1e-9

    def test_k1_collapses_to_affine(self, rng):
        P = rand_ev(rng, 3, 4)
        x = rng.standard_normal((1, 3))
        # A x + B x and (A + B) x round differently, so equality holds to rounding only
        np.testing.assert_allclose(ev_forward(x, P, activation=False)[0],
                                   affine(x, P.A + P.B, P.b), rtol=0, atol=1e-12)

    def test_backward_zero_upstream(self, rng):
        P = rand_ev(rng, 3, 4)
        _, cache = ev_forward(rng.standard_normal((3, 3)), P)
        dX, g = ev_backward(np.zeros((3, 4)), cache)
        assert not dX.any() and not g.A.any() and not g.B.any() and not g.b.any()

    def test_backward_k1_matches_single_affine(self, rng):
        P = rand_ev(rng, 3, 4)
        x = rng.standard_normal((1, 3))
        dy = rng.standard_normal((1, 4))
        _, cache = ev_forward(x, P, activation=False)
        dX, g = ev_backward(dy, cache)
        np.testing.assert_allclose(dX, dy @ (P.A + P.B), atol=1e-14)
        np.testing.assert_allclose(g.A, np.outer(dy[0], x[0]), atol=1e-14)
        np.testing.assert_allclose(g.B, g.A, atol=1e-14)

    def test_backward_shape_mismatch(self, rng):
        _, cache = ev_forward(rng.standard_normal((3, 3)), rand_ev(rng, 3, 4))
        with pytest.raises(DimensionError):
            ev_backward(np.zeros((2, 4)), cache)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    @pytest.mark.parametrize("pooling", ["sum", "mean"])
    def test_gradient_check(self, k, pooling, rng):
        assert checks.grad_check_ev_layer(rng, k=k, d_in=5, d_out=7, pooling=pooling) < 1e-4


class TestInvariantHead:
    def test_column_sums(self):
        inner = EquivariantLayerParams(np.eye(2), np.zeros((2, 2)), np.zeros(2))
        P = InvariantHeadParams(inner, np.eye(2), np.zeros(2))
        np.testing.assert_array_equal(inv_forward(np.eye(2), P)[0], [1, 1])

    def test_duplicate_rows_swapped(self, rng):
        P = rand_inv(rng, 3, 4, 2)
        row = rng.standard_normal(3)
        other = rng.standard_normal(3)
        X = np.stack([row, other, row])
        np.testing.assert_array_equal(inv_forward(X, P)[0], inv_forward(X[[2, 1, 0]], P)[0])

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_brute_force_all_orders(self, k, rng):
        P = rand_inv(rng, 4, 6, 3)
        X = rng.standard_normal((k, 4))
        ref = inv_forward(X, P)[0]
        worst = max(np.max(np.abs(inv_forward(X[list(p)], P)[0] - ref))
                    for p in itertools.permutations(range(k)))
        assert worst <= 1e-9

    def test_zero_upstream(self, rng):
        P = rand_inv(rng, 3, 4, 2)
        _, cache = inv_forward(rng.standard_normal((3, 3)), P)
        dX, g = inv_backward(np.zeros(2), cache)
        assert not dX.any()
        assert all(not a.any() for _, a in g.named_arrays())

    def test_k1_collapse(self, rng):
        P = rand_inv(rng, 3, 4, 2)
        x = rng.standard_normal((1, 3))
        direct = P.C @ relu(affine(x, P.inner.A + P.inner.B, P.inner.b))[0] + P.c
        np.testing.assert_allclose(inv_forward(x, P)[0], direct, atol=1e-14)

    def test_empty_set(self, rng):
        with pytest.raises(EmptySetError):
            inv_forward(np.zeros((0, 3)), rand_inv(rng, 3, 4, 2))

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_gradient_check(self, k, rng):
        assert checks.grad_check_inv_head(rng, k=k, d_in=5, width=8, p=4) < 1e-4
        assert checks.grad_check_inv_head(rng, k=k, pooling="mean") < 1e-4


class TestEquivariantHead:
    def test_identity(self, rng):
        X = rng.standard_normal((3, 4))
        P = EquivariantHeadParams(np.eye(4), np.zeros(4))
        np.testing.assert_array_equal(evhead_forward(X, P)[0], X)

    def test_permutation(self, rng):
        P = EquivariantHeadParams(rng.standard_normal((3, 4)), rng.standard_normal(3))
        X = rng.standard_normal((4, 4))
        perm = rng.permutation(4)
        np.testing.assert_array_equal(evhead_forward(X[perm], P)[0], evhead_forward(X, P)[0][perm])

    def test_empty_set(self):
        with pytest.raises(EmptySetError):
            evhead_forward(np.zeros((0, 2)), EquivariantHeadParams(np.eye(2), np.zeros(2)))

    def test_backward_shape_mismatch(self, rng):
        _, cache = evhead_forward(rng.standard_normal((3, 2)), EquivariantHeadParams(np.eye(2), np.zeros(2)))
        with pytest.raises(DimensionError):
            evhead_backward(np.zeros((3, 3)), cache)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_gradient_check(self, k, rng):
        assert checks.grad_check_ev_head(rng, k=k, d=6, p=8) < 1e-4


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 6), d_in=st.integers(1, 5), d_out=st.integers(1, 5),
       seed=st.integers(0, 2**32 - 1), pooling=st.sampled_from(["sum", "mean"]))
def test_equivariance_property(k, d_in, d_out, seed, pooling):
    rng = np.random.default_rng(seed)
    P = rand_ev(rng, d_in, d_out)
    inv = rand_inv(rng, d_in, d_out, 3)
    head = EquivariantHeadParams(rng.standard_normal((2, d_in)), rng.standard_normal(2))
    X = rng.standard_normal((k, d_in))
    perm = rng.permutation(k)
    assert np.max(np.abs(ev_forward(X[perm], P, True, pooling)[0]
                         - ev_forward(X, P, True, pooling)[0][perm])) <= 1e-9
    assert np.max(np.abs(inv_forward(X[perm], inv, True, pooling)[0]
                         - inv_forward(X, inv, True, pooling)[0])) <= 1e-9
    assert np.max(np.abs(evhead_forward(X[perm], head)[0] - evhead_forward(X, head)[0][perm])) <= 1e-9
