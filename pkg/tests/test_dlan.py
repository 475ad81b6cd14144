import numpy as np
import pytest

import oracles
from dlanac import diffcore as dc
from dlanac import dlan as dl
from dlanac.ac import AcResult
from dlanac.diffcore import ConfigError


def _state(rng, L=6, M=4, D=5, alpha=2.0):
    return dl.init_from_centers(rng.standard_normal((L, D)), M, alpha, rng)


def test_init_from_ac_sets_closed_form_layer(rng):
    c = rng.standard_normal((9, 4))
    s = dl.init_from_ac(AcResult(M=3, centers_ordered=c), alpha=10.0, rng=rng)
    assert (s.L, s.M, s.G, s.D) == (9, 3, 6, 4)
    np.testing.assert_allclose(s.assign_w.value, 20.0 * c, rtol=1e-6)
    np.testing.assert_allclose(s.assign_b.value, -10.0 * (c ** 2).sum(1), rtol=1e-6)
    assert dl.init_from_ac(AcResult(M=3, centers_ordered=c), rng=rng, M=9).M == 9


def test_init_rejects_bad_m_and_alpha(rng):
    c = rng.standard_normal((4, 3))
    with pytest.raises(ConfigError):
        dl.init_from_centers(c, 0, 1.0, rng)
    with pytest.raises(ConfigError):
        dl.init_from_centers(c, 5, 1.0, rng)
    with pytest.raises(ConfigError):
        dl.init_from_centers(c, 2, 0.0, rng)


def test_soft_assign_equals_distance_softmax_at_init(rng):
    with dc.float64_mode():
        s = _state(rng, L=7, D=6, alpha=3.0)
        F = rng.standard_normal((6, 5, 4))
        beta = dl.soft_assign(F, s)
        f = F.reshape(6, -1).T
        np.testing.assert_allclose(beta, oracles.soft_assign_closed_form(f, s.centers.value, 3.0),
                                   atol=1e-12)


def test_aggregation_matches_triple_loop_exactly():
    # small integers and dyadic weights keep every product and sum exact in float64
    rng = np.random.default_rng(0)
    with dc.float64_mode():
        s = dl.init_from_centers(rng.integers(-4, 5, (5, 3)).astype(float), 3, 1.0, rng)
        F = rng.integers(-8, 9, (3, 4, 4)).astype(float)
        raw = rng.integers(1, 8, (16, 5)).astype(float)
        beta = raw / raw.sum(1, keepdims=True)
        beta = np.round(beta * 64) / 64
        beta[:, -1] = 1.0 - beta[:, :-1].sum(1)
        V = dl.aggregate_residuals(F, beta, s)
        ref = oracles.aggregate_loops(F.reshape(3, -1).T, beta, s.centers.value)
        np.testing.assert_array_equal(V, ref)


def test_aggregation_matches_triple_loop_random(rng):
    with dc.float64_mode():
        s = _state(rng)
        F = rng.standard_normal((5, 3, 3))
        beta = dl.soft_assign(F, s)
        V = dl.aggregate_residuals(F, beta, s)
        ref = oracles.aggregate_loops(F.reshape(5, -1).T, beta, s.centers.value)
        np.testing.assert_allclose(V, ref, rtol=1e-12, atol=1e-12)


def test_rows_sum_to_one(rng):
    s = _state(rng)
    F = rng.standard_normal((3, 5, 4, 4)).astype(np.float32)
    Pt, P, w, (f, beta, *_) = dl.forward(F, s)
    np.testing.assert_allclose(beta.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    assert P.shape == (3, 4, 5) and w.shape == (3, 16, 4) and Pt.shape == F.shape


def test_batched_forward_matches_stage_functions(rng):
    with dc.float64_mode():
        s = _state(rng)
        F = rng.standard_normal((2, 5, 3, 4))
        Pt, P, w, _ = dl.forward(F, s)
        for b in range(2):
            beta = dl.soft_assign(F[b], s)
            Pb = dl.prototypes(dl.aggregate_residuals(F[b], beta, s), s)
            wb = dl.matching_weights(F[b], Pb)
            np.testing.assert_allclose(P[b], Pb, atol=1e-12)
            np.testing.assert_allclose(w[b], wb, atol=1e-12)
            np.testing.assert_allclose(Pt[b], dl.readout(wb, Pb, 3, 4), atol=1e-12)


def test_ghost_columns_never_reach_prototypes(rng):
    with dc.float64_mode():
        s = _state(rng, L=6, M=4)
        V = rng.standard_normal((5, 6))
        V2 = V.copy()
        V2[:, 4:] = 1e6
        np.testing.assert_array_equal(dl.prototypes(V, s), dl.prototypes(V2, s))


def test_layout_helpers_roundtrip(rng):
    F = rng.standard_normal((2, 3, 4, 5))
    f = dl.to_rows(F)
    assert f.shape == (2, 20, 3)
    np.testing.assert_array_equal(f[1, 7], F[1, :, 1, 2])
    np.testing.assert_array_equal(dl.from_rows(f, 4, 5), F)


def test_fuse_stacks_features_then_prototypes(rng):
    F = rng.standard_normal((2, 3, 2, 2))
    P = rng.standard_normal((2, 3, 2, 2))
    out = dl.fuse(F, P)
    np.testing.assert_array_equal(out[:, :3], F)
    np.testing.assert_array_equal(out[:, 3:], P)


def test_forward_backward_gradients(rng):
    with dc.float64_mode():
        s = _state(rng, L=5, M=3, D=4, alpha=1.5)
        F0 = rng.standard_normal((2, 4, 3, 3))
        g = rng.standard_normal(F0.shape)
        gP = rng.standard_normal((2, 3, 4))
        gf = rng.standard_normal((2, 9, 4))

        def objective(F):
            Pt, P, w, cache = dl.forward(F, s)
            value = (g * Pt).sum() + (gP * P).sum() + (gf * dl.to_rows(F)).sum()
            return float(value), cache

        def wrt_input(v):
            F = v.reshape(F0.shape)
            value, cache = objective(F)
            s.zero_grad()
            return value, dl.backward(g, cache, s, dP_extra=gP, df_extra=gf)

        assert dc.grad_check(wrt_input, F0) < 1e-6

        for name, p in s.params.items():
            def wrt_param(v, p=p):
                old = p.value
                p.value = v.reshape(old.shape)
                value, cache = objective(F0)
                s.zero_grad()
                dl.backward(g, cache, s, dP_extra=gP, df_extra=gf)
                grad = p.grad.copy()
                p.value = old
                return value, grad
            assert dc.grad_check(wrt_param, p.value.copy()) < 1e-6, name


def test_random_init_shapes(rng):
    s = dl.init_random(10, 10, 8, 10.0, rng)
    assert (s.L, s.M, s.G) == (10, 10, 0)
