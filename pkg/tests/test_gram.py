import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfnorm.gram import (GramState, RescaleNeeded, gram_push, pinv, psd_rank, rescale_history,
                           selfnorm_value, sm_inverse_update)


def state_with(V, S):
    g = GramState(len(S))
    g.V = np.array(V, dtype=float)
    g.S = np.array(S, dtype=float)
    g.P = pinv(g.V)
    g.rank = psd_rank(g.V)
    g.t = 1
    return g


# pinv -------------------------------------------------------------------

def test_pinv_examples():
    assert np.array_equal(pinv(np.zeros((2, 2))), np.zeros((2, 2)))
    assert np.allclose(pinv(np.eye(3)), np.eye(3), rtol=0, atol=1e-15)
    x = np.array([3.0, 4.0])
    assert np.allclose(pinv(np.outer(x, x)), np.outer(x, x) / 625, rtol=1e-12, atol=0)


def test_pinv_rejects_bad_input():
    with pytest.raises(ValueError, match="symmetric"):
        pinv(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="NaN"):
        pinv(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="square"):
        pinv(np.ones((2, 3)))


def test_pinv_is_involutive_on_retained_subspace():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 2))
    M = A @ A.T
    P = pinv(M)
    assert np.allclose(pinv(P), M, atol=1e-10)
    assert np.allclose(P, P.T)
    assert np.all(np.linalg.eigvalsh(P) > -1e-12)


# push / selfnorm / leverage ------------------------------------------------

def test_push_examples():
    g = gram_push(GramState(2), [3.0, 4.0], 1.0)
    assert np.array_equal(g.S, [3.0, 4.0])
    assert g.rank == 1
    assert g.ell_sum == pytest.approx(1.0, abs=1e-12)

    g = gram_push(GramState(2), [0.0, 0.0], 1.0)
    assert g.t == 1
    assert not g.S.any() and not g.V.any() and g.ell_sum == 0.0

    g = state_with(np.eye(2), [1.0, 0.0])
    g.push([0.0, 1.0], -1.0)
    assert np.array_equal(g.S, [1.0, -1.0])
    assert np.allclose(g.V, np.diag([1.0, 2.0]))
    assert g.selfnorm(verify=True) == pytest.approx(1.5, rel=1e-12)


def test_push_rejects_nan_and_signals_overflow():
    g = GramState(1)
    with pytest.raises(ValueError):
        g.push([np.nan], 1.0)
    with pytest.raises(ValueError):
        g.push([1.0], np.inf)
    g.push([1e154])
    assert g.P[0, 0] == pytest.approx(1e-308) and g.ell_sum == pytest.approx(1.0)
    with pytest.raises(RescaleNeeded):
        g.push([1e154])
    assert g.t == 1


def test_selfnorm_examples():
    assert GramState(3).selfnorm() == 0.0
    for y in (-1.0, 1.0):
        assert GramState(2).push([0.3, -2.0], y).selfnorm() == pytest.approx(1.0, rel=1e-12)
    assert state_with(np.eye(2), [1.0, 1.0]).selfnorm() == pytest.approx(2.0)


def test_leverage_examples():
    assert GramState(3).leverage([1.0, 2.0, 0.5]) == pytest.approx(1.0)
    assert GramState(1).push([1.0]).leverage([1.0]) == pytest.approx(0.5)
    assert GramState(2).push([1.0, 1.0]).leverage([0.0, 0.0]) == 0.0
    g = GramState(2).push([1.0, 0.0])
    assert g.leverage([1.0, 1e-3]) == pytest.approx(1.0)


def test_sm_inverse_update_examples():
    assert np.array_equal(sm_inverse_update(np.eye(2), [0.0, 0.0]), np.eye(2))
    assert sm_inverse_update(np.eye(1), [1.0])[0, 0] == pytest.approx(0.5)
    rng = np.random.default_rng(1)
    A = rng.standard_normal((3, 3))
    M = A @ A.T + 0.5 * np.eye(3)
    x = rng.standard_normal(3)
    got = sm_inverse_update(np.linalg.inv(M), x)
    want = np.linalg.inv(M + np.outer(x, x))
    assert np.linalg.norm(got - want) <= 1e-10 * np.linalg.norm(want)
    with pytest.raises(ValueError, match="positive definite"):
        sm_inverse_update(np.diag([1.0, -1.0]), x[:2])


def test_rescale_examples():
    g = state_with(np.eye(2), [1.0, 0.0])
    before = g.copy()
    g.rescale(1.0)
    assert np.array_equal(g.V, before.V) and np.array_equal(g.S, before.S)
    rescale_history(g, 2.0)
    assert np.allclose(g.V, 4 * np.eye(2)) and np.allclose(g.S, [2.0, 0.0])
    assert g.selfnorm() == pytest.approx(1.0)
    for bad in (0.0, -1.0, np.inf, np.nan):
        with pytest.raises(ValueError):
            g.rescale(bad)


def test_rescale_preserves_selfnorm_and_leverage():
    rng = np.random.default_rng(2)
    g = GramState(3)
    for _ in range(20):
        g.push(rng.standard_normal(3), rng.choice([-1.0, 1.0]))
    x = rng.standard_normal(3)
    R, lev = g.selfnorm(), g.leverage(x)
    g.rescale(10.0)
    assert g.selfnorm() == pytest.approx(R, rel=1e-10)
    assert g.leverage(10.0 * x) == pytest.approx(lev, rel=1e-10)


def test_transform_preserves_selfnorm():
    rng = np.random.default_rng(3)
    g = GramState(2)
    for _ in range(5):
        g.push(rng.standard_normal(2), rng.standard_normal())
    R = g.selfnorm()
    A = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    g.transform(A)
    assert g.selfnorm(verify=True) == pytest.approx(R, rel=1e-10)
    assert g.pinv_error() < 1e-10


def test_selfnorm_value_batched():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((6, 5, 2))
    y = rng.standard_normal((6, 5))
    S = np.einsum("nt,ntd->nd", y, X)
    V = np.einsum("nti,ntj->nij", X, X)
    got = selfnorm_value(S, V)
    for k in range(6):
        assert got[k] == pytest.approx(S[k] @ np.linalg.inv(V[k]) @ S[k], rel=1e-10)
    assert selfnorm_value(np.zeros(1), np.zeros((1, 1))) == 0.0


# properties --------------------------------------------------------------

def _stress_vectors(rng, d, n, spread=2.0):
    xs = []
    for _ in range(n):
        kind = rng.integers(6)
        if kind == 0:
            xs.append(np.zeros(d))
        elif kind == 1 and xs:
            xs.append(xs[rng.integers(len(xs))] * rng.choice([-3.0, 0.5, 1.0]))
        elif kind == 2:
            v = np.zeros(d)
            v[rng.integers(d)] = rng.standard_normal()
            xs.append(v)
        else:
            xs.append(rng.standard_normal(d) * 10.0 ** rng.uniform(-spread, spread))
    return xs


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_cache_matches_fresh_pinv_on_stress_sequences(d):
    rng = np.random.default_rng(10 + d)
    for _ in range(3):
        g = GramState(d)
        worst = 0.0
        prev = 0.0
        for x in _stress_vectors(rng, d, 1000):
            g.push(x, rng.choice([-1.0, 1.0]))
            worst = max(worst, g.pinv_error())
            assert -1e-12 <= g.ell_sum - prev <= 1.0 + 1e-12
            prev = g.ell_sum
        assert worst <= 1e-8
        assert g.rank == psd_rank(g.V)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), d=st.sampled_from([1, 2, 3]),
       alpha=st.sampled_from([1e-6, 1.0, 1e6]))
def test_scale_invariance_of_traces(seed, d, alpha):
    # magnitudes within one decade keep cond(V) small enough for 1e-8 agreement
    rng = np.random.default_rng(seed)
    xs = _stress_vectors(rng, d, 60, spread=0.5)
    ys = rng.choice([-1.0, 1.0], size=len(xs))
    a, b = GramState(d), GramState(d)
    for x, y in zip(xs, ys):
        la, lb = a.leverage(x), b.leverage(alpha * x)
        assert lb == pytest.approx(la, abs=1e-8)
        a.push(x, y)
        b.push(alpha * x, y)
        assert b.selfnorm() == pytest.approx(a.selfnorm(), rel=1e-8, abs=1e-8)


def test_pinv_rank_one_inequality():
    rng = np.random.default_rng(5)
    worst = -np.inf
    for _ in range(10_000):
        d = int(rng.integers(1, 5))
        k = int(rng.integers(1, d + 1))
        A = rng.standard_normal((d, k))
        V = A @ A.T
        v = A @ rng.standard_normal(k)
        w = rng.standard_normal(d) if rng.random() < 0.5 else A @ rng.standard_normal(k)
        Pn = pinv(V + np.outer(w, w))
        lhs = v @ Pn @ v
        rhs = v @ pinv(V) @ v - (w @ Pn @ v) ** 2
        worst = max(worst, (lhs - rhs) / max(1.0, abs(rhs)))
    assert worst <= 1e-8


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_leverage_is_one_exactly_for_new_directions(seed):
    rng = np.random.default_rng(seed)
    g = GramState(3)
    g.push(rng.standard_normal(3))
    g.push(rng.standard_normal(3))
    x = rng.standard_normal(3)
    assert g.leverage(x) == pytest.approx(1.0, abs=1e-9)
    inside = g.V @ rng.standard_normal(3)
    assert g.leverage(inside) < 1.0
