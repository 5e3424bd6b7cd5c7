import math

import numpy as np
import pytest
from scipy import stats

from selfnorm import environments as envs
from selfnorm.analysis import RunTrace, regret_from_trace
from selfnorm.environments import (AdversaryD2, DyadicTree, SmoothEnvSpec, node_index, onedim_batch,
                                   onedim_lowerbound_path, onedim_params)
from selfnorm.harness import play_game
from selfnorm.predictors import VawPinv, ZeroPredictor


def chi2_ok(counts, probs, z=4.0):
    # Pearson statistic within z standard deviations of its mean
    counts = np.asarray(counts, dtype=float)
    exp = counts.sum() * np.asarray(probs)
    keep = exp > 0
    stat = np.sum((counts[keep] - exp[keep]) ** 2 / exp[keep])
    k = keep.sum() - 1
    return stat <= k + z * math.sqrt(2 * k)


# dyadic trees -------------------------------------------------------------

def test_heap_convention():
    assert node_index([]) == 1
    assert node_index([-1]) == 2 and node_index([1]) == 3
    assert node_index([1, -1]) == 6


def test_tree_validation():
    with pytest.raises(ValueError):
        DyadicTree(np.zeros(4), 2)
    with pytest.raises(ValueError):
        DyadicTree([np.nan, 0.0, 0.0], 2)
    with pytest.raises(ValueError):
        DyadicTree.random(21, 1, np.random.default_rng(0)).enumerate_paths()


def test_tree_sample_trivial_cases():
    rng = np.random.default_rng(0)
    tree = DyadicTree([[2.0]], 1)
    X, eps = envs.tree_sample_path(tree, rng)
    assert X.shape == (1, 1) and X[0, 0] == 2.0 and abs(eps[0]) == 1
    tree = DyadicTree.constant([1.0, -1.0], 5)
    for _ in range(10):
        X, _ = tree.sample_path(rng)
        assert np.all(X == [1.0, -1.0])


def test_tree_path_follows_signs():
    tree = DyadicTree(np.arange(1, 16, dtype=float), 4)
    eps = [1, -1, 1, 1]
    want = [node_index(eps[:t]) for t in range(4)]
    assert np.array_equal(tree.path(eps)[:, 0], want)


def test_tree_path_frequencies():
    rng = np.random.default_rng(1)
    tree = DyadicTree.random(3, 1, rng)
    n = 100_000
    counts = {}
    for _ in range(n):
        X, eps = tree.sample_path(rng)
        key = tuple(eps)
        counts[key] = counts.get(key, 0) + 1
        assert np.array_equal(X, tree.path(eps))
    for t in range(1, 4):
        pref = {}
        for k, c in counts.items():
            pref[k[:t]] = pref.get(k[:t], 0) + c
        assert len(pref) == 2 ** t
        p = 2.0 ** -t
        for c in pref.values():
            assert abs(c - n * p) <= 4 * math.sqrt(n * p * (1 - p))


def test_enumerate_paths():
    tree = DyadicTree.random(2, 1, np.random.default_rng(2))
    eps, X = envs.tree_enumerate_paths(tree)
    assert eps.shape == (4, 2) and X.shape == (4, 2, 1)
    assert len({tuple(e) for e in eps}) == 4
    for e, x in zip(eps, X):
        assert np.array_equal(x, tree.path(e))
    R = envs.tree_selfnorm_values(DyadicTree.constant(1.0, 2))
    assert R.mean() == pytest.approx(1.0)
    assert sorted(R) == pytest.approx([0.0, 0.0, 2.0, 2.0])


def test_exact_mean_matches_monte_carlo():
    rng = np.random.default_rng(3)
    for d in (1, 2):
        tree = DyadicTree.random(8, d, rng)
        exact = envs.tree_selfnorm_values(tree).mean()
        draws = [tree.sample_path(rng) for _ in range(20_000)]
        R = envs.path_selfnorm(np.stack([x for x, _ in draws]), np.stack([e for _, e in draws]))
        assert abs(R.mean() - exact) <= 4 * R.std(ddof=1) / math.sqrt(len(R))


def test_tree_json_roundtrip_and_bounded():
    tree = DyadicTree.random(3, 2, np.random.default_rng(4))
    back = DyadicTree.from_json(tree.to_json())
    assert np.array_equal(back.nodes, tree.nodes) and back.depth == 3
    b = tree.bounded()
    assert b.max_norm() == pytest.approx(1.0)
    assert np.allclose(envs.tree_selfnorm_values(b), envs.tree_selfnorm_values(tree), atol=1e-10)


# d >= 2 adversary -------------------------------------------------------------

def test_adversary_first_covariate():
    a = AdversaryD2(2)
    assert np.allclose(envs.adversary_d2_next(a), [math.sqrt(3), 0.0], atol=1e-15)
    with pytest.raises(ValueError):
        AdversaryD2(1)


def test_adversary_postconditions_in_original_coordinates():
    rng = np.random.default_rng(5)
    for dim in (2, 3):
        a = AdversaryD2(dim)
        V = np.zeros((dim, dim))
        for t in range(12):
            x = a.next_covariate()
            Lam = V + np.eye(dim)
            assert np.allclose(a.lam_matrix(), Lam, rtol=1e-8, atol=1e-8)
            Li = np.linalg.inv(Lam)
            assert abs(x @ Li @ a.S_orig) <= 1e-8 * max(1.0, np.linalg.norm(Li @ a.S_orig) * np.linalg.norm(x))
            assert x @ Li @ x == pytest.approx(3.0, rel=1e-8)
            a.step(rng.choice([-1.0, 1.0]))
            V += np.outer(x, x)
            Lam = V + np.eye(dim)
            assert a.lam_norm() == pytest.approx(a.S_orig @ np.linalg.solve(Lam, a.S_orig), rel=1e-8)


def test_adversary_increment_is_constant():
    rng = np.random.default_rng(6)
    for r2, want in ((3.0, 0.75), (1.0, 0.5), (8.0, 8 / 9)):
        a = AdversaryD2(2, r=math.sqrt(r2))
        for _ in range(300):
            a.step(rng.choice([-1.0, 1.0]))
        assert np.max(np.abs(np.array(a.increments) - want)) <= 1e-8
        assert a.frame_error() <= 1e-10
        assert a.selfnorm() >= a.lam_norm() - 1e-8


def test_adversary_from_eps():
    a = AdversaryD2.from_eps(0.5)
    assert a.r ** 2 == pytest.approx(3.0)


def test_adversary_random_rule():
    rng = np.random.default_rng(7)
    a = AdversaryD2(3, rule="random", rng=np.random.default_rng(8))
    for _ in range(100):
        a.step(rng.choice([-1.0, 1.0]))
    assert np.max(np.abs(np.array(a.increments) - 0.75)) <= 1e-8
    with pytest.raises(ValueError):
        AdversaryD2(2, rule="random")


def test_adversary_batch_matches_stepwise():
    rng = np.random.default_rng(9)
    eps = np.where(rng.random((5, 60)) < 0.5, -1.0, 1.0)
    out = envs.adversary_d2_batch(60, eps, dim=3)
    assert np.max(out["inc_err"]) <= 1e-8
    for k in range(5):
        a = AdversaryD2(3, track_original=False)
        for s in eps[k]:
            a.step(s)
        assert out["R_T"][k] == pytest.approx(a.selfnorm(), rel=1e-8)
        assert out["lam_norm"][k] == pytest.approx(a.lam_norm(), rel=1e-10)
        assert out["lam_norm"][k] == pytest.approx(0.75 * 60, rel=1e-10)
        assert out["ell_sum"][k] == pytest.approx(a.gram.ell_sum, rel=1e-8)


def test_adversary_bounded_variant_preserves_selfnorm():
    tree = envs.adversary_d2_tree(8)
    R = envs.tree_selfnorm_values(tree)
    Rb = envs.tree_selfnorm_values(tree.bounded())
    assert tree.bounded().max_norm() <= 1 + 1e-12
    assert np.max(np.abs(R - Rb)) <= 1e-8
    assert R.mean() >= 0.75 * 8 - 1e-8


# one-dimensional blocks -------------------------------------------------------

def test_onedim_params():
    assert onedim_params(16) == (2, 8, 16.0)
    with pytest.raises(ValueError):
        onedim_params(9)


def test_onedim_stops_after_all_plus_first_block():
    eps = np.array([1, 1] + [-1, 1] * 7)
    out = onedim_lowerbound_path(16, eps=eps)
    assert out["stop"] == 0
    assert np.all(out["x"][2:] == 0)
    assert out["R_T"] == pytest.approx(2.0)


def test_onedim_path_matches_unscaled_oracle():
    rng = np.random.default_rng(10)
    T = 40
    n, K, M = onedim_params(T)
    for _ in range(50):
        eps = np.where(rng.random(T) < 0.5, -1, 1)
        out = onedim_lowerbound_path(T, eps=eps)
        # direct evaluation with exact magnitudes
        x = np.zeros(T)
        level, active = 1.0, True
        for j in range(-(-T // n)):
            lo, hi = j * n, min(T, (j + 1) * n)
            if active:
                x[lo:hi] = level
                if hi - lo == n and j < K and np.all(eps[lo:hi] == 1):
                    active = False
            level *= M
        R = (eps @ x) ** 2 / (x @ x)
        assert out["R_T"] == pytest.approx(R, rel=1e-10)
        Rb, stop = onedim_batch(T, eps[None])
        assert Rb[0] == pytest.approx(R, rel=1e-10)
        assert stop[0] == (-1 if out["stop"] is None else out["stop"])


def test_onedim_large_T_stays_finite():
    out = onedim_lowerbound_path(2 ** 16, rng=np.random.default_rng(11))
    assert np.isfinite(out["R_T"]) and np.all(np.isfinite(out["x"]))


# labels -------------------------------------------------------------------

def test_rademacher_labels_are_centered_and_unpredictable():
    rng = np.random.default_rng(12)
    n = 100_000
    lab = envs.RademacherLabels()
    y = np.array([lab.label(None, 0.0, rng) for _ in range(n)])
    assert abs(y.mean()) <= 4 / math.sqrt(n)
    T, runs = 50, 2000
    prods = []
    for _ in range(runs):
        env = envs.rademacher_label_env(lambda h, r: r.standard_normal(1), 1)
        tr = play_game(VawPinv(1), env, T, rng)
        prods.append(tr.yhat * tr.y)
    prods = np.concatenate(prods)
    assert abs(prods.mean()) <= 4 * prods.std() / math.sqrt(prods.size)


def test_zero_predictor_regret_equals_selfnorm():
    rng = np.random.default_rng(13)
    for _ in range(20):
        env = envs.rademacher_label_env(lambda h, r: r.standard_normal(2) * 10.0 ** r.uniform(-2, 2), 2)
        tr = play_game(ZeroPredictor(2), env, 30, rng)
        reg, _ = regret_from_trace(tr)
        assert reg == pytest.approx(tr.R_T, abs=1e-8 * max(1.0, tr.R_T))


def test_against_prediction_and_aligned_labels():
    rng = np.random.default_rng(14)
    assert envs.AgainstPrediction().label(None, 0.3, rng) == -1.0
    assert envs.AgainstPrediction().label(None, -0.3, rng) == 1.0
    assert envs.AlignedLabels().label(np.array([-2.0]), 0.0, rng) == -1.0


def test_scale_scripts():
    rng = np.random.default_rng(15)
    x = envs.scale_script("jumps", 90, rng)
    assert np.all(np.abs(x[30:60]) >= 1e9) and np.all(np.abs(x[60:]) < 1e-8)
    x = envs.scale_script("geometric", 10, rng, scale=2.0)
    assert np.allclose(np.abs(x), 2.0 * 1.01 ** np.arange(10))
    with pytest.raises(ValueError):
        envs.scale_script("nope", 5, rng)


# smooth environments ----------------------------------------------------------

def spec_uniform(C, rule="max_leverage", n=8, d=2):
    return SmoothEnvSpec.uniform(envs.default_smooth_support(n, d), C, rule)


def test_smooth_spec_validation():
    pts = envs.default_smooth_support(4, 2)
    with pytest.raises(ValueError):
        SmoothEnvSpec(pts, [0.5, 0.5, 0.5, -0.5])
    with pytest.raises(ValueError):
        SmoothEnvSpec.uniform(pts, 0.5)
    with pytest.raises(ValueError, match="support point"):
        SmoothEnvSpec.uniform(pts, 2.0).check(np.array([0.7, 0.1, 0.1, 0.1]))
    back = SmoothEnvSpec.from_json(spec_uniform(3.0).to_json())
    assert back.C_cov == 3.0 and back.rule == "max_leverage"


def test_smooth_masses_respect_caps():
    rng = np.random.default_rng(16)
    spec = spec_uniform(3.0)
    hist = []
    for _ in range(30):
        p = spec.masses(hist)
        assert np.all(p <= 3.0 * spec.base + 1e-12) and p.sum() == pytest.approx(1.0)
        envs.smooth_sample(spec, hist, rng)
    # any rule on a uniform N-point support is N-smooth
    full = spec_uniform(8.0)
    assert full.masses([]).max() == pytest.approx(1.0)


def test_smooth_C1_is_iid_base():
    rng = np.random.default_rng(17)
    spec = spec_uniform(1.0)
    rngs = [np.random.default_rng(s) for s in range(100)]
    idx = envs.smooth_batch(spec, 1000, rngs)
    counts = np.bincount(idx.ravel(), minlength=8)
    assert chi2_ok(counts, spec.base)
    hist = []
    envs.smooth_sample(spec, hist, rng)
    assert spec.masses(hist) == pytest.approx(spec.base)


def test_smooth_batch_equals_sequential():
    spec = spec_uniform(2.5)
    idx = envs.smooth_batch(spec, 40, [np.random.default_rng(s) for s in range(4)])
    for s in range(4):
        rng = np.random.default_rng(s)
        U = rng.random(40)
        hist = []
        for t in range(40):
            p = spec.masses(hist)
            i = envs._draw(p, U[t])
            assert i == idx[s, t]
            hist.append(spec.points[i])


def test_coupling_C1_always_accepts_first():
    spec = spec_uniform(1.0)
    rng = np.random.default_rng(18)
    xs, z, chosen, ok = envs.rejection_coupling(spec, 50, 0.1, rng)
    assert ok and np.all(chosen == 0)
    assert np.array_equal(xs, spec.points[z[:, 0]])
    assert z.shape == (50, envs.coupling_grid_size(1.0, 50, 0.1))


def test_coupling_success_rate_and_grid_marginals():
    spec = spec_uniform(3.0)
    rng = np.random.default_rng(19)
    wins = 0
    counts = np.zeros(8)
    for _ in range(1000):
        xs, z, chosen, ok = envs.rejection_coupling(spec, 20, 0.1, rng)
        wins += ok
        counts += np.bincount(z.ravel(), minlength=8)
        acc = chosen >= 0
        assert np.array_equal(xs[acc], spec.points[z[acc, chosen[acc]]])
    assert wins / 1000 >= 0.9
    assert chi2_ok(counts, spec.base)


def test_coupling_agrees_with_direct_sampling():
    # first two covariates: joint law from both samplers
    spec = spec_uniform(3.0, n=4)
    rng = np.random.default_rng(20)
    n = 25_000
    a = np.zeros(16)
    b = np.zeros(16)
    for _ in range(n):
        hist = []
        i0 = envs._draw(spec.masses(hist), rng.random())
        hist.append(spec.points[i0])
        i1 = envs._draw(spec.masses(hist), rng.random())
        a[4 * i0 + i1] += 1
        xs, _, _, _ = envs.rejection_coupling(spec, 2, 0.1, rng)
        j0 = int(np.argmin(np.linalg.norm(spec.points - xs[0], axis=1)))
        j1 = int(np.argmin(np.linalg.norm(spec.points - xs[1], axis=1)))
        b[4 * j0 + j1] += 1
    keep = (a + b) > 0
    _, pval, _, _ = stats.chi2_contingency(np.vstack([a[keep], b[keep]]))
    assert pval > 1e-4


def test_coupling_rejects_non_smooth_rule():
    bad = spec_uniform(2.0)
    bad.masses = lambda history: np.r_[[0.9], np.full(7, 0.1 / 7)]
    with pytest.raises(ValueError):
        envs.rejection_coupling(bad, 5, 0.1, np.random.default_rng(0))


# tightness -------------------------------------------------------------------

def test_tightness_params_and_measure():
    with pytest.raises(ValueError):
        envs.tightness_params(1.0, 10)
    n, p = envs.tightness_params(5.0, 10_000)
    assert n == 200 and p == pytest.approx(0.02)
    pts, mu = envs.tightness_base_measure(5.0, n, p)
    assert mu.sum() == pytest.approx(1.0) and np.all(mu >= 0)


def test_tightness_deterministic_when_p_is_one():
    n, p = envs.tightness_params(20.0, 3, n_max=3)
    assert p == 1.0 and n == 3
    x = envs.tightness_env_path(20.0, 6, np.random.default_rng(0), n_max=3)
    assert np.array_equal(x, [2.0, 4.0, 8.0, 0.0, 0.0, 0.0])


def test_tightness_nonzero_steps_have_large_leverage():
    rng = np.random.default_rng(21)
    for _ in range(20):
        x = envs.tightness_env_path(5.0, 2000, rng)
        sq = x * x
        lev = sq / (1.0 + np.cumsum(sq))
        assert np.all(lev[x != 0] >= 0.5)


def test_tightness_oracle_matches_monte_carlo():
    rng = np.random.default_rng(22)
    C, T = 5.0, 2000
    vals = np.array([envs.regularized_ell(envs.tightness_env_path(C, T, rng)) for _ in range(2000)])
    exact = envs.tightness_expected_sum(C, T)
    assert abs(vals.mean() - exact) <= 4 * vals.std(ddof=1) / math.sqrt(len(vals))
