import math

import numpy as np
import pytest
from scipy.stats import norm

from seqint.calibration import (
    BootstrapPlan,
    bickel_sakov_select,
    bootstrap_draws,
    calibrate_step,
    choose_m,
    ks_distance,
    m_grid,
    pretest_r,
    pretest_threshold,
    pvalue_from_draws,
    resample,
    sample_null,
    stream,
)
from seqint.core import DrRecipe, InfluenceMatrix, RctRecipe
from seqint.data import Dataset, StepContext
from seqint.errors import DataError, GridTooShort, NonPSDCovariance, UnsupportedCalibration
from seqint.nuisance import NuisanceSpec

PLAN = BootstrapPlan(B=200, seed=11)


def sweep_ks(a, b):
    """Sorted-merge sweep over the pooled sample, independent of searchsorted."""
    a, b = sorted(a), sorted(b)
    i = j = 0
    best = 0.0
    while i < len(a) or j < len(b):
        v = min(a[i] if i < len(a) else math.inf, b[j] if j < len(b) else math.inf)
        while i < len(a) and a[i] == v:
            i += 1
        while j < len(b) and b[j] == v:
            j += 1
        best = max(best, abs(i / len(a) - j / len(b)))
    return best


# -- pre-test ---------------------------------------------------------------

def test_pretest_threshold_example():
    assert pretest_threshold(100, 50, 0.05, 2.0) == pytest.approx(norm.isf(0.0005), abs=1e-12)
    assert pretest_threshold(100, 50, 0.05, 2.0) == pytest.approx(3.2905, abs=1e-4)
    assert pretest_threshold(100, 1, 0.05, 2.0) == pytest.approx(math.sqrt(2 * math.log(100)))


def test_pretest_ratios():
    plan = BootstrapPlan(alpha=0.05, c=2.0)
    t = pretest_threshold(100, 50, 0.05, 2.0)
    assert pretest_r(2.0, 1.0, 100, 50, plan) == 1
    assert pretest_r(-20.0, 2.0, 100, 50, plan) == 0
    assert pretest_r(t, 1.0, 100, 50, plan) == 0
    with pytest.raises(DataError):
        pretest_r(1.0, 0.0, 100, 50, plan)


# -- grid and Bickel-Sakov --------------------------------------------------

def test_m_grid_example():
    assert m_grid(100, 0.8, 30) == [100, 80, 64, 52, 41, 33]
    assert m_grid(10, 0.99, 9) == [10, 9]


def test_ks_distance_matches_sweep():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = np.round(rng.standard_normal(30), 1)
        b = np.round(rng.standard_normal(45) * 1.5, 1)
        assert ks_distance(a, b) == pytest.approx(sweep_ks(a, b), abs=1e-15)


def test_identical_draws_pick_largest_m():
    draws = [np.arange(10.0)] * 4
    assert bickel_sakov_select([100, 80, 64, 52], draws)[0] == 100


def test_synthetic_streams_break_below_52():
    grid = m_grid(100, 0.8, 30)
    rng = np.random.default_rng(5)
    draws = [rng.normal(0, 1 if m >= 52 else 2, 1000) for m in grid]
    m_hat, path = bickel_sakov_select(grid, draws)
    oracle = [sweep_ks(draws[j], draws[j + 1]) for j in range(len(grid) - 1)]
    assert [d for _, d in path] == pytest.approx(oracle, abs=1e-15)
    # the only distribution change sits between 52 and 41
    assert max(path, key=lambda t: t[1])[0] == 52
    assert m_hat == grid[int(np.argmin(oracle))]
    # with matching draws at 52 and 41 the selector lands on 52
    draws[4] = draws[3].copy()
    assert bickel_sakov_select(grid, draws)[0] == 52


def test_grid_too_short():
    with pytest.raises(GridTooShort):
        bickel_sakov_select([40], [np.zeros(3)])


def test_choose_m():
    assert choose_m(0, 500, 64) == 500
    assert choose_m(1, 500, 64) == 64
    assert choose_m(1, 500, 500) == 500


# -- p-values ----------------------------------------------------------------

def test_pvalue_examples():
    assert pvalue_from_draws(0.0, [3.0, -1.0]) == 1.0
    assert pvalue_from_draws(2.0, np.zeros(99)) == pytest.approx(0.01)
    assert pvalue_from_draws(0.5, [1, -1, 1, -1]) == 1.0
    with pytest.raises(DataError):
        pvalue_from_draws(1.0, [])


def test_pvalue_bounds_and_monotone():
    draws = np.random.default_rng(1).standard_normal(500)
    ps = [pvalue_from_draws(s, draws) for s in np.linspace(0, 5, 30)]
    assert all(1 / 501 <= p <= 1 for p in ps)
    assert all(a >= b for a, b in zip(ps, ps[1:]))


# -- null sampling -------------------------------------------------------------

def test_sample_null_single_candidate_tail():
    sigma, d = 2.0, 0.5
    rng = np.random.default_rng(2)
    e = rng.standard_normal((4000, 1))
    e = (e - e.mean()) / e.std() * sigma
    infl = InfluenceMatrix(e, np.array([d]))
    draws = sample_null(infl, 20000, stream(3))
    assert draws.std() == pytest.approx(sigma / d, rel=0.02)
    p = pvalue_from_draws(1.96 * sigma / d, draws)
    assert abs(p - 0.05) < 3 * math.sqrt(0.05 * 0.95 / 20000)


def test_sample_null_trivial_cases():
    zero = InfluenceMatrix(np.zeros((10, 3)), np.ones(3))
    np.testing.assert_array_equal(sample_null(zero, 50, stream(0)), 0.0)
    ident = InfluenceMatrix(np.random.default_rng(0).standard_normal((50, 3)), np.ones(3))
    assert pvalue_from_draws(0.0, sample_null(ident, 100, stream(0))) == 1.0


def test_sample_null_picks_largest_ratio():
    e = np.random.default_rng(4).standard_normal((200, 3))
    d = np.array([1.0, 2.0, 0.5])
    infl = InfluenceMatrix(e, d)
    draws = sample_null(infl, 300, stream(9))
    # recompute with an explicit loop: Z = Sigma^(1/2) xi in the d-scaled
    # coordinates T_k = Z_k / d_k, pick argmax Z_k^2 / d_k, report T_K
    cov = infl.covariance() / np.outer(d, d)
    vals, vecs = np.linalg.eigh(cov)
    root = vecs @ np.diag(np.sqrt(np.clip(vals, 0, None))) @ vecs.T
    t = stream(9).standard_normal((300, 3)) @ root.T
    expect = []
    for row in t:
        z = row * d
        k = max(range(3), key=lambda j: (z[j] ** 2 / d[j], -j))
        expect.append(z[k] / d[k])
    np.testing.assert_allclose(draws, expect, rtol=1e-10)


def test_null_factor_is_symmetric_root():
    from seqint.calibration import null_factor

    a = np.random.default_rng(3).standard_normal((4, 4))
    cov = a @ a.T
    root, frac = null_factor(cov)
    np.testing.assert_allclose(root, root.T, atol=1e-12)
    np.testing.assert_allclose(root @ root, cov, atol=1e-10)
    assert frac == 0.0


def test_sample_null_scale_invariant():
    e = np.random.default_rng(5).standard_normal((200, 3))
    d = np.array([1.0, 2.0, 0.5])
    b = np.array([3.0, 0.2, 1.0])
    base = sample_null(InfluenceMatrix(e, d), 500, stream(2), scale=np.ones(3))
    # rescaling covariate k by b_k scales e_k by b_k, d_k by b_k^2 and s_k by b_k
    moved = sample_null(InfluenceMatrix(e * b, d * b**2), 500, stream(2), scale=b)
    np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-12)


def test_non_psd_rejected():
    class Fake(InfluenceMatrix):
        def covariance(self):
            return np.array([[1.0, 0.0], [0.0, -0.5]])

    with pytest.raises(NonPSDCovariance):
        sample_null(Fake(np.zeros((2, 2)), np.ones(2)), 10, stream(0))


# -- resampling and bootstrap draws -------------------------------------------

def test_resample_determinism_and_range(make_rct):
    ds = make_rct(1, n=20)
    a = resample(ds, 20, stream(4, 1))
    b = resample(ds, 20, stream(4, 1))
    assert a == b
    assert resample(ds, 1, stream(0)).n == 1
    with pytest.raises(DataError):
        resample(ds, 21, stream(0))


def test_zero_residual_gives_zero_draws():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 2))
    ds = Dataset(np.full(30, 2.0), np.r_[np.ones(15), np.zeros(15)], x, np.full(30, 0.5))
    draws = bootstrap_draws(ds, StepContext.build(x), RctRecipe(), 30, 100, stream(1))
    np.testing.assert_allclose(draws, 0.0, atol=1e-12)


def test_bootstrap_pair_reproducible(make_rct):
    ds = make_rct(2, n=40)
    step = StepContext.build(ds.x)
    one = bootstrap_draws(ds, step, RctRecipe(), 40, 2, stream(8))
    two = bootstrap_draws(ds, step, RctRecipe(), 40, 2, stream(8))
    np.testing.assert_array_equal(one, two)


def test_bootstrap_mean_near_zero_under_null():
    # averaged over seeded n=30 null instances; a single instance carries an
    # O(n^-1/2) conditional bias from the ratio form of the coefficient
    means = []
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n = 30
        x = rng.standard_normal((n, 1))
        a = np.r_[np.ones(15), np.zeros(15)]
        ds = Dataset(rng.standard_normal(n), a, x, np.full(n, 0.5))
        means.append(bootstrap_draws(ds, StepContext.build(x), RctRecipe(), n, 1000, stream(seed)).mean())
    means = np.array(means)
    assert abs(means.mean()) <= 3 * means.std() / math.sqrt(means.size)


# -- the full step --------------------------------------------------------------

def test_nboot_equals_mboot_with_r_forced_zero(make_rct):
    ds = make_rct(3, n=120, beta=[3.0, 0, 0, 0])
    step = StepContext.build(ds.x)
    m = calibrate_step(ds, step, RctRecipe(), "mboot", PLAN)
    nb = calibrate_step(ds, step, RctRecipe(), "nboot", PLAN)
    assert m.r_hat == 0 and m.m_hat == ds.n
    assert (m.p_value, m.m_hat) == (nb.p_value, nb.m_hat)


def test_strong_signal_is_regular(make_rct):
    ds = make_rct(4, n=200, beta=[2.5, 0, 0, 0])
    recipe = RctRecipe()
    step = StepContext.build(ds.x)
    stat = recipe.evaluate(ds, step)
    res = calibrate_step(ds, step, recipe, "mboot", PLAN, stat)
    thr = max(math.sqrt(2 * math.log(200)), norm.isf(0.05 / (2 * 4)))
    assert abs(stat.stat_scaled / stat.sigma_hat) >= thr
    assert res.r_hat == 0 and res.m_hat == 200
    assert res.p_value == pytest.approx(1 / 201)


def test_null_instance_uses_smaller_m(make_rct):
    ds = make_rct(5, n=200, beta=[0, 0, 0, 0])
    recipe = RctRecipe()
    step = StepContext.build(ds.x)
    stat = recipe.evaluate(ds, step)
    res = calibrate_step(ds, step, recipe, "mboot", PLAN, stat)
    assert abs(stat.stat_scaled / stat.sigma_hat) < math.sqrt(2 * math.log(200))
    assert res.r_hat == 1 and res.m_hat < 200
    assert res.m_hat in m_grid(200, 0.8, 30)
    assert len(res.ks_path) == len(m_grid(200, 0.8, 30)) - 1


@pytest.mark.parametrize("method", ["null", "mboot", "nboot"])
def test_worker_count_does_not_change_result(make_rct, method):
    ds = make_rct(6, n=100)
    step = StepContext.build(ds.x)
    runs = [calibrate_step(ds, step, RctRecipe(), method, BootstrapPlan(B=150, seed=2, workers=w))
            for w in (1, 3)]
    assert runs[0] == runs[1]


def test_seed_changes_draws(make_rct):
    ds = make_rct(6, n=100)
    step = StepContext.build(ds.x)
    a = calibrate_step(ds, step, RctRecipe(), "nboot", BootstrapPlan(B=500, seed=1))
    b = calibrate_step(ds, step, RctRecipe(), "nboot", BootstrapPlan(B=500, seed=1))
    assert a == b


@pytest.mark.parametrize("method", ["null", "mboot", "nboot"])
def test_scale_invariance(make_rct, method):
    ds = make_rct(7, n=120, beta=[0.4, 0, 0, 0])
    recipe = RctRecipe()
    base = calibrate_step(ds, StepContext.build(ds.x), recipe, method, PLAN)
    x2 = ds.x * np.array([2.0, 0.1, 7.0, 1.0]) + np.array([5.0, -1.0, 0.0, 3.0])
    ds2 = Dataset(ds.y, ds.a, x2, ds.q0)
    scaled = calibrate_step(ds2, StepContext.build(x2), recipe, method, PLAN)
    assert (scaled.r_hat, scaled.m_hat, scaled.p_value) == (base.r_hat, base.m_hat, base.p_value)


@pytest.mark.parametrize("method", ["mboot", "nboot"])
def test_sign_flip_invariance_for_bootstrap(make_rct, method):
    ds = make_rct(8, n=120, beta=[0.4, 0, 0, 0])
    x2 = ds.x * np.array([-1.0, 1.0, -2.0, 1.0])
    base = calibrate_step(ds, StepContext.build(ds.x), RctRecipe(), method, PLAN)
    flipped = calibrate_step(Dataset(ds.y, ds.a, x2, ds.q0), StepContext.build(x2), RctRecipe(), method, PLAN)
    assert (flipped.m_hat, flipped.p_value) == (base.m_hat, base.p_value)


def test_null_sampling_rejected_for_dr():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 2))
    ds = Dataset(rng.standard_normal(60), (rng.random(60) < 0.5).astype(float), x)
    recipe = DrRecipe(NuisanceSpec("least-squares"), NuisanceSpec("logistic"))
    with pytest.raises(UnsupportedCalibration):
        calibrate_step(ds, StepContext.build(x), recipe, "null", PLAN)


def test_plan_validation():
    for bad in (dict(d=1.0), dict(B=10), dict(alpha=0.0), dict(c=0.0), dict(M_null=0), dict(workers=0)):
        with pytest.raises(DataError):
            BootstrapPlan(**bad)
    assert BootstrapPlan().floor_for(2500) == 50
    assert BootstrapPlan().floor_for(100) == 30
