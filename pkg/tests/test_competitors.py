import numpy as np
import pytest
from scipy import stats

from seqint.calibration import BootstrapPlan
from seqint.competitors import bonferroni_test, competitor_step, lrt_test
from seqint.core import RctRecipe
from seqint.data import Dataset, StepContext
from seqint.errors import DataError, InfeasibleLRT
from seqint.simgen import canonical, default_methods, generate, mc_study
from seqint.calibration import stream


def test_bonferroni_all_zero_coefficients():
    # Y is a function of A only, so every marginal interaction is exactly 0
    rng = np.random.default_rng(0)
    n = 40
    x = rng.standard_normal((n, 3))
    a = np.r_[np.ones(20), np.zeros(20)]
    # make every covariate exactly orthogonal to W * r by centering within arms
    x -= np.where(a[:, None] == 1, x[a == 1].mean(0), x[a == 0].mean(0))
    ds = Dataset(2.0 * a, a, x, np.full(n, 0.5))
    reject, adj, cands = bonferroni_test(ds, StepContext.build(x), 0.05)
    assert not reject
    np.testing.assert_allclose(adj, 1.0)
    assert cands == (0, 1, 2)


def test_bonferroni_single_candidate_is_z_test(make_rct):
    ds = make_rct(1, n=100, p=1, beta=[0.3])
    step = StepContext.build(ds.x)
    reject, adj, _ = bonferroni_test(ds, step, 0.05)
    stat = RctRecipe().evaluate(ds, step)
    z = stat.stat_scaled / stat.sigma_hat
    assert adj[0] == pytest.approx(2 * stats.norm.sf(abs(z)), rel=1e-12)
    assert reject == (adj[0] <= 0.05)


def test_bonferroni_multiplies_by_candidate_count(make_rct):
    ds = make_rct(2, n=100, p=4)
    step = StepContext.build(ds.x, [1])
    _, adj, cands = bonferroni_test(ds, step, 0.05)
    stat = RctRecipe().evaluate(ds, step)
    sd = np.sqrt(np.diag(stat.influence.covariance())) / stat.influence.denoms
    raw = 2 * stats.norm.sf(np.abs(np.sqrt(ds.n) * np.array([c.coef for c in stat.candidates]) / sd))
    np.testing.assert_allclose(adj, np.minimum(3 * raw, 1.0), rtol=1e-12)
    assert cands == (0, 2, 3)


def test_bonferroni_null_level():
    rep = mc_study(canonical("N1"), default_methods(["bonf"], BootstrapPlan(), 1), 2000, seed=5)
    r = rep.rate("bonf", 1)
    assert r <= 0.05 + 2 * np.sqrt(0.05 * 0.95 / 2000)


def _rss(d, y):
    beta = np.linalg.solve(d.T @ d, d.T @ y)
    e = y - d @ beta
    return e @ e


@pytest.mark.parametrize("j_set", [(), (1,)])
def test_lrt_matches_textbook_f(j_set):
    rng = np.random.default_rng(3)
    n, p = 50, 2
    x = rng.standard_normal((n, p))
    a = (rng.random(n) < 0.5).astype(float)
    y = 1 + x @ [0.5, -0.3] + 0.4 * a + rng.standard_normal(n)
    ds = Dataset(y, a, x, np.full(n, 0.5))
    jc = [k for k in range(p) if k not in j_set]
    base = np.column_stack([np.ones(n), x, a] + [a * x[:, k] for k in j_set])
    full = np.column_stack([base] + [a * x[:, k] for k in jc])
    rss0, rss1 = _rss(base, y), _rss(full, y)
    df1, df2 = len(jc), n - 2 * p - 2
    f = ((rss0 - rss1) / df1) / (rss1 / df2)
    reject, pval = lrt_test(ds, StepContext.build(x, j_set), 0.05)
    assert pval == pytest.approx(stats.f.sf(f, df1, df2), rel=1e-10)
    assert reject == (pval <= 0.05)


def test_lrt_copied_columns_infeasible():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((40, 2))
    x = np.column_stack([x, x[:, 0]])
    a = (rng.random(40) < 0.5).astype(float)
    ds = Dataset(rng.standard_normal(40), a, x, np.full(40, 0.5))
    with pytest.raises(InfeasibleLRT):
        lrt_test(ds, StepContext.build(x, [0]), 0.05)


def test_lrt_too_few_rows():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((10, 4))
    ds = Dataset(rng.standard_normal(10), np.r_[np.ones(5), np.zeros(5)], x, np.full(10, 0.5))
    with pytest.raises(InfeasibleLRT):
        lrt_test(ds, StepContext.build(x), 0.05)


def test_lrt_null_pvalues_uniform():
    scen = canonical("N1", n=100, p=5)
    pvals = []
    for rep in range(2000):
        ds = generate(scen, stream(9, rep))
        pvals.append(lrt_test(ds, StepContext.build(ds.x), 0.05)[1])
    assert stats.kstest(pvals, "uniform").pvalue > 0.01


def test_competitor_step_picks(make_rct):
    ds = make_rct(6, n=150, p=3, beta=[0, 1.0, 0])
    step = StepContext.build(ds.x)
    k, coef, cal = competitor_step(ds, step, RctRecipe(), "bonf", 0.05)
    assert k == 1 and cal.method == "bonf" and cal.m_hat == 150
    k, coef, cal = competitor_step(ds, step, RctRecipe(), "lrt", 0.05)
    assert k == RctRecipe().evaluate(ds, step).k
    with pytest.raises(DataError):
        competitor_step(ds, step, RctRecipe(), "wald", 0.05)
