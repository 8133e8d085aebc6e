"""Reference tests used as comparators in simulation studies.

``bonferroni_test`` runs one z-test per remaining candidate with the plug-in
sandwich variance and a Bonferroni correction.  ``lrt_test`` is the classical
nested-model F-test for the remaining interaction columns in a fully linear
working model.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import f as f_dist
from scipy.stats import norm

from .calibration import CalibrationResult
from .core import RctRecipe
from .data import Dataset, StepContext, design
from .errors import DataError, InfeasibleLRT

RANK_TOL = 1e-10
ZERO_TOL = 1e-10


def bonferroni_test(dataset: Dataset, step: StepContext, alpha: float, recipe: RctRecipe | None = None):
    """Return ``(reject, adjusted_p, candidates)``.

    ``adjusted_p`` is aligned with ``candidates``, the non-degenerate indices
    of ``step.jc_set``.
    """
    recipe = recipe or RctRecipe()
    if not isinstance(recipe, RctRecipe):
        raise DataError("the Bonferroni comparator needs the rct recipe")
    stat = recipe.evaluate(dataset, step)
    infl = stat.influence
    sd = np.sqrt(np.maximum(np.diag(infl.covariance()), 0.0)) / infl.denoms
    coef = np.array([c.coef for c in stat.candidates])
    # round-off floor on the coefficient scale; an exact fit leaves coef and
    # sd both at noise level, which must read as z = 0 rather than 0/0
    _, r = recipe.residuals(dataset)
    floor = ZERO_TOL * np.sqrt(np.mean(r**2) / infl.denoms)
    coef = np.where(np.abs(coef) <= floor, 0.0, coef)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > floor, np.sqrt(dataset.n) * coef / sd, 0.0)
    raw = 2 * norm.sf(np.abs(z))
    adjusted = np.minimum(raw * len(step.jc_set), 1.0)
    return bool(adjusted.min() <= alpha), adjusted, infl.candidates


def _rss(design_matrix, y):
    coef, _, rank, _ = np.linalg.lstsq(design_matrix, y, rcond=None)
    resid = y - design_matrix @ coef
    return float(resid @ resid), rank


def lrt_test(dataset: Dataset, step: StepContext, alpha: float):
    """Return ``(reject, p_value)`` for the nested F-test.

    The reduced model is ``Y ~ 1 + X + A + A X_J`` and the full model adds
    ``A X_k`` for every remaining candidate.
    """
    n, p = dataset.n, dataset.p
    df1 = len(step.jc_set)
    df2 = n - 2 * p - 2
    if df1 == 0:
        raise InfeasibleLRT("no remaining candidates")
    if df2 < 1:
        raise InfeasibleLRT(f"n={n} is too small for a full model with {2 * p + 2} columns")
    a = dataset.a[:, None]
    reduced = np.column_stack([design(dataset.x, range(p)), a, a * dataset.x[:, list(step.j_set)]])
    full = np.column_stack([reduced, a * dataset.x[:, list(step.jc_set)]])
    rss0, rank0 = _rss(reduced, dataset.y)
    rss1, rank1 = _rss(full, dataset.y)
    if rank0 < reduced.shape[1] or rank1 < full.shape[1]:
        raise InfeasibleLRT("design matrix is rank deficient; the F statistic is undefined")
    if not rss1 > RANK_TOL * max(rss0, 1e-300):
        raise InfeasibleLRT("full model interpolates the outcome")
    stat = ((rss0 - rss1) / df1) / (rss1 / df2)
    pval = float(f_dist.sf(max(stat, 0.0), df1, df2))
    return pval <= alpha, pval


def competitor_step(dataset: Dataset, step: StepContext, recipe, method: str, alpha: float):
    """One sequential step of a comparator; returns ``(k, coef, CalibrationResult)``.

    BONF moves the candidate with the smallest adjusted p-value into the
    selected set; LRT has no selection of its own and uses the recipe's
    least-squares pick.
    """
    stat = recipe.evaluate(dataset, step)
    n = dataset.n
    if method == "bonf":
        _, adjusted, cands = bonferroni_test(dataset, step, alpha, recipe)
        pos = int(np.argmin(adjusted))
        k = cands[pos]
        coef = stat.candidates[pos].coef
        pval = float(adjusted[pos])
        sd = float(np.sqrt(max(stat.influence.covariance()[pos, pos], 0.0)) / stat.influence.denoms[pos])
    elif method == "lrt":
        _, pval = lrt_test(dataset, step, alpha)
        k, coef, sd = stat.k, stat.coef, stat.sigma_hat
    else:
        raise DataError(f"unknown comparator {method!r}")
    cal = CalibrationResult(float(np.sqrt(n) * coef), sd, 0, n, pval, method, 0)
    return k, coef, cal
