"""P-values for a selected interaction statistic.

Three calibrations are offered:

``null``
    Sample the plug-in Gaussian null law: draw ``Z ~ N(0, Sigma_hat)``, pick
    ``K = argmax Z_k^2 / d_k`` and record ``Z_K / d_K``.  RCT recipes only.
``mboot``
    Adaptive m-out-of-n bootstrap.  A crude pre-test decides whether the
    problem looks regular (use ``m = n``) or not (choose ``m`` on a
    geometric grid by minimizing the KS distance between successive
    bootstrap laws).
``nboot`` / ``bsboot``
    Plain n-out-of-n bootstrap, and the grid choice without the pre-test.

Bootstrap replicates are centered, by default, at the full-data coefficient
of the covariate the replicate itself selected.  Under a unique active
covariate this is the full-data estimate; under the null it removes the
``sqrt(m/n)`` selection bias that the fixed centering carries at moderate
``n``.  ``BootstrapPlan(centering="fixed")`` restores the scalar centering.

All bootstrap p-values are two-sided and add-one smoothed.  Random streams
are keyed by ``(seed, *stream_key, step, block)``, where a block is one
resample size, so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy.stats import norm

from .core import InfluenceMatrix, StepStatistic, counts_from_rows
from .data import Dataset, StepContext
from .errors import (
    DataError,
    GridTooShort,
    NonPSDCovariance,
    TooManyDegenerateReplicates,
    UnsupportedCalibration,
)

Method = Literal["null", "mboot", "nboot", "bsboot"]
METHODS = ("null", "mboot", "nboot", "bsboot")
NULL_BLOCK = 1 << 20
MAX_REDRAW_ROUNDS = 50
CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class BootstrapPlan:
    B: int = 1000
    d: float = 0.8
    c: float = 2.0
    alpha: float = 0.05
    m_floor: int | None = None
    M_null: int = 10000
    seed: int = 0
    pretest_p: Literal["candidates", "original"] = "candidates"
    centering: Literal["selected", "fixed"] = "selected"
    workers: int = 1
    stream_key: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 < self.d < 1:
            raise DataError("d must lie in (0, 1)")
        if self.B < 100:
            raise DataError("B must be at least 100")
        if not 0 < self.alpha < 1:
            raise DataError("alpha must lie in (0, 1)")
        if not self.c > 0:
            raise DataError("c must be positive")
        if self.M_null < 1:
            raise DataError("M_null must be positive")
        if self.m_floor is not None and self.m_floor < 1:
            raise DataError("m_floor must be positive")
        if self.pretest_p not in ("candidates", "original"):
            raise DataError("pretest_p must be 'candidates' or 'original'")
        if self.centering not in ("selected", "fixed"):
            raise DataError("centering must be 'selected' or 'fixed'")
        if self.workers < 1:
            raise DataError("workers must be positive")

    def floor_for(self, n: int) -> int:
        floor = self.m_floor if self.m_floor is not None else max(30, math.ceil(math.sqrt(n)))
        return min(floor, n)


@dataclass(frozen=True)
class CalibrationResult:
    stat_scaled: float
    sigma_hat: float
    r_hat: int
    m_hat: int
    p_value: float
    method: str
    draws_used: int
    ks_path: tuple[tuple[int, float], ...] = ()
    redrawn: int = 0
    clipped_mass: float = 0.0


# ---------------------------------------------------------------------------
# small pieces


def pretest_threshold(n: int, p_candidates: int, alpha: float, c: float) -> float:
    return max(math.sqrt(c * math.log(n)), float(norm.isf(alpha / (2 * p_candidates))))


def pretest_r(stat_scaled: float, sigma_hat: float, n: int, p_candidates: int, plan: BootstrapPlan) -> int:
    """1 when the standardized statistic falls below the regularity threshold."""
    if not sigma_hat > 0:
        raise DataError("sigma_hat must be positive")
    ratio = abs(stat_scaled / sigma_hat)
    return int(ratio < pretest_threshold(n, p_candidates, plan.alpha, plan.c))


def m_grid(n: int, d: float, m_floor: int) -> list[int]:
    """``ceil(d^j n)`` for j = 0, 1, ... while at least ``m_floor``; duplicates dropped."""
    grid: list[int] = []
    j = 0
    while True:
        m = math.ceil(round(d**j * n, 9))
        if m < m_floor:
            break
        if not grid or m != grid[-1]:
            grid.append(m)
        if m <= 1:
            break
        j += 1
    return grid


def ks_distance(a, b) -> float:
    """Sup-norm distance between the empirical CDFs of ``a`` and ``b``."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / a.size
    fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def bickel_sakov_select(grid: Sequence[int], draws: Sequence[np.ndarray]):
    """Grid point minimizing the KS distance to its successor; ties go to larger m."""
    if len(grid) < 2:
        raise GridTooShort(f"need at least 2 grid points, got {len(grid)}")
    path = tuple((int(grid[j]), ks_distance(draws[j], draws[j + 1])) for j in range(len(grid) - 1))
    dists = np.array([dist for _, dist in path])
    return int(grid[int(np.argmin(dists))]), path


def choose_m(r_hat: int, n: int, m_hat_bs: int) -> int:
    return (1 - r_hat) * n + r_hat * m_hat_bs


def pvalue_from_draws(stat_scaled: float, draws) -> float:
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise DataError("no draws")
    return float((1 + np.count_nonzero(np.abs(draws) >= abs(stat_scaled))) / (draws.size + 1))


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


# ---------------------------------------------------------------------------
# resampling


def resample(dataset: Dataset, m: int, rng: np.random.Generator) -> Dataset:
    """``m`` rows drawn uniformly with replacement (no row-count validation)."""
    if not 1 <= m <= dataset.n:
        raise DataError(f"resample size {m} outside [1, {dataset.n}]")
    return dataset.take(rng.integers(0, dataset.n, size=m))


def _evaluate_rows(dataset: Dataset, rows: np.ndarray, step: StepContext, recipe):
    n = dataset.n
    chunk = max(1, CHUNK_ELEMENTS // max(n, dataset.p**2, 1))
    coefs, positions, bads = [], [], []
    for lo in range(0, rows.shape[0], chunk):
        counts = counts_from_rows(rows[lo:lo + chunk], n)
        coef, pos, bad = recipe.evaluate_counts(dataset, step, counts)
        coefs.append(coef)
        positions.append(pos)
        bads.append(bad | ~np.isfinite(coef))
    return np.concatenate(coefs), np.concatenate(positions), np.concatenate(bads)


def bootstrap_draws(dataset: Dataset, step: StepContext, recipe, m: int, B: int, rng: np.random.Generator,
                    center=None, return_redrawn: bool = False, scale=None):
    """``sqrt(m) * (coef*_m - center)`` for ``B`` resamples of size ``m``.

    The whole recipe (nuisance refits, selection, coefficient) is rerun on
    each resample.  ``center`` is either the full-data selected coefficient
    (a scalar) or a vector of full-data coefficients aligned with
    ``step.jc_set``, in which case each replicate is centered at the
    full-data coefficient of the covariate it selected.  ``None`` means the
    scalar full-data estimate.  ``scale``, aligned with ``step.jc_set``,
    multiplies each draw by the scale of the covariate it selected (see
    :func:`candidate_scales`).  Failed replicates are redrawn from the same
    stream.
    """
    if center is None:
        center = recipe.evaluate(dataset, step).coef
    recipe.prepare(dataset)
    rows = rng.integers(0, dataset.n, size=(B, m))
    coef, pos, bad = _evaluate_rows(dataset, rows, step, recipe)
    redrawn = int(bad.sum())
    if redrawn > 0.1 * B:
        raise TooManyDegenerateReplicates(f"{redrawn} of {B} replicates failed at m={m}")
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > MAX_REDRAW_ROUNDS:
            raise TooManyDegenerateReplicates(f"replicates still failing after {MAX_REDRAW_ROUNDS} redraws")
        which = np.flatnonzero(bad)
        new_rows = rng.integers(0, dataset.n, size=(which.size, m))
        coef[which], pos[which], bad[which] = _evaluate_rows(dataset, new_rows, step, recipe)
    center = np.asarray(center, dtype=float)
    offset = center[pos] if center.ndim else center
    draws = math.sqrt(m) * (coef - offset)
    if scale is not None:
        draws = draws * np.asarray(scale, dtype=float)[pos]
    return (draws, redrawn) if return_redrawn else draws


# ---------------------------------------------------------------------------
# null sampling


def null_factor(cov: np.ndarray):
    """Symmetric square root ``V sqrt(L) V'`` with eigenvalues clipped at zero.

    Unlike ``V sqrt(L)`` it does not depend on the eigenvector basis, so
    nearly equal covariances give nearly equal draws.

    Returns ``(factor, clipped_fraction)`` where the fraction is the trace
    mass removed by clipping.
    """
    cov = (cov + cov.T) / 2
    vals, vecs = np.linalg.eigh(cov)
    top = max(float(vals.max()), 0.0)
    clipped = np.where(vals > 1e-10 * top, vals, 0.0)
    neg = float(-vals[vals < 0].sum())
    trace = float(np.abs(vals).sum())
    frac = neg / trace if trace > 0 else 0.0
    if frac > 0.01:
        raise NonPSDCovariance(f"clipping removes {frac:.2%} of the covariance trace")
    return (vecs * np.sqrt(clipped)) @ vecs.T, frac


def sample_null(influence: InfluenceMatrix, M_null: int, rng: np.random.Generator, return_clipped: bool = False,
                scale=None):
    """Draws of ``s_K Z_K / d_K`` with ``Z ~ N(0, Sigma_hat)`` and ``K = argmax Z_k^2 / d_k``.

    The Gaussian vector is sampled directly on the ``s_k Z_k / d_k`` scale,
    whose covariance does not change when a covariate is rescaled.  ``scale``
    defaults to ones, which gives plain ``Z_K / d_K``.
    """
    d = np.asarray(influence.denoms, dtype=float)
    if np.any(d <= 0):
        raise DataError("influence denominators must be positive")
    s = np.ones_like(d) if scale is None else np.asarray(scale, dtype=float)
    ratio = s / d
    factor, frac = null_factor(influence.covariance() * np.outer(ratio, ratio))
    t = rng.standard_normal((M_null, d.size)) @ factor.T
    pick = np.argmax(t**2 * (d / s**2), axis=1)
    draws = t[np.arange(M_null), pick]
    return (draws, frac) if return_clipped else draws


def candidate_scales(dataset: Dataset, columns) -> np.ndarray:
    """Full-data sd of each candidate column (1 for a constant column).

    Statistic and draws are compared after multiplying by the scale of the
    covariate they refer to.  Without it, a replicate that selects another
    covariate is measured in that covariate's units and the p-value would
    move when a single covariate is rescaled.
    """
    s = dataset.x[:, list(columns)].std(axis=0)
    return np.where(s > 0, s, 1.0)


# ---------------------------------------------------------------------------
# driver for one step


def _grid_draws(dataset, step, recipe, grid, plan, step_index, center, indices, scale):
    def one(j):
        rng = stream(plan.seed, *plan.stream_key, step_index, j)
        return bootstrap_draws(dataset, step, recipe, grid[j], plan.B, rng, center, return_redrawn=True,
                               scale=scale)

    recipe.prepare(dataset)
    if plan.workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=plan.workers) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(j) for j in indices]
    return dict(zip(indices, results))


def calibrate_step(dataset: Dataset, step: StepContext, recipe, method: Method, plan: BootstrapPlan,
                   stat: StepStatistic | None = None, step_index: int = 0) -> CalibrationResult:
    """P-value for the selected candidate of ``step``."""
    if method not in METHODS:
        raise DataError(f"unknown calibration method {method!r}")
    if stat is None:
        stat = recipe.evaluate(dataset, step)
    n = dataset.n
    # statistic and draws are compared on the per-covariate standardized scale
    observed = stat.stat_scaled * float(candidate_scales(dataset, [stat.k])[0])
    if method == "null":
        if stat.influence is None:
            raise UnsupportedCalibration(
                "null sampling needs the plug-in influence matrix; use a bootstrap method for the dr recipe"
            )
        rng = stream(plan.seed, *plan.stream_key, step_index, NULL_BLOCK)
        draws, frac = sample_null(stat.influence, plan.M_null, rng, return_clipped=True,
                                  scale=candidate_scales(dataset, stat.influence.candidates))
        return CalibrationResult(stat.stat_scaled, stat.sigma_hat, 0, n, pvalue_from_draws(observed, draws),
                                 "null", plan.M_null, clipped_mass=frac)

    p_count = stat.n_candidates if plan.pretest_p == "candidates" else dataset.p
    if method == "nboot":
        r_hat = 0
    elif method == "bsboot":
        r_hat = 1
    elif stat.sigma_hat > 0:
        r_hat = pretest_r(stat.stat_scaled, stat.sigma_hat, n, p_count, plan)
    else:
        r_hat = int(stat.stat_scaled == 0)

    center = stat.coef_by_position(step.jc_set) if plan.centering == "selected" else stat.coef
    scale = candidate_scales(dataset, step.jc_set)
    if r_hat == 0:
        draws = _grid_draws(dataset, step, recipe, [n], plan, step_index, center, [0], scale)
        d0, redrawn = draws[0]
        return CalibrationResult(stat.stat_scaled, stat.sigma_hat, 0, n, pvalue_from_draws(observed, d0),
                                 method, plan.B, redrawn=redrawn)

    grid = m_grid(n, plan.d, plan.floor_for(n))
    if len(grid) < 2:
        raise GridTooShort(f"m grid {grid} has fewer than 2 points for n={n}")
    draws = _grid_draws(dataset, step, recipe, grid, plan, step_index, center, list(range(len(grid))), scale)
    m_bs, path = bickel_sakov_select(grid, [draws[j][0] for j in range(len(grid))])
    m_hat = choose_m(r_hat, n, m_bs)
    d_m = draws[grid.index(m_hat)][0]
    redrawn = sum(draws[j][1] for j in draws)
    return CalibrationResult(stat.stat_scaled, stat.sigma_hat, r_hat, m_hat, pvalue_from_draws(observed, d_m),
                             method, plan.B * len(grid), path, redrawn)
