"""Per-candidate interaction statistics.

Two estimators share one selection rule:

* RCT path: with ``W = A - q0`` and ``r = Y - phi_hat(X)``, each candidate is
  projected on ``[1, X_J]`` under weights ``W^2`` and its marginal
  coefficient ``P_n[W r U] / P_n[(W U)^2]`` is computed; the candidate with
  the smallest residual sum of squares wins.
* Doubly robust path: with ``W_hat = A - q_hat`` and ``r = Y - h_hat``, the
  projection uses weights ``A W_hat`` and the G-estimate
  ``P_n[W_hat r L] / P_n[A W_hat L^2]`` is computed; the candidate with the
  largest ``psi^2 * denom`` wins (stored negated so selection is argmin).

The scalar functions mirror the formulas one candidate at a time and are
what the tests check against brute force.  :func:`rct_table` and
:func:`dr_table` do the same for all candidates at once.  Bootstrap
resamples are evaluated from count-weighted moments (:func:`moment_table`),
which avoids materializing resampled rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import nuisance as nu
from .data import Dataset, StepContext, compute_w, design
from .errors import AllDegenerate, DataError, DegenerateCandidate, SingularProjection

DEGENERATE_REL = 1e-12
SINGULAR_RCOND = 1e-12


@dataclass(frozen=True)
class CandidateStat:
    k: int
    coef: float
    denom: float
    criterion: float
    projection: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


@dataclass(frozen=True)
class InfluenceMatrix:
    e: np.ndarray
    denoms: np.ndarray
    candidates: tuple[int, ...] = ()

    def covariance(self) -> np.ndarray:
        """Centered sample covariance (divisor n) of the influence columns."""
        ec = self.e - self.e.mean(axis=0)
        return ec.T @ ec / self.e.shape[0]


def _degenerate_threshold(weight_mass, xk):
    return DEGENERATE_REL * weight_mass * max(float(np.mean(np.asarray(xk) ** 2)), 1e-300)


def center_covariate(xk, w) -> np.ndarray:
    xk = np.asarray(xk, dtype=float)
    w2 = np.asarray(w, dtype=float) ** 2
    mass = w2.mean()
    if not mass > 0:
        raise DataError("zero weight mass; W is identically zero")
    return xk - (w2 * xk).mean() / mass


def marginal_theta(r, w, xk, k: int = 0) -> CandidateStat:
    """Marginal interaction coefficient of one candidate.

    ``coef`` uses the weighted-centered covariate; ``criterion`` is the mean
    squared residual of ``r`` regressed on ``(W, W xk)``.
    """
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    xc = center_covariate(xk, w)
    wx = w * xc
    denom = float(np.mean(wx**2))
    w2 = float(np.mean(w**2))
    if denom < _degenerate_threshold(w2, xk):
        raise DegenerateCandidate(f"candidate {k} has no weighted variation")
    coef = float(np.mean(w * r * xc)) / denom
    crit = float(np.mean(r**2) - np.mean(w * r) ** 2 / w2 - coef**2 * denom)
    return CandidateStat(k, coef, denom, crit)


def select_candidate(stats: Sequence[CandidateStat]) -> int:
    """Position of the smallest criterion; exact ties go to the earliest entry."""
    if not stats:
        raise AllDegenerate("no non-degenerate candidate")
    crit = np.array([s.criterion for s in stats])
    return int(np.argmin(crit))


def weighted_projection(xk, xtilde, weights):
    """Weighted least-squares projection of ``xk`` on the columns of ``xtilde``.

    Returns ``(coefs, residual)`` with ``P_n[weights * xtilde * residual] = 0``.
    """
    xk = np.asarray(xk, dtype=float)
    xt = np.asarray(xtilde, dtype=float)
    wt = np.asarray(weights, dtype=float)
    if np.any(wt < 0):
        raise DataError("projection weights must be non-negative")
    gram = (xt * wt[:, None]).T @ xt / xt.shape[0]
    _check_gram(gram)
    coefs = np.linalg.solve(gram, (xt * wt[:, None]).T @ xk / xt.shape[0])
    return coefs, xk - xt @ coefs


def _check_gram(gram):
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= SINGULAR_RCOND * max(ev[-1], 1e-300):
        raise SingularProjection("weighted Gram matrix of [1, X_J] is singular")


def dr_psi(r, wtil, a, lk, k: int = 0) -> CandidateStat:
    """G-estimate of the interaction coefficient for one projected candidate."""
    r, wtil, a, lk = (np.asarray(v, dtype=float) for v in (r, wtil, a, lk))
    denom = float(np.mean(a * wtil * lk**2))
    if not denom > DEGENERATE_REL * float(np.mean(a * wtil)) * max(float(np.mean(lk**2)), 1e-300) or denom <= 0:
        raise DegenerateCandidate(f"candidate {k} has no variation among treated units")
    coef = float(np.mean(wtil * r * lk)) / denom
    return CandidateStat(k, coef, denom, -(coef**2) * denom)


def influence_rct(xtilde, r, w, u, coefs: Sequence[CandidateStat]) -> InfluenceMatrix:
    """Per-observation influence values of the marginal coefficients.

    Column ``k`` is ``W U_k {r - coef_k W U_k - W xt' G^-1 P_n[W xt r]}`` with
    ``G = P_n[W^2 xt xt']``; the last term is the projection of ``r`` on
    ``W * [1, X_J]``.
    """
    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    xt = xtilde.xtilde if isinstance(xtilde, StepContext) else np.asarray(xtilde, dtype=float)
    n = r.shape[0]
    gram = (xt * (w**2)[:, None]).T @ xt / n
    _check_gram(gram)
    base_coef = np.linalg.solve(gram, (xt * w[:, None]).T @ r / n)
    base = w * (xt @ base_coef)
    wu = w[:, None] * u
    c = np.array([s.coef for s in coefs])
    e = wu * (r[:, None] - c * wu - base[:, None])
    return InfluenceMatrix(e, np.array([s.denom for s in coefs]), tuple(s.k for s in coefs))


# ---------------------------------------------------------------------------
# vectorized tables


def project_all(xc, xtilde, weights):
    """Project every column of ``xc`` on ``xtilde``; stacked inputs allowed.

    Returns ``(coefs (..., q, K), residuals (..., n, K), singular (...))``.
    """
    n = xc.shape[-2]
    xw = xtilde * weights[..., None]
    xwt = np.swapaxes(xw, -1, -2)
    gram = xwt @ xtilde / n
    ev = np.linalg.eigvalsh(gram)
    singular = ev[..., 0] <= SINGULAR_RCOND * np.maximum(ev[..., -1], 1e-300)
    q = gram.shape[-1]
    safe = np.where(singular[..., None, None], np.eye(q), gram)
    rhs = xwt @ xc / n
    coefs = np.linalg.solve(safe, rhs)
    resid = xc - xtilde @ coefs
    return coefs, resid, singular


def _vsum(v, mat):
    return (v[..., None, :] @ mat)[..., 0, :]


def _degenerate_mask(denom, weight_mass, xc):
    scale = np.maximum(np.mean(xc**2, axis=-2), 1e-300)
    return denom < DEGENERATE_REL * weight_mass[..., None] * scale


def rct_table(r, w, u, xraw=None):
    """Coefficients, denominators and criteria for all projected candidates.

    ``u`` is ``(..., n, K)``.  Returns ``(coef, denom, crit, degenerate)``;
    degenerate candidates carry ``crit = inf``.
    """
    denom = _vsum(w**2, u**2) / u.shape[-2]
    w2 = np.mean(w**2, axis=-1)
    degenerate = _degenerate_mask(denom, w2, u if xraw is None else xraw)
    safe = np.where(degenerate, 1.0, denom)
    coef = _vsum(w * r, u) / r.shape[-1] / safe
    base = np.mean(r**2, axis=-1) - np.mean(w * r, axis=-1) ** 2 / w2
    crit = base[..., None] - coef**2 * denom
    crit = np.where(degenerate, np.inf, crit)
    coef = np.where(degenerate, 0.0, coef)
    return coef, denom, crit, degenerate


def dr_table(r, wtil, a, lmat, xraw=None):
    """G-estimates, denominators and negated criteria for all candidates."""
    aw = a * wtil
    denom = _vsum(aw, lmat**2) / r.shape[-1]
    mass = np.mean(aw, axis=-1)
    degenerate = _degenerate_mask(denom, mass, lmat if xraw is None else xraw) | (denom <= 0)
    safe = np.where(degenerate, 1.0, denom)
    coef = _vsum(wtil * r, lmat) / r.shape[-1] / safe
    crit = np.where(degenerate, np.inf, -(coef**2) * denom)
    coef = np.where(degenerate, 0.0, coef)
    return coef, denom, crit, degenerate


def moment_table(S_proj, S_num, rho, jt, kc, S0=None):
    """Candidate numerators and denominators from stacked weighted moments.

    ``S_proj`` holds the moments under the projection weights and ``S_num``
    those under the numerator weights, both ``(B, q, q)`` over a row basis
    whose first column is the intercept.  ``rho`` gives the residual ``r`` as
    a linear combination of the basis, ``jt`` indexes ``[1, X_J]`` and ``kc``
    the candidates.  Returns ``(num, denom, degenerate, singular)`` as sums.
    """
    jt = list(jt)
    kc = list(kc)
    gram = S_proj[:, jt][:, :, jt]
    ev = np.linalg.eigvalsh(gram)
    singular = ev[:, 0] <= SINGULAR_RCOND * np.maximum(ev[:, -1], 1e-300)
    safe = np.where(singular[:, None, None], np.eye(len(jt)), gram)
    gam = np.linalg.solve(safe, S_proj[:, jt][:, :, kc])
    umat = np.zeros((S_proj.shape[0], S_proj.shape[1], len(kc)))
    umat[:, kc, np.arange(len(kc))] = 1.0
    umat[:, jt, :] -= gam
    denom = np.einsum("bqk,bqk->bk", umat, S_proj @ umat)
    num = np.einsum("bq,bqk->bk", rho, S_num @ umat)
    mass = S_proj[:, 0, 0]
    degenerate = denom <= 0
    if S0 is not None:
        tot = np.maximum(S0[:, 0, 0], 1e-300)
        scale = np.maximum(np.diagonal(S0, axis1=-2, axis2=-1)[:, kc] / tot[:, None], 1e-300)
        degenerate |= denom < DEGENERATE_REL * mass[:, None] * scale
    return num, denom, degenerate, singular


def counts_from_rows(rows: np.ndarray, n: int) -> np.ndarray:
    """Multinomial count matrix ``(B, n)`` from a ``(B, m)`` index matrix."""
    b = rows.shape[0]
    flat = (rows + n * np.arange(b)[:, None]).ravel()
    return np.bincount(flat, minlength=b * n).reshape(b, n).astype(float)


# ---------------------------------------------------------------------------
# statistic recipes


@dataclass(frozen=True, eq=False)
class StepStatistic:
    """Full-data evaluation of one sequential step."""

    k: int
    coef: float
    stat_scaled: float
    sigma_hat: float
    n: int
    candidates: tuple[CandidateStat, ...]
    influence: InfluenceMatrix | None = None
    position: int = 0

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def coef_by_position(self, jc_set) -> np.ndarray:
        """Full-data coefficients aligned with ``jc_set``; degenerate candidates get 0."""
        lookup = {c.k: c.coef for c in self.candidates}
        return np.array([lookup.get(k, 0.0) for k in jc_set])


class RctRecipe:
    """Known-propensity recipe; ``phi`` is refit on every resample.

    The default outcome model is the sample mean of ``Y``.  Richer models
    lower the variance of the statistic, but refitting many parameters on
    small resamples narrows the m-out-of-n bootstrap law and makes the
    calibrated test liberal.
    """

    kind = "rct"

    def __init__(self, phi: nu.NuisanceSpec | None = None):
        self.phi = phi or nu.NuisanceSpec("constant-mean")
        self._fits: dict = {}

    def fit_outcome(self, dataset: Dataset) -> nu.FittedNuisance:
        key = id(dataset)
        if key not in self._fits:
            self._fits = {key: (dataset, nu.fit(self.phi, dataset.x, dataset.y))}
        return self._fits[key][1]

    def residuals(self, dataset: Dataset):
        if dataset.q0 is None:
            raise DataError("the rct recipe needs a known propensity column")
        w = compute_w(dataset.a, dataset.q0)
        r = dataset.y - nu.predict(self.fit_outcome(dataset), dataset.x)
        return w, r

    def evaluate(self, dataset: Dataset, step: StepContext) -> StepStatistic:
        w, r = self.residuals(dataset)
        jc = list(step.jc_set)
        xc = dataset.x[:, jc]
        xt = design(dataset.x, step.j_set)
        _, u, singular = project_all(xc, xt, w**2)
        if singular:
            raise SingularProjection("weighted Gram matrix of [1, X_J] is singular")
        coef, denom, crit, degenerate = rct_table(r, w, u, xc)
        stats = [
            CandidateStat(k, float(coef[i]), float(denom[i]), float(crit[i]))
            for i, k in enumerate(jc) if not degenerate[i]
        ]
        keep = [i for i in range(len(jc)) if not degenerate[i]]
        if not stats:
            raise AllDegenerate("every remaining candidate is degenerate")
        pos = select_candidate(stats)
        infl = influence_rct(xt, r, w, u[:, keep], stats)
        cov = infl.covariance()
        sel = stats[pos]
        sigma = float(np.sqrt(max(cov[pos, pos], 0.0)) / sel.denom)
        n = dataset.n
        return StepStatistic(sel.k, sel.coef, float(np.sqrt(n) * sel.coef), sigma, n, tuple(stats), infl, pos)

    def prepare(self, dataset: Dataset):
        """Cache the full-data outcome fit and the moment basis for resamples."""
        if dataset.q0 is None:
            raise DataError("the rct recipe needs a known propensity column")
        self.phi_ref = self.fit_outcome(dataset)
        basis, _, _ = nu.linear_basis(dataset.x, dataset.y)
        w = compute_w(dataset.a, dataset.q0)
        self._batch = (dataset, basis, w)
        return self

    def evaluate_counts(self, dataset: Dataset, step: StepContext, counts: np.ndarray):
        """Selected coefficient per row of resample counts.

        Returns ``(coef, pos, bad)`` where ``pos`` indexes ``step.jc_set``.
        """
        if getattr(self, "_batch", (None,))[0] is not dataset:
            self.prepare(dataset)
        _, basis, w = self._batch
        S0 = basis.moments(counts)
        S1 = basis.moments(counts * w)
        S2 = basis.moments(counts * w**2)
        icpt, beta, bad = nu.linear_refit_moments(self.phi_ref, S0)
        rho = np.concatenate([-icpt[:, None], -beta, np.ones((counts.shape[0], 1))], axis=1)
        jt = [0] + [1 + j for j in step.j_set]
        kc = [1 + k for k in step.jc_set]
        num, denom, degenerate, singular = moment_table(S2, S1, rho, jt, kc, S0)
        safe = np.where(degenerate, 1.0, denom)
        coef = np.where(degenerate, 0.0, num / safe)
        rr = np.einsum("bq,bqr,br->b", rho, S0, rho)
        wr = np.einsum("bq,bq->b", rho, S1[:, :, 0])
        crit = (rr - wr**2 / S2[:, 0, 0])[:, None] - coef**2 * denom
        crit = np.where(degenerate, np.inf, crit)
        pos = np.argmin(crit, axis=1)
        chosen = coef[np.arange(coef.shape[0]), pos]
        return chosen, pos, bad | singular | np.all(degenerate, axis=1)


class DrRecipe:
    """Doubly robust recipe: ``q_hat`` and ``h_hat`` refit on every resample.

    ``h_fit="controls"`` fits ``h_hat`` on the ``A = 0`` rows;
    ``h_fit="all"`` regresses ``Y`` on ``(X, A)`` over all rows and predicts
    at ``A = 0``.
    """

    kind = "doubly-robust"

    def __init__(self, h: nu.NuisanceSpec | None = None, q: nu.NuisanceSpec | None = None,
                 h_fit: str = "controls", q_fallback_lam: float = 1.0):
        self.h = h or nu.NuisanceSpec("adaptive-lasso")
        self.q = q or nu.NuisanceSpec("logistic-adaptive-lasso")
        if h_fit not in ("controls", "all"):
            raise DataError(f"h_fit must be 'controls' or 'all', got {h_fit!r}")
        self.h_fit = h_fit
        self.q_fallback_lam = q_fallback_lam
        self._cache: dict = {}

    def _fit_q(self, dataset):
        try:
            return nu.fit(self.q, dataset.x, dataset.a)
        except nu.QuasiSeparation:
            return nu.fit(nu.NuisanceSpec("logistic-ridge", self.q_fallback_lam), dataset.x, dataset.a)

    def _fit_h(self, dataset):
        if self.h_fit == "controls":
            return nu.fit(self.h, dataset.x, dataset.y, sample_weight=1.0 - dataset.a)
        return nu.fit(self.h, np.column_stack([dataset.x, dataset.a]), dataset.y)

    def nuisance_fits(self, dataset: Dataset):
        key = id(dataset)
        if key not in self._cache:
            self._cache = {key: (dataset, self._fit_q(dataset), self._fit_h(dataset))}
        return self._cache[key][1:]

    def prepare(self, dataset: Dataset):
        """Cache full-data fits and the shared designs used by resample refits."""
        self.q_ref, self.h_ref = self.nuisance_fits(dataset)
        xs = dataset.x - dataset.x.mean(axis=0)
        basis = nu.RowBasis(np.column_stack([np.ones(dataset.n), xs, dataset.a, dataset.y - dataset.y.mean()]))
        self._batch = (dataset, basis, nu.LogisticDesign(dataset.x))
        return self

    def residuals(self, dataset: Dataset):
        qf, hf = self.nuisance_fits(dataset)
        qhat = nu.predict(qf, dataset.x)
        if self.h_fit == "controls":
            hhat = nu.predict(hf, dataset.x)
        else:
            hhat = nu.predict(hf, np.column_stack([dataset.x, np.zeros(dataset.n)]))
        return dataset.a - qhat, dataset.y - hhat

    def evaluate(self, dataset: Dataset, step: StepContext) -> StepStatistic:
        wtil, r = self.residuals(dataset)
        a = dataset.a
        jc = list(step.jc_set)
        xc = dataset.x[:, jc]
        xt = design(dataset.x, step.j_set)
        weights = a * wtil
        _, lmat, singular = project_all(xc, xt, weights)
        if singular:
            raise SingularProjection("weighted Gram matrix of [1, X_J] is singular")
        coef, denom, crit, degenerate = dr_table(r, wtil, a, lmat, xc)
        keep = [i for i in range(len(jc)) if not degenerate[i]]
        stats = [CandidateStat(jc[i], float(coef[i]), float(denom[i]), float(crit[i])) for i in keep]
        if not stats:
            raise AllDegenerate("every remaining candidate is degenerate")
        pos = select_candidate(stats)
        sel = stats[pos]
        lk = lmat[:, keep[pos]]
        n = dataset.n
        # residual of the estimating equation with the selected candidate
        mjj = (xt * weights[:, None]).T @ xt / n
        base = np.linalg.solve(mjj, (xt * wtil[:, None]).T @ r / n)
        resid = r - a * (xt @ base + sel.coef * lk)
        contrib = wtil * lk * resid / sel.denom
        sigma = float(np.std(contrib))
        return StepStatistic(sel.k, sel.coef, float(np.sqrt(n) * sel.coef), sigma, n, tuple(stats), None, pos)

    def evaluate_counts(self, dataset: Dataset, step: StepContext, counts: np.ndarray):
        """Selected G-estimate per row of resample counts; ``(coef, pos, bad)``."""
        if getattr(self, "_batch", (None,))[0] is not dataset:
            self.prepare(dataset)
        _, basis, ld = self._batch
        p = dataset.p
        a = dataset.a
        icpt_q, coef_q, bad = nu.logistic_refit_weights(self.q_ref, ld, a, counts)
        qhat = np.clip(expit(icpt_q[:, None] + coef_q @ dataset.x.T), nu.EPS_Q, 1 - nu.EPS_Q)
        wtil = a - qhat
        S0 = basis.moments(counts)
        if self.h_fit == "controls":
            cols = list(range(p + 1)) + [p + 2]
            Mh = basis.moments(counts * (1.0 - a))[:, cols][:, :, cols]
            icpt_h, beta_h, bad_h = nu.linear_refit_moments(self.h_ref, Mh)
        else:
            icpt_h, beta_h, bad_h = nu.linear_refit_moments(self.h_ref, S0)
            beta_h = beta_h[:, :-1]
        b = counts.shape[0]
        rho = np.concatenate([-icpt_h[:, None], -beta_h, np.zeros((b, 1)), np.ones((b, 1))], axis=1)
        T1 = basis.moments(counts * a * wtil)
        T2 = basis.moments(counts * wtil)
        jt = [0] + [1 + j for j in step.j_set]
        kc = [1 + k for k in step.jc_set]
        num, denom, degenerate, singular = moment_table(T1, T2, rho, jt, kc, S0)
        safe = np.where(degenerate, 1.0, denom)
        coef = np.where(degenerate, 0.0, num / safe)
        crit = np.where(degenerate, np.inf, -(coef**2) * denom)
        pos = np.argmin(crit, axis=1)
        chosen = coef[np.arange(b), pos]
        return chosen, pos, bad | bad_h | singular | np.all(degenerate, axis=1)
