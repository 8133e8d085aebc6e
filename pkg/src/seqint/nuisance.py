"""Nuisance regressions: outcome means and propensity scores.

Solvers are written against row *weights* rather than row subsets: a
bootstrap resample is a vector of multinomial counts over the original
rows, a fold fit is a 0/1 weight vector, and a plain fit uses unit weights.
Linear fits only need the weighted second moments of ``(1, x, y)``, so
thousands of resamples reduce to one matrix product.  A leading batch axis
runs through every solver.

Supported families are deliberately parametric (mean, least squares,
ridge, adaptive lasso, logistic), which keeps the fitted functions inside a
Donsker class.

Penalty scales:

* ridge: ``||y - b0 - X b||^2 + lam ||b||^2`` (sum of squares);
* adaptive lasso: ``(2n)^-1 ||y - b0 - X b||^2 + lam sum_j w_j |b_j|``;
* logistic adaptive lasso: ``-n^-1 loglik + lam sum_j w_j |b_j|``;
* logistic ridge: ``-loglik + lam/2 ||b||^2``.

Slopes are penalized on standardized columns when ``standardize`` is set and
reported on the original scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import expit

from .errors import ConvergenceFailure, DataError, QuasiSeparation, SingularDesign

EPS_Q = 0.01
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
CD_TOL = 1e-7
CD_MAX_SWEEPS = 1000
SUPPORT_CHECK_EVERY = 3
ETA_BOUND = 30.0
ZERO_COEF_TOL = 1e-10

Kind = Literal[
    "constant-mean", "least-squares", "ridge", "adaptive-lasso", "logistic", "logistic-ridge",
    "logistic-adaptive-lasso",
]
KINDS = Kind.__args__


@dataclass(frozen=True)
class NuisanceSpec:
    kind: Kind = "least-squares"
    lam: float | str | None = None  # ridge: float or "gcv"; lasso: None selects, float forces
    gamma: float = 1.0
    selection: Literal["bic", "cv"] = "bic"
    folds: int = 5
    n_lambda: int = 50
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown nuisance kind {self.kind!r}")
        if isinstance(self.lam, str):
            if self.lam != "gcv":
                raise DataError(f"lam must be a number or 'gcv', got {self.lam!r}")
        elif self.lam is not None and not self.lam >= 0:
            raise DataError("lam must be >= 0")
        if not self.gamma > 0:
            raise DataError("gamma must be > 0")
        if self.selection not in ("bic", "cv") or self.folds < 2 or self.n_lambda < 2:
            raise DataError("invalid lambda selection settings")

    @property
    def link(self) -> str:
        return "logit" if self.kind.startswith("logistic") else "identity"


@dataclass(frozen=True, eq=False)
class FittedNuisance:
    spec: NuisanceSpec
    intercept: float
    coef: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    link: str
    lam: float = 0.0
    n_iter: int = 0
    tol: float = 0.0
    n_obs: float = 0
    extra: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.coef.shape[0]


# --------------------------------------------------------------------------
# weighted moments


class RowBasis:
    """Rows ``s_i`` (first column all ones) with cached outer products.

    ``moments(w)`` returns ``sum_i w[b, i] s_i s_i'`` for every row ``b`` of
    the weight matrix.
    """

    def __init__(self, cols: np.ndarray):
        self.s = np.ascontiguousarray(cols, dtype=float)
        n, q = self.s.shape
        self.q = q
        self.outer = (self.s[:, :, None] * self.s[:, None, :]).reshape(n, q * q)

    def moments(self, weights: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(weights)
        return (w @ self.outer).reshape(w.shape[:-1] + (self.q, self.q))


def linear_basis(x, y):
    """Basis ``[1, x - mean(x), y - mean(y)]`` and the two shifts."""
    mx = x.mean(axis=0)
    my = float(y.mean())
    return RowBasis(np.column_stack([np.ones(len(y)), x - mx, y - my])), mx, my


def _support_solve(H, grad, beta, pen, usable):
    """Exact minimizer on the current support and signs, where it satisfies KKT.

    ``grad`` is ``g - H beta``.  Returns ``(hit, solution)`` or ``None`` if
    the reduced systems cannot be solved as a batch.
    """
    q = beta.shape[-1]
    support = usable & ((beta != 0) | (pen == 0))
    g = grad + (H @ beta[..., None])[..., 0]
    sign = np.sign(beta)
    rhs = np.where(support, g - pen * sign, 0.0)
    eye = np.eye(q, dtype=bool)
    both = support[:, :, None] & support[:, None, :]
    Hs = np.where(both, H, np.where(eye, 1.0, 0.0))
    try:
        sol = np.linalg.solve(Hs, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return None
    sol = np.where(support, sol, 0.0)
    resid = g - (H @ sol[..., None])[..., 0]
    scale = 1.0 + np.abs(g)
    signs_ok = np.all(~support | (pen == 0) | (np.sign(sol) == sign), axis=-1)
    kkt_zero = np.all(support | ~usable | (np.abs(resid) <= pen + 1e-12 * scale), axis=-1)
    finite = np.all(np.isfinite(sol), axis=-1)
    return signs_ok & kkt_zero & finite, sol


def coordinate_descent(H, g, pen, beta=None, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS, strict=True):
    """Minimize ``b'Hb/2 - g'b + sum_j pen_j |b_j|`` for a stack of problems.

    ``pen`` may contain ``inf`` (coordinate pinned at zero) or ``0``
    (unpenalized).  Returns ``(beta, sweeps, last_change)``.  With
    ``strict=False`` problems that fail to converge are not an error and
    ``last_change`` is per problem, so callers can flag them.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    shape, q = g.shape[:-1], g.shape[-1]
    beta = np.zeros_like(g) if beta is None else np.array(beta, dtype=float, copy=True)
    H = np.broadcast_to(H, shape + (q, q)).reshape(-1, q, q)
    pen = np.broadcast_to(pen, g.shape).reshape(-1, q)
    beta = np.broadcast_to(beta, g.shape).reshape(-1, q).copy()
    g = g.reshape(-1, q)
    diag = np.diagonal(H, axis1=-2, axis2=-1)
    usable = (diag > 1e-14) & np.isfinite(pen)
    beta = np.where(usable, beta, 0.0)
    safe_diag = np.where(usable, diag, 1.0)
    pen_used = np.where(usable, pen, 0.0)
    grad = g - (H @ beta[..., None])[..., 0]
    final_change = np.full(g.shape[0], np.inf)
    # problems drop out of the working set as soon as they converge
    live = np.arange(g.shape[0])
    wH, wb, wg, wd, wp, wu = H, beta.copy(), grad, safe_diag, pen_used, usable
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        change = np.zeros(live.size)
        for j in range(q):
            old = wb[:, j]
            rho = wg[:, j] + wd[:, j] * old
            new = np.sign(rho) * np.maximum(np.abs(rho) - wp[:, j], 0.0) / wd[:, j]
            new = np.where(wu[:, j], new, 0.0)
            delta = new - old
            if np.any(delta != 0.0):
                wg -= wH[:, :, j] * delta[:, None]
                wb[:, j] = new
                np.maximum(change, np.abs(delta), out=change)
        done = change < tol
        if sweep % SUPPORT_CHECK_EVERY == 0 and not done.all():
            exact = _support_solve(wH, wg, wb, wp, wu)
            if exact is not None:
                hit, sol = exact
                hit &= ~done
                wb[hit] = sol[hit]
                change[hit] = 0.0
                done |= hit
        if done.any():
            beta[live[done]] = wb[done]
            final_change[live[done]] = change[done]
            keep = ~done
            live = live[keep]
            if live.size == 0:
                break
            wH, wb, wg, wd, wp, wu = wH[keep], wb[keep], wg[keep], wd[keep], wp[keep], wu[keep]
            change = change[keep]
    if live.size:
        beta[live] = wb
        final_change[live] = change
        if strict:
            raise ConvergenceFailure(f"coordinate descent did not converge in {max_sweeps} sweeps",
                                     float(np.max(change)))
    beta = beta.reshape(shape + (q,))
    final_change = final_change.reshape(shape)
    if strict:
        return beta, sweep, float(np.max(final_change, initial=0.0))
    return beta, sweep, final_change


def adaptive_weights(beta_init, gamma):
    mag = np.abs(beta_init)
    return np.where(mag > ZERO_COEF_TOL, 1.0 / np.maximum(mag, ZERO_COEF_TOL) ** gamma, np.inf)


@dataclass
class LinearProblem:
    """Centered (optionally standardized) normal equations built from moments."""

    tot: np.ndarray
    mean: np.ndarray
    ybar: np.ndarray
    scale: np.ndarray
    gram: np.ndarray
    cross: np.ndarray
    yy: np.ndarray

    @classmethod
    def from_moments(cls, M, standardize):
        """``M`` is ``(..., q, q)`` over ``[1, regressors..., response]``."""
        tot = M[..., 0, 0]
        safe_tot = np.where(tot > 0, tot, 1.0)
        mean = M[..., 0, 1:-1] / safe_tot[..., None]
        ybar = M[..., 0, -1] / safe_tot
        cxx = M[..., 1:-1, 1:-1] - safe_tot[..., None, None] * mean[..., :, None] * mean[..., None, :]
        cxy = M[..., 1:-1, -1] - safe_tot[..., None] * mean * ybar[..., None]
        cyy = M[..., -1, -1] - safe_tot * ybar**2
        if standardize:
            var = np.diagonal(cxx, axis1=-2, axis2=-1) / safe_tot[..., None]
            scale = np.sqrt(np.maximum(var, 0.0))
            scale = np.where(scale > 1e-12 * (1.0 + np.abs(mean)), scale, 1.0)
        else:
            scale = np.ones_like(mean)
        gram = cxx / (scale[..., :, None] * scale[..., None, :])
        cross = cxy / scale
        return cls(tot, mean, ybar, scale, gram, cross, cyy)

    def to_original(self, beta_std):
        coef = beta_std / self.scale
        intercept = self.ybar - (coef * self.mean).sum(-1)
        return intercept, coef

    def rss(self, beta_std):
        quad = (beta_std[..., None, :] @ self.gram @ beta_std[..., :, None])[..., 0, 0]
        return self.yy - 2 * (beta_std * self.cross).sum(-1) + quad

    def ridge(self, lam):
        p = self.gram.shape[-1]
        lam = np.asarray(lam, dtype=float)
        system = self.gram + (lam[..., None, None] if lam.ndim else lam) * np.eye(p)
        try:
            return np.linalg.solve(system, self.cross[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularDesign("singular normal equations; collinear design with lam=0") from exc

    def lasso_parts(self, gamma):
        """Mean-scale ``(H, g)`` and adaptive weights from a small-ridge pilot fit."""
        # pilot penalty: 1e-3 times the mean column variance, sum-of-squares scale
        pilot = 1e-3 * np.diagonal(self.gram, axis1=-2, axis2=-1).mean(-1)
        pen_w = adaptive_weights(self.ridge(pilot), gamma)
        t = np.where(self.tot > 0, self.tot, 1.0)
        return self.gram / t[..., None, None], self.cross / t[..., None], pen_w


# --------------------------------------------------------------------------
# logistic IRLS on a shared design with per-problem weights


class LogisticDesign:
    """Shared design ``[1, x - mean(x)]`` with cached row outer products."""

    def __init__(self, x):
        x = np.asarray(x, dtype=float)
        self.shift = x.mean(axis=0)
        self.design = np.column_stack([np.ones(x.shape[0]), x - self.shift])
        q = self.design.shape[1]
        self.outer = (self.design[:, :, None] * self.design[:, None, :]).reshape(-1, q * q)


def _logistic_scales(design, wts, standardize):
    tot = wts.sum(-1)
    mean = (wts @ design[:, 1:]) / tot[..., None]
    if not standardize:
        return tot, mean, np.ones_like(mean)
    var = (wts @ design[:, 1:] ** 2) / tot[..., None] - mean**2
    scale = np.sqrt(np.maximum(var, 0.0))
    return tot, mean, np.where(scale > 1e-12 * (1.0 + np.abs(mean)), scale, 1.0)


def _irls(ld: LogisticDesign, y, wts, penalty, lam, scale, pen_w=None, beta=None, bound_check=True, strict=True):
    """Batched (penalized) IRLS with ``wts`` of shape ``(B, n)``.

    Penalties act on ``scale * slope``: ``"ridge"`` adds
    ``lam/2 * sum (scale_j b_j)^2`` to -loglik; ``"lasso"`` adds
    ``lam * sum pen_w_j scale_j |b_j|`` to -loglik/n and solves each
    quadratic approximation by coordinate descent.
    Returns ``(beta, iters, change, separated)``.  With ``strict=False``
    problems that fail to converge are flagged in ``separated`` instead of
    raising.
    """
    design, outer = ld.design, ld.outer
    q = design.shape[1]
    batch = wts.shape[:-1]
    wts = wts.reshape(-1, wts.shape[-1])
    count = wts.shape[0]
    tot = wts.sum(-1)
    if beta is None:
        ybar = np.clip((wts @ y) / tot, 1e-3, 1 - 1e-3)
        beta = np.zeros((count, q))
        beta[:, 0] = np.log(ybar / (1 - ybar))
    else:
        beta = np.broadcast_to(beta, batch + (q,)).reshape(count, q).copy()
    lam = np.broadcast_to(np.asarray(lam, dtype=float), batch).reshape(count, 1)
    scale = np.broadcast_to(scale, batch + (q - 1,)).reshape(count, q - 1)
    zero = np.zeros((count, 1))
    pen_diag = np.concatenate([zero, lam * scale**2], -1)
    if penalty == "lasso":
        pen_w = np.broadcast_to(pen_w, batch + (q - 1,)).reshape(count, q - 1)
        pen = np.concatenate([zero, lam * pen_w * scale], axis=-1)
    separated = np.zeros(count, dtype=bool)
    unconverged = np.zeros(count, dtype=bool)
    # converged problems leave the working set ``live``
    live = np.arange(count)
    change = np.inf
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        b_live, w_live, sep = beta[live], wts[live], separated[live]
        eta = b_live @ design.T
        if bound_check:
            sep |= np.max(np.abs(eta) * (w_live > 0), axis=-1) > ETA_BOUND
        mu = expit(eta)
        v = np.maximum(mu * (1 - mu), 1e-12) * w_live
        H = (v @ outer).reshape(-1, q, q)
        if penalty == "lasso":
            t_live = tot[live]
            g = ((v * eta + w_live * (y - mu)) @ design) / t_live[:, None]
            new, _, cd_change = coordinate_descent(H / t_live[:, None, None], g, pen[live], b_live, strict=strict)
            if not strict:
                sep |= cd_change >= CD_TOL
        else:
            score = (w_live * (y - mu)) @ design
            if penalty == "ridge":
                pd = pen_diag[live]
                H = H + pd[:, :, None] * np.eye(q)
                score = score - pd * b_live
            try:
                step = np.linalg.solve(H, score[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                if strict:
                    raise QuasiSeparation("singular IRLS system") from exc
                step, singular = _solve_each(H, score)
                sep |= singular
            new = b_live + step
        if not strict:
            sep |= ~np.all(np.isfinite(new), axis=-1)
        new = np.where(sep[:, None], b_live, new)
        if not np.all(np.isfinite(new)):
            raise QuasiSeparation("IRLS produced non-finite coefficients")
        per_problem = np.max(np.abs(new - b_live), axis=-1)
        change = float(np.max(per_problem))
        beta[live] = new
        separated[live] = sep
        live = live[per_problem >= IRLS_TOL]
        if live.size == 0:
            break
    else:
        unconverged[live] = True
    beta = beta.reshape(batch + (q,))
    if unconverged.any():
        if not strict:
            separated |= unconverged
        elif not (bound_check and np.any(separated)):
            raise ConvergenceFailure(f"IRLS did not converge in {IRLS_MAX_ITER} iterations", change)
    return beta, it, change, separated.reshape(batch)


def _solve_each(H, score):
    """Solve a stack of systems one by one; singular ones get a zero step."""
    flat_h = H.reshape((-1,) + H.shape[-2:])
    flat_s = score.reshape((-1, score.shape[-1]))
    step = np.zeros_like(flat_s)
    singular = np.zeros(flat_s.shape[0], dtype=bool)
    for i in range(flat_s.shape[0]):
        try:
            step[i] = np.linalg.solve(flat_h[i], flat_s[i])
        except np.linalg.LinAlgError:
            singular[i] = True
    return step.reshape(score.shape), singular.reshape(score.shape[:-1])


def _logistic_deviance(ld, beta, y, wts):
    eta = beta @ ld.design.T
    return 2 * (wts * (np.logaddexp(0, eta) - y * eta)).sum(-1)


def logistic_weighted(ld: LogisticDesign, y, wts, penalty="none", lam=0.0, gamma=1.0, standardize=True,
                      strict=True):
    """Logistic fits at a fixed penalty for each row of ``wts``.

    Returns ``(intercept, coef, separated, info)`` on the original scale.
    """
    wts = np.atleast_2d(wts)
    tot, _, scale = _logistic_scales(ld.design, wts, standardize)
    info: dict = {"scale": scale}
    if penalty == "adaptive-lasso":
        init, _, _, sep0 = _irls(ld, y, wts, "ridge", 1e-3 * tot, scale, bound_check=False, strict=strict)
        pen_w = adaptive_weights(init[..., 1:] * scale, gamma)
        beta, it, ch, sep = _irls(ld, y, wts, "lasso", lam, scale, pen_w=pen_w, beta=init, bound_check=False,
                                  strict=strict)
        sep = sep | sep0
        info["penalty_weights"] = pen_w
    elif penalty == "ridge":
        beta, it, ch, sep = _irls(ld, y, wts, "ridge", lam, scale, bound_check=False, strict=strict)
    else:
        beta, it, ch, sep = _irls(ld, y, wts, "none", 0.0, scale, strict=strict)
    info.update(iters=it, change=ch, beta=beta)
    coef = beta[..., 1:]
    intercept = beta[..., 0] - coef @ ld.shift
    return intercept, coef, sep, info


# --------------------------------------------------------------------------
# single-dataset fits


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise DataError(f"x has {x.shape[0]} rows but y has shape {y.shape}")
    return x, y


def _unit_weights(y, sample_weight):
    if sample_weight is None:
        return np.ones_like(y)
    sw = np.asarray(sample_weight, dtype=float)
    if sw.shape != y.shape or np.any(sw < 0) or not np.all(np.isfinite(sw)):
        raise DataError("sample_weight must be finite, non-negative, one entry per row")
    if not sw.sum() > 0:
        raise DataError("sample_weight sums to zero")
    return sw


def _linear_problem(x, y, sample_weight, standardize):
    basis, mx, my = linear_basis(x, y)
    sw = _unit_weights(y, sample_weight)
    prob = LinearProblem.from_moments(basis.moments(sw)[0], standardize)
    return prob, basis, mx, my, sw


def _shifted_back(prob, beta_std, mx, my):
    intercept, coef = prob.to_original(beta_std)
    return float(my + intercept - coef @ mx), coef


def fit_mean(y, p: int = 0) -> FittedNuisance:
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DataError("cannot fit a mean to an empty vector")
    return FittedNuisance(NuisanceSpec("constant-mean"), float(y.mean()), np.zeros(p), np.zeros(p), np.ones(p),
                          "identity", n_obs=y.size)


def _gcv_lambda(x, y, prob, sw, grid):
    # GCV on the weighted, centered, standardized system
    xs = (x - x.mean(axis=0) - prob.mean) / prob.scale
    ys = y - y.mean() - prob.ybar
    sq = np.sqrt(sw)
    u, d, _ = np.linalg.svd(xs * sq[:, None], full_matrices=False)
    uty = u.T @ (ys * sq)
    n_eff = float(sw.sum())
    outside = float(np.sum((ys * sq) ** 2) - np.sum(uty**2))
    best, best_score = float(grid[0]), np.inf
    for lam in grid:
        shrink = d**2 / (d**2 + lam)
        rss = outside + np.sum(((1 - shrink) * uty) ** 2)
        df = 1.0 + shrink.sum()
        score = n_eff * rss / (n_eff - df) ** 2 if n_eff > df else np.inf
        if score < best_score:
            best, best_score = float(lam), score
    return best


def fit_ridge(x, y, lam: float | str = 1.0, standardize: bool = True, sample_weight=None,
              grid=None) -> FittedNuisance:
    """Ridge with unpenalized intercept; ``lam="gcv"`` picks lam by generalized CV."""
    x, y = _check_xy(x, y)
    if y.size < 2:
        raise DataError("ridge needs at least 2 rows")
    prob, _, mx, my, sw = _linear_problem(x, y, sample_weight, standardize)
    spec_lam = lam
    if isinstance(lam, str):
        if lam != "gcv":
            raise DataError(f"unknown lam {lam!r}")
        grid = float(prob.tot) * np.logspace(-4, 3, 36) if grid is None else np.asarray(grid, dtype=float)
        lam = _gcv_lambda(x, y, prob, sw, grid)
    lam = float(lam)
    if lam < 0:
        raise DataError("lam must be >= 0")
    if lam == 0:
        ev = np.linalg.eigvalsh(prob.gram)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise SingularDesign("collinear design with lam=0")
    beta = prob.ridge(lam)
    intercept, coef = _shifted_back(prob, beta, mx, my)
    kind = "least-squares" if spec_lam == 0 else "ridge"
    spec = NuisanceSpec(kind, None if kind == "least-squares" else spec_lam, standardize=standardize)
    return FittedNuisance(spec, intercept, coef, prob.mean + mx, prob.scale, "identity", lam=lam,
                          n_obs=float(prob.tot), extra={"beta_std": beta})


def fit_least_squares(x, y, sample_weight=None) -> FittedNuisance:
    return fit_ridge(x, y, 0.0, standardize=False, sample_weight=sample_weight)


def lambda_grid(lam_max: float, n_lambda: int) -> np.ndarray:
    """Log-spaced from ``lam_max`` down to ``1e-4 * lam_max``."""
    return lam_max * np.logspace(0, -4, n_lambda)


def _lasso_path(H, g, pen_w, grid):
    path = []
    beta = np.zeros_like(g)
    sweeps_used = 0
    for lam in grid:
        beta, sweeps, _ = coordinate_descent(H, g, lam * pen_w, beta)
        sweeps_used = max(sweeps_used, sweeps)
        path.append(beta.copy())
    return path, sweeps_used


def _lambda_max(g, pen_w):
    finite = np.isfinite(pen_w) & (pen_w > 0)
    if not finite.any():
        return 1e-12
    # the small pad keeps round-off from leaving a 1e-17 slope at the top of the grid
    return max(float(np.max(np.abs(g[finite]) / pen_w[finite])) * (1 + 1e-9), 1e-12)


def fit_adaptive_lasso_linear(x, y, gamma: float = 1.0, lam: float | None = None, selection: str = "bic",
                              n_lambda: int = 50, folds: int = 5, seed: int = 0, standardize: bool = True,
                              sample_weight=None) -> FittedNuisance:
    """Linear adaptive lasso by coordinate descent.

    Penalty weights come from a ridge fit with a small fixed penalty;
    coordinates whose pilot estimate vanishes are excluded.  With
    ``lam=None`` the penalty level is chosen by BIC or K-fold CV over
    :func:`lambda_grid`.
    """
    x, y = _check_xy(x, y)
    if y.size < 2:
        raise DataError("adaptive lasso needs at least 2 rows")
    prob, basis, mx, my, sw = _linear_problem(x, y, sample_weight, standardize)
    H, g, pen_w = prob.lasso_parts(gamma)
    lam_max = _lambda_max(g, pen_w)
    grid = lambda_grid(lam_max, n_lambda)
    extra: dict = {"lambda_max": lam_max, "penalty_weights": pen_w}
    tot = float(prob.tot)
    if lam is not None:
        chosen = float(lam)
        beta, sweeps, change = coordinate_descent(H, g, chosen * pen_w)
    elif selection == "bic":
        path, sweeps = _lasso_path(H, g, pen_w, grid)
        scores = np.array([
            tot * math.log(max(float(prob.rss(b)), 1e-300) / tot) + np.count_nonzero(b) * math.log(tot)
            for b in path
        ])
        best = int(np.argmin(scores))
        chosen, beta, change = float(grid[best]), path[best], 0.0
        extra["bic"] = scores
    elif selection == "cv":
        fold_of = np.random.default_rng(seed).permutation(np.arange(y.size) % folds)
        errors = np.zeros(n_lambda)
        for f in range(folds):
            train = LinearProblem.from_moments(basis.moments(sw * (fold_of != f))[0], standardize)
            path, _ = _lasso_path(train.gram / train.tot, train.cross / train.tot, pen_w, grid)
            test = fold_of == f
            for i, b in enumerate(path):
                icpt, coef = train.to_original(b)
                pred = my + icpt + (x[test] - mx) @ coef
                errors[i] += np.sum(sw[test] * (y[test] - pred) ** 2)
        best = int(np.argmin(errors))
        chosen = float(grid[best])
        beta, sweeps, change = coordinate_descent(H, g, chosen * pen_w)
        extra["cv_error"] = errors / tot
    else:
        raise DataError(f"unknown selection {selection!r}")
    intercept, coef = _shifted_back(prob, beta, mx, my)
    extra["beta_std"] = beta
    spec = NuisanceSpec("adaptive-lasso", lam, gamma, selection, folds, n_lambda, standardize, seed)
    return FittedNuisance(spec, intercept, coef, prob.mean + mx, prob.scale, "identity", lam=chosen,
                          n_iter=int(sweeps), tol=float(change), n_obs=tot, extra=extra)


def fit_logistic(x, y, penalty: str = "none", lam: float | None = None, gamma: float = 1.0,
                 selection: str = "bic", n_lambda: int = 30, folds: int = 5, seed: int = 0,
                 standardize: bool = True, sample_weight=None) -> FittedNuisance:
    """Logistic regression by (penalized) IRLS.

    ``penalty`` is ``"none"``, ``"ridge"`` (``lam`` required) or
    ``"adaptive-lasso"`` (``lam=None`` selects by BIC or CV).  Raises
    :class:`QuasiSeparation` when the unpenalized linear predictor diverges.
    """
    x, y = _check_xy(x, y)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("logistic outcome must be 0/1")
    sw = _unit_weights(y, sample_weight)
    present = sw > 0
    if np.all(y[present] == y[present][0]):
        raise DataError("logistic fit needs both classes present")
    ld = LogisticDesign(x)
    wts = sw[None, :]
    tot, wmean, scale = _logistic_scales(ld.design, wts, standardize)
    extra: dict = {}
    chosen = 0.0
    if penalty == "none":
        beta, iters, change, sep = _irls(ld, y, wts, "none", 0.0, scale)
        if sep[0]:
            raise QuasiSeparation("linear predictor exceeded bound; data look (quasi-)separable")
        kind = "logistic"
    elif penalty == "ridge":
        if lam is None:
            raise DataError("ridge logistic needs lam")
        chosen = float(lam)
        beta, iters, change, _ = _irls(ld, y, wts, "ridge", chosen, scale, bound_check=False)
        kind = "logistic-ridge"
    elif penalty == "adaptive-lasso":
        kind = "logistic-adaptive-lasso"
        init, _, _, _ = _irls(ld, y, wts, "ridge", 1e-3 * tot, scale, bound_check=False)
        pen_w = adaptive_weights(init[..., 1:] * scale, gamma)
        ybar = float(sw @ y / tot[0])
        grad0 = ((sw * (y - ybar)) @ ld.design[:, 1:]) / tot[0]
        lam_max = _lambda_max(grad0, pen_w[0] * scale[0])
        grid = lambda_grid(lam_max, n_lambda)
        extra.update(lambda_max=lam_max, penalty_weights=pen_w[0])

        def solve(w_, lam_, start):
            b, it_, ch_, _ = _irls(ld, y, w_, "lasso", lam_, scale, pen_w=pen_w, beta=start, bound_check=False)
            return b, it_, ch_

        if lam is not None:
            chosen = float(lam)
            beta, iters, change = solve(wts, chosen, init)
        elif selection == "bic":
            scores, fits = [], []
            start = init
            for lam_ in grid:
                b, it_, ch_ = solve(wts, lam_, start)
                start = b
                fits.append((b, it_, ch_))
                dev = float(_logistic_deviance(ld, b, y, wts)[0])
                scores.append(dev + np.count_nonzero(b[0, 1:]) * math.log(tot[0]))
            best = int(np.argmin(scores))
            chosen = float(grid[best])
            beta, iters, change = fits[best]
            extra["bic"] = np.asarray(scores)
        elif selection == "cv":
            fold_of = np.random.default_rng(seed).permutation(np.arange(y.size) % folds)
            dev = np.zeros(n_lambda)
            for f in range(folds):
                w_train = (sw * (fold_of != f))[None, :]
                w_test = (sw * (fold_of == f))[None, :]
                start = init
                for i, lam_ in enumerate(grid):
                    b, _, _ = solve(w_train, lam_, start)
                    start = b
                    dev[i] += float(_logistic_deviance(ld, b, y, w_test)[0])
            best = int(np.argmin(dev))
            chosen = float(grid[best])
            beta, iters, change = solve(wts, chosen, init)
            extra["cv_deviance"] = dev
        else:
            raise DataError(f"unknown selection {selection!r}")
    else:
        raise DataError(f"unknown logistic penalty {penalty!r}")
    beta = beta[0]
    coef = beta[1:]
    intercept = float(beta[0] - coef @ ld.shift)
    extra["beta_std"] = coef * scale[0]
    spec = NuisanceSpec(kind, lam, gamma, selection, folds, n_lambda, standardize, seed)
    return FittedNuisance(spec, intercept, coef, wmean[0] + ld.shift, scale[0], "logit", lam=chosen,
                          n_iter=int(iters), tol=float(change), n_obs=float(tot[0]), extra=extra)


def fit(spec: NuisanceSpec, x, y, sample_weight=None) -> FittedNuisance:
    """Fit ``spec`` to ``(x, y)``."""
    x, y = _check_xy(x, y)
    if spec.kind == "constant-mean":
        sw = _unit_weights(y, sample_weight)
        f = fit_mean(y, x.shape[1])
        return replace(f, spec=spec, intercept=float(sw @ y / sw.sum()), n_obs=float(sw.sum()))
    if spec.kind == "least-squares":
        f = fit_ridge(x, y, 0.0, standardize=False, sample_weight=sample_weight)
    elif spec.kind == "ridge":
        f = fit_ridge(x, y, 1.0 if spec.lam is None else spec.lam, spec.standardize, sample_weight)
    elif spec.kind == "adaptive-lasso":
        f = fit_adaptive_lasso_linear(x, y, spec.gamma, spec.lam, spec.selection, spec.n_lambda, spec.folds,
                                      spec.seed, spec.standardize, sample_weight)
    elif spec.kind == "logistic":
        f = fit_logistic(x, y, "none", standardize=spec.standardize, sample_weight=sample_weight)
    elif spec.kind == "logistic-ridge":
        lam = 1.0 if spec.lam is None else float(spec.lam)
        f = fit_logistic(x, y, "ridge", lam, standardize=spec.standardize, sample_weight=sample_weight)
    else:
        f = fit_logistic(x, y, "adaptive-lasso", spec.lam, spec.gamma, spec.selection, spec.n_lambda, spec.folds,
                         spec.seed, spec.standardize, sample_weight)
    return replace(f, spec=spec)


def predict(f: FittedNuisance, x) -> np.ndarray:
    """Fitted values; the logit link is clipped to ``[EPS_Q, 1 - EPS_Q]``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[-1] != f.p:
        raise DataError(f"fit has {f.p} covariates, got {x.shape[-1]}")
    eta = f.intercept + x @ f.coef
    if f.link == "logit":
        return np.clip(expit(eta), EPS_Q, 1 - EPS_Q)
    return eta


# --------------------------------------------------------------------------
# bootstrap refits


def rescaled_lambda(f: FittedNuisance, m: float) -> float:
    """Penalty level for a refit on ``m`` rows.

    Sum-of-squares penalties (ridge) keep their ratio to the data term; mean
    scale penalties (lasso) follow the BIC rate ``log(m)/m``.  A forced
    lasso penalty is reused as is.
    """
    n = max(float(f.n_obs), 2.0)
    m = max(float(m), 2.0)
    kind = f.spec.kind
    if kind in ("ridge", "logistic-ridge"):
        return f.lam * m / n
    if kind in ("adaptive-lasso", "logistic-adaptive-lasso"):
        if f.spec.lam is not None:
            return f.lam
        return f.lam * (n / m) * math.log(m) / math.log(n)
    return 0.0


def linear_refit_moments(f: FittedNuisance, M):
    """Refit a linear family from stacked moments over ``[1, regressors, response]``.

    Coefficients are in the coordinates of ``M``.  Returns
    ``(intercept, coef, bad)``.
    """
    kind = f.spec.kind
    tot = M[..., 0, 0]
    if kind == "constant-mean":
        bad = tot <= 0
        intercept = M[..., 0, -1] / np.where(bad, 1.0, tot)
        return intercept, np.zeros(tot.shape + (M.shape[-1] - 2,)), bad
    standardize = f.spec.standardize and kind != "least-squares"
    prob = LinearProblem.from_moments(M, standardize)
    m = float(np.mean(tot))
    if kind == "adaptive-lasso":
        H, g, pen_w = prob.lasso_parts(f.spec.gamma)
        beta, _, change = coordinate_descent(H, g, rescaled_lambda(f, m) * pen_w, strict=False)
        unconverged = change >= CD_TOL
    elif kind == "ridge":
        beta = prob.ridge(rescaled_lambda(f, m))
    elif kind == "least-squares":
        # resamples can be rank deficient; a vanishing ridge keeps them solvable
        beta = prob.ridge(1e-10 * m)
    else:
        raise DataError(f"{kind} is not a linear family")
    intercept, coef = prob.to_original(beta)
    bad = (tot < 2) | ~np.all(np.isfinite(coef), axis=-1)
    if kind == "adaptive-lasso":
        bad |= unconverged
    return intercept, coef, bad


def logistic_refit_weights(f: FittedNuisance, ld: LogisticDesign, y, wts):
    """Refit a logistic family for each row of ``wts``; ``(intercept, coef, bad)``.

    Coefficients refer to the original covariates.  Rows whose weights miss
    one class, or whose fit separates, are flagged bad.
    """
    present = wts > 0
    bad = (present @ y == 0) | (present @ (1 - y) == 0)
    if bad.any():
        wts = np.where(bad[..., None], 1.0, wts)
    m = float(np.mean(wts.sum(-1)))
    penalty = {"logistic": "none", "logistic-ridge": "ridge"}.get(f.spec.kind, "adaptive-lasso")
    intercept, coef, sep, _ = logistic_weighted(ld, y, wts, penalty, rescaled_lambda(f, m), f.spec.gamma,
                                                f.spec.standardize, strict=False)
    return intercept, coef, bad | sep
