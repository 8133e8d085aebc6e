"""Simulation designs and the Monte Carlo harness.

Data follow ``Y = h0(X) + (alpha0 + X'beta0) A + eps`` with Gaussian
covariates, a constant or logistic propensity and Gaussian errors.

Every replicate draws its data from the stream ``(seed, rep, 0)`` and the
``i``-th method calibrates with ``(seed, rep, i + 1, step, block)``, so
replicates can run in any order or process and still give the same report.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .calibration import BootstrapPlan, stream
from .competitors import bonferroni_test, lrt_test  # noqa: F401  (re-exported)
from .core import RctRecipe
from .data import Dataset, StepContext
from .errors import DataError, NumericalError, SeqIntError
from .sequential import SequenceConfig, run_sequence

DATA_KEY = 0
MAX_FAILURE_FRACTION = 0.01
ORACLE_N = 100_000
ORACLE_SEED = 20_240_601
SCENARIO_NAMES = ("N1", "S1", "S2", "D1-null", "D1", "D2-null", "D2")


@dataclass(frozen=True)
class Scenario:
    """One data-generating model.

    ``h_linear`` holds ``(intercept, c_1, ..., c_p)`` padded with zeros;
    ``h_square`` adds ``c * X_j^2`` terms.  The propensity is ``q_const``
    unless ``q_logit`` (intercept first) is given; ``q_product`` adds
    ``c * X_i * X_j`` inside the logit.
    """

    n: int = 250
    p: int = 10
    beta: tuple[float, ...] = ()
    alpha0: float = 0.5
    h_linear: tuple[float, ...] = (1.0, 0.5, 0.5)
    h_square: tuple[tuple[int, float], ...] = ()
    q_const: float = 0.5
    q_logit: tuple[float, ...] | None = None
    q_product: tuple[tuple[int, int, float], ...] = ()
    covariance: Literal["iid", "equicorrelated", "ar1"] = "iid"
    rho: float = 0.0
    error_sd: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta) or (0.0,) * self.p)
        if self.n < 1 or self.p < 1:
            raise DataError("n and p must be positive")
        if len(self.beta) != self.p:
            raise DataError(f"beta has {len(self.beta)} entries for p={self.p}")
        if len(self.h_linear) > self.p + 1:
            raise DataError("h_linear has more than p + 1 entries")
        if self.q_logit is not None and len(self.q_logit) > self.p + 1:
            raise DataError("q_logit has more than p + 1 entries")
        for j, _ in self.h_square:
            if not 0 <= j < self.p:
                raise DataError(f"h_square index {j} out of range")
        for i, j, _ in self.q_product:
            if not (0 <= i < self.p and 0 <= j < self.p):
                raise DataError(f"q_product indices ({i}, {j}) out of range")
        if not 0 < self.q_const < 1:
            raise DataError("q_const must lie in (0, 1)")
        if self.error_sd < 0:
            raise DataError("error_sd must be non-negative")
        if self.covariance not in ("iid", "equicorrelated", "ar1"):
            raise DataError(f"unknown covariance law {self.covariance!r}")
        if self.covariance == "equicorrelated" and not -1.0 / max(self.p - 1, 1) < self.rho < 1:
            raise DataError(f"rho={self.rho} makes the equicorrelated covariance non positive definite")
        if self.covariance == "ar1" and not -1 < self.rho < 1:
            raise DataError(f"rho={self.rho} makes the AR(1) covariance non positive definite")

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(j for j, b in enumerate(self.beta) if b != 0)

    def covariance_matrix(self) -> np.ndarray:
        idx = np.arange(self.p)
        if self.covariance == "equicorrelated":
            return np.where(idx[:, None] == idx[None, :], 1.0, self.rho)
        if self.covariance == "ar1":
            return self.rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)
        return np.eye(self.p)

    def as_dict(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, tuple):
                out[key] = [list(v) if isinstance(v, tuple) else v for v in val]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        for key in ("beta", "h_linear", "q_logit"):
            if data.get(key) is not None:
                data[key] = tuple(float(v) for v in data[key])
        if "h_square" in data:
            data["h_square"] = tuple((int(j), float(c)) for j, c in data["h_square"])
        if "q_product" in data:
            data["q_product"] = tuple((int(i), int(j), float(c)) for i, j, c in data["q_product"])
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise DataError(f"unknown scenario fields: {', '.join(sorted(extra))}")
        return cls(**data)


def _linear(coefs, x):
    coefs = np.asarray(coefs, dtype=float)
    out = np.full(x.shape[0], coefs[0] if coefs.size else 0.0)
    if coefs.size > 1:
        out += x[:, : coefs.size - 1] @ coefs[1:]
    return out


def propensity(scenario: Scenario, x: np.ndarray) -> np.ndarray:
    if scenario.q_logit is None and not scenario.q_product:
        return np.full(x.shape[0], scenario.q_const)
    eta = _linear(scenario.q_logit or (0.0,), x)
    for i, j, c in scenario.q_product:
        eta += c * x[:, i] * x[:, j]
    return expit(eta)


def main_effect(scenario: Scenario, x: np.ndarray) -> np.ndarray:
    h = _linear(scenario.h_linear, x)
    for j, c in scenario.h_square:
        h += c * x[:, j] ** 2
    return h


def generate(scenario: Scenario, rng: np.random.Generator, n: int | None = None) -> Dataset:
    """Draw one dataset; the true propensity is attached as ``q0``."""
    n = scenario.n if n is None else n
    z = rng.standard_normal((n, scenario.p))
    if scenario.covariance == "iid":
        x = z
    else:
        x = z @ np.linalg.cholesky(scenario.covariance_matrix()).T
    q = propensity(scenario, x)
    a = (rng.random(n) < q).astype(float)
    eps = scenario.error_sd * rng.standard_normal(n)
    y = main_effect(scenario, x) + (scenario.alpha0 + x @ np.asarray(scenario.beta)) * a + eps
    return Dataset(y, a, x, np.clip(q, 1e-12, 1 - 1e-12))


# ---------------------------------------------------------------------------
# canonical designs


def marginal_sd(scenario: Scenario, k: int = 0, n: int = ORACLE_N, seed: int = ORACLE_SEED) -> float:
    """Large-sample sd of ``sqrt(n) * coef_k`` for the rct recipe with ``J`` empty."""
    ds = generate(scenario, stream(seed, 0), n=n)
    stat = RctRecipe().evaluate(ds, StepContext.build(ds.x, (), [k]))
    return stat.sigma_hat


@lru_cache(maxsize=32)
def oracle_b(template: Scenario, alpha: float = 0.05, power: float = 0.95, tol: float = 1e-6) -> float:
    """Signal size giving ``power`` to a two-sided level-``alpha`` z-test at ``template.n``.

    The test statistic is the rct marginal coefficient of the first covariate
    and its sd depends on the signal itself, so ``b = (z_{1-alpha/2} +
    z_{power}) * sd(b) / sqrt(n)`` is solved by fixed-point iteration.
    """
    z = norm.isf(alpha / 2) + norm.ppf(power)
    b = 0.0
    for _ in range(100):
        beta = (b,) + (0.0,) * (template.p - 1)
        new = z * marginal_sd(replace(template, beta=beta), 0) / math.sqrt(template.n)
        if abs(new - b) < tol:
            return float(new)
        b = new
    raise NumericalError("signal-size iteration did not converge")


def canonical(name: str, n: int = 250, p: int = 10, strength: float = 1.0, b: float | None = None) -> Scenario:
    """Named scenario; the signal is ``strength * b`` with ``b`` from :func:`oracle_b` unless given."""
    if name not in SCENARIO_NAMES:
        raise DataError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIO_NAMES)}")
    if p < 3:
        raise DataError("canonical scenarios need p >= 3")
    base = Scenario(n=n, p=p, name=name)
    if b is None and name not in ("N1", "D1-null", "D2-null"):
        b = oracle_b(Scenario(n=n, p=p))
    b = 0.0 if b is None else strength * b
    zeros = (0.0,) * p
    if name == "N1":
        return base
    if name == "S1":
        return replace(base, beta=(b,) + zeros[1:])
    if name == "S2":
        return replace(base, beta=(b, b) + zeros[2:])
    q_logit = (0.0, 0.5, 0.0, -0.5)
    beta = zeros if name.endswith("null") else (b,) + zeros[1:]
    if name.startswith("D1"):
        return replace(base, beta=beta, q_logit=q_logit, h_square=((0, 0.5),))
    return replace(base, beta=beta, q_logit=q_logit, q_product=((0, 1, 1.0),))


# ---------------------------------------------------------------------------
# Monte Carlo harness


@dataclass(frozen=True)
class MethodRun:
    label: str
    config: SequenceConfig


@dataclass(frozen=True)
class StepRate:
    step: int
    executed: int
    rejections: int
    rate: float
    se: float
    power_rejections: int
    type1_rejections: int
    power_rate: float
    power_se: float
    type1_rate: float
    type1_se: float
    selection_eligible: int
    selection_correct: int
    selection_accuracy: float | None


@dataclass(frozen=True)
class MethodSummary:
    label: str
    reps_ok: int
    steps: tuple[StepRate, ...]
    r_hat_one_fraction: float
    m_hat_n_fraction: float
    step1_pvalues: tuple[float, ...]
    failures: tuple[tuple[int, str], ...] = ()


@dataclass(frozen=True)
class McReport:
    scenario: dict
    reps: int
    seed: int
    max_steps: int
    methods: tuple[MethodSummary, ...]
    config: dict = field(default_factory=dict)
    wall_clock: float | None = None

    def method(self, label: str) -> MethodSummary:
        for m in self.methods:
            if m.label == label:
                return m
        raise KeyError(label)

    def rate(self, label: str, step: int) -> float:
        return self.method(label).steps[step - 1].rate

    def table(self) -> list[tuple[str, int, float, float]]:
        """``(method, step, rate, se)`` rows; every rate carries its se."""
        return [(m.label, s.step, s.rate, s.se) for m in self.methods for s in m.steps]


def _se(r: float, reps: int) -> float:
    return math.sqrt(r * (1 - r) / reps) if reps else float("nan")


def default_methods(methods: Sequence[str], plan: BootstrapPlan, max_steps: int, recipe: str = "rct",
                    **nuisance) -> tuple[MethodRun, ...]:
    return tuple(MethodRun(m, SequenceConfig(recipe=recipe, method=m, plan=plan, max_steps=max_steps, **nuisance))
                 for m in methods)


def _run_rep(args):
    scenario, runs, seed, rep = args
    ds = generate(scenario, stream(seed, rep, DATA_KEY))
    out = []
    for i, run in enumerate(runs):
        plan = replace(run.config.plan, seed=seed, stream_key=(rep, i + 1), workers=1)
        cfg = replace(run.config, plan=plan)
        try:
            res = run_sequence(ds, cfg)
        except SeqIntError as exc:
            out.append(f"{type(exc).__name__}: {exc}")
            continue
        out.append(tuple((s.k, s.decision == "rejected", s.p_value, s.calibration.r_hat, s.calibration.m_hat)
                         for s in res.steps))
    return out


def _summarize(label: str, records, active: set, reps: int, max_steps: int, n: int) -> MethodSummary:
    failures = tuple((rep, rec) for rep, rec in enumerate(records) if isinstance(rec, str))
    ok = [rec for rec in records if not isinstance(rec, str)]
    n_ok = len(ok)
    steps = []
    for s in range(max_steps):
        executed = rej = pw = t1 = elig = correct = 0
        for rec in ok:
            if len(rec) <= s:
                continue
            executed += 1
            chosen_before = {r[0] for r in rec[:s]}
            remaining_active = bool(active - chosen_before)
            k, rejected = rec[s][0], rec[s][1]
            rej += rejected
            if remaining_active:
                pw += rejected
                elig += 1
                correct += k in active
            else:
                t1 += rejected
        rate, prate, trate = (v / n_ok if n_ok else float("nan") for v in (rej, pw, t1))
        steps.append(StepRate(s + 1, executed, rej, rate, _se(rate, n_ok), pw, t1, prate, _se(prate, n_ok),
                              trate, _se(trate, n_ok), elig, correct, correct / elig if elig else None))
    first = [rec[0] for rec in ok if rec]
    r_one = sum(r[3] == 1 for r in first) / len(first) if first else float("nan")
    m_n = sum(r[4] == n for r in first) / len(first) if first else float("nan")
    return MethodSummary(label, n_ok, tuple(steps), r_one, m_n, tuple(r[2] for r in first), failures)


def mc_study(scenario: Scenario, runs: Sequence[MethodRun], reps: int, seed: int = 0, workers: int = 1,
             max_steps: int | None = None, min_reps: int = 100, record_time: bool = False,
             config: dict | None = None) -> McReport:
    """Run every method on ``reps`` generated datasets and tabulate per-step rates.

    A step's rejection counts toward power when an active covariate is still
    unselected at that step, otherwise toward type I error.  Rates divide by
    the number of replicates in which the method ran without error.
    """
    if reps < min_reps:
        raise DataError(f"reps must be at least {min_reps}")
    if workers < 1:
        raise DataError("workers must be positive")
    runs = tuple(runs)
    if not runs:
        raise DataError("no methods to run")
    max_steps = max_steps or max(r.config.max_steps for r in runs)
    start = time.perf_counter()
    jobs = [(scenario, runs, seed, rep) for rep in range(reps)]
    if workers == 1:
        results = [_run_rep(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    active = set(scenario.active)
    summaries = []
    for i, run in enumerate(runs):
        records = [res[i] for res in results]
        summary = _summarize(run.label, records, active, reps, max_steps, scenario.n)
        if len(summary.failures) > MAX_FAILURE_FRACTION * reps:
            rep, msg = summary.failures[0]
            raise NumericalError(
                f"method {run.label!r} failed in {len(summary.failures)} of {reps} replicates (first, rep {rep}: {msg})"
            )
        summaries.append(summary)
    elapsed = time.perf_counter() - start if record_time else None
    return McReport(scenario.as_dict(), reps, seed, max_steps, tuple(summaries), config or {}, elapsed)
