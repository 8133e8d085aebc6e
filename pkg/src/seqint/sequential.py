"""Forward-stepwise testing.

Each step evaluates the remaining candidates given the covariates already
selected, picks one, calibrates its statistic and either adds it to the
selected set (p <= alpha) or stops.  Candidates are visited in sorted-name
order, and every computation runs on a copy of the data whose columns are in
that order, so a permutation of the input columns changes nothing but the
reported positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

from . import nuisance as nu
from .calibration import BootstrapPlan, CalibrationResult, calibrate_step
from .core import DrRecipe, RctRecipe
from .data import Dataset, StepContext, validate
from .errors import AllDegenerate, DataError

BOOTSTRAP_METHODS = ("null", "mboot", "nboot", "bsboot")
COMPETITOR_METHODS = ("bonf", "lrt")
METHODS = BOOTSTRAP_METHODS + COMPETITOR_METHODS

StopReason = Literal["p-exceeded-alpha", "max-steps", "candidates-exhausted", "all-degenerate"]


@dataclass(frozen=True)
class SequenceConfig:
    """Everything that shapes one sequential run."""

    recipe: Literal["rct", "dr"] = "rct"
    method: str = "mboot"
    plan: BootstrapPlan = field(default_factory=BootstrapPlan)
    max_steps: int = 5
    phi: nu.NuisanceSpec = field(default_factory=lambda: nu.NuisanceSpec("constant-mean"))
    h: nu.NuisanceSpec = field(default_factory=lambda: nu.NuisanceSpec("adaptive-lasso"))
    q: nu.NuisanceSpec = field(default_factory=lambda: nu.NuisanceSpec("logistic-adaptive-lasso"))
    h_fit: Literal["controls", "all"] = "controls"

    def __post_init__(self):
        if self.recipe not in ("rct", "dr"):
            raise DataError(f"recipe must be 'rct' or 'dr', got {self.recipe!r}")
        if self.method not in METHODS:
            raise DataError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.max_steps < 1:
            raise DataError("max_steps must be at least 1")
        if self.recipe == "dr" and self.method in ("null",) + COMPETITOR_METHODS:
            from .errors import UnsupportedCalibration

            raise UnsupportedCalibration(f"method {self.method!r} needs a known propensity (rct recipe)")

    @property
    def alpha(self) -> float:
        return self.plan.alpha

    def build_recipe(self):
        if self.recipe == "rct":
            return RctRecipe(self.phi)
        return DrRecipe(self.h, self.q, self.h_fit)

    def as_dict(self) -> dict:
        """Config echo; the worker count is left out because it never changes results."""
        out = asdict(self)
        out["plan"]["stream_key"] = list(self.plan.stream_key)
        del out["plan"]["workers"]
        return out


@dataclass(frozen=True)
class StepResult:
    step_index: int  # 1-based
    k: int  # 0-based column of the input dataset
    name: str
    coef: float
    stat_scaled: float
    calibration: CalibrationResult
    decision: Literal["rejected", "accepted-null"]

    @property
    def covariate(self) -> int:
        """1-based covariate position in the input data."""
        return self.k + 1

    @property
    def p_value(self) -> float:
        return self.calibration.p_value


@dataclass(frozen=True)
class SequenceResult:
    steps: tuple[StepResult, ...]
    final_j: tuple[int, ...]
    stop_reason: StopReason
    config: dict = field(default_factory=dict)

    @property
    def selected_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.steps)


def canonical_order(names) -> list[int]:
    """Column positions sorted by covariate name."""
    return sorted(range(len(names)), key=lambda j: names[j])


def _run(dataset: Dataset, config: SequenceConfig, steps: int, exploratory: bool) -> SequenceResult:
    validate(dataset)
    if config.recipe == "rct" and dataset.q0 is None:
        raise DataError("the rct recipe needs a known propensity column")
    order = canonical_order(dataset.names)
    work = dataset.select_columns(order)
    recipe = config.build_recipe()
    selected: list[int] = []
    results: list[StepResult] = []
    reason: StopReason = "max-steps"
    for index in range(steps):
        if len(selected) == work.p:
            reason = "candidates-exhausted"
            break
        step = StepContext.build(work.x, selected)
        try:
            if config.method in COMPETITOR_METHODS:
                from .competitors import competitor_step

                k, coef, cal = competitor_step(work, step, recipe, config.method, config.alpha)
            else:
                stat = recipe.evaluate(work, step)
                cal = calibrate_step(work, step, recipe, config.method, config.plan, stat, step_index=index)
                k, coef = stat.k, stat.coef
        except AllDegenerate:
            reason = "all-degenerate"
            break
        reject = cal.p_value <= config.alpha
        results.append(StepResult(index + 1, order[k], work.names[k], coef, cal.stat_scaled, cal,
                                  "rejected" if reject else "accepted-null"))
        selected.append(k)
        if not reject and not exploratory:
            reason = "p-exceeded-alpha"
            break
    else:
        reason = "candidates-exhausted" if len(selected) == work.p else "max-steps"
    final = tuple(order[k] for k, r in zip(selected, results) if exploratory or r.decision == "rejected")
    return SequenceResult(tuple(results), final, reason, config.as_dict())


def run_sequence(dataset: Dataset, config: SequenceConfig) -> SequenceResult:
    """Test sequentially until a p-value exceeds alpha or ``max_steps`` is reached."""
    return _run(dataset, config, config.max_steps, exploratory=False)


def run_sequence_exploratory(dataset: Dataset, config: SequenceConfig, fixed_steps: int) -> SequenceResult:
    """Run exactly ``fixed_steps`` steps, ignoring the stopping rule.

    The selected covariate still moves into the conditioning set at every
    step, so later p-values are conditional on all earlier selections.
    """
    if fixed_steps < 1:
        raise DataError("fixed_steps must be at least 1")
    return _run(dataset, config, fixed_steps, exploratory=True)
