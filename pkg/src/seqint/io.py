"""CSV ingestion, run configuration and report documents.

Reports are JSON documents plus a flat CSV table.  Both files are written to
temporaries in the target directory and renamed into place only after both
succeeded, so a failed run never leaves partial output behind.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from io import StringIO
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import __version__
from . import nuisance as nu
from .calibration import BootstrapPlan
from .data import Dataset, validate
from .errors import ConfigError, MissingColumn, MissingValue, NonNumericCell, TreatmentNotBinary
from .sequential import METHODS, SequenceConfig, SequenceResult
from .simgen import McReport, MethodSummary, Scenario, StepRate, canonical

SCHEMA = "seqint.report/1"
ENV_OVERRIDES = {"SEQINT_SEED": ("seed", int), "SEQINT_WORKERS": ("workers", int)}
# fields that cannot change any reported number
NON_SEMANTIC = ("out", "format", "workers", "timestamps")


# ---------------------------------------------------------------------------
# CSV input


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise NonNumericCell(row, column, text) from None


def load_csv(path, outcome: str = "y", treatment: str = "a", propensity: str | None = None,
             covariates=None, drop_incomplete: bool = False) -> tuple[Dataset, int]:
    """Read a dataset; returns ``(dataset, dropped_rows)``.

    ``covariates=None`` binds every column not used as outcome, treatment or
    propensity.  Rows are numbered from 1, not counting the header.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = list(reader)
    used = [outcome, treatment] + ([propensity] if propensity else [])
    if covariates is None:
        covariates = [h for h in header if h not in used]
    bound = used + list(covariates)
    for name in bound:
        if name not in header:
            raise MissingColumn(f"column {name!r} not found in {path}")
    if len(set(bound)) != len(bound):
        raise ConfigError("a column is bound to more than one role")
    pos = {name: header.index(name) for name in bound}
    values: dict[str, list[float]] = {name: [] for name in bound}
    dropped = 0
    for i, raw in enumerate(rows, start=1):
        if not any(cell.strip() for cell in raw):
            continue
        cells = {name: (raw[pos[name]].strip() if pos[name] < len(raw) else "") for name in bound}
        missing = [name for name, cell in cells.items() if cell == ""]
        if missing:
            if drop_incomplete:
                dropped += 1
                continue
            raise MissingValue(f"missing value in column {missing[0]!r} at row {i}")
        for name, cell in cells.items():
            if name == treatment:
                if cell not in ("0", "1"):
                    value = _parse_float(cell, i, name)
                    raise TreatmentNotBinary(f"treatment value {value!r} at row {i} is not 0/1")
                values[name].append(float(cell))
            else:
                values[name].append(_parse_float(cell, i, name))
    x = [values[c] for c in covariates]
    ds = Dataset(
        np.array(values[outcome]),
        np.array(values[treatment]),
        np.array(x).T.reshape(len(values[outcome]), len(covariates)),
        np.array(values[propensity]) if propensity else None,
        tuple(covariates),
    )
    return validate(ds), dropped


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    mode: str = "test"
    data: str | None = None
    scenario: Any = None  # canonical name or a mapping of Scenario fields
    outcome: str = "y"
    treatment: str = "a"
    propensity: str | None = None
    covariates: list | None = None
    drop_incomplete: bool = False
    recipe: str = "rct"
    method: str = "mboot"
    methods: list | None = None
    alpha: float = 0.05
    steps: int = 5
    fixed_steps: int | None = None
    B: int = 1000
    d: float = 0.8
    c: float = 2.0
    m_floor: int | None = None
    M_null: int = 10000
    pretest_p: str = "candidates"
    centering: str = "selected"
    phi: dict = field(default_factory=lambda: {"kind": "constant-mean"})
    h: dict = field(default_factory=lambda: {"kind": "adaptive-lasso"})
    q: dict = field(default_factory=lambda: {"kind": "logistic-adaptive-lasso"})
    h_fit: str = "controls"
    n: int = 250
    p: int = 10
    strength: float = 1.0
    b: float | None = None
    reps: int = 100
    seed: int = 0
    workers: int = 1
    out: str = "report.json"
    format: str = "json"
    timestamps: bool = False

    def __post_init__(self):
        if self.mode not in ("test", "simulate"):
            raise ConfigError(f"mode must be 'test' or 'simulate', got {self.mode!r}")
        if self.mode == "test" and (self.data is None) == (self.scenario is None):
            raise ConfigError("give exactly one of a data path and a scenario")
        if self.mode == "simulate" and self.scenario is None:
            raise ConfigError("simulate needs a scenario")
        if self.format not in ("json", "csv"):
            raise ConfigError("format must be 'json' or 'csv'")
        if self.recipe not in ("rct", "dr"):
            raise ConfigError("recipe must be 'rct' or 'dr'")
        for m in [self.method] + list(self.methods or []):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.fixed_steps is not None and self.fixed_steps < 1:
            raise ConfigError("fixed_steps must be at least 1")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RunConfig":
        data = {k.replace("-", "_"): v for k, v in dict(data).items()}
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if isinstance(data.get("propensity"), str) and data["propensity"].lower() == "none":
            data["propensity"] = None
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def as_dict(self) -> dict:
        return asdict(self)

    def semantic_dict(self) -> dict:
        return {k: v for k, v in self.as_dict().items() if k not in NON_SEMANTIC}

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- builders ---------------------------------------------------------

    def plan(self, **overrides) -> BootstrapPlan:
        return BootstrapPlan(B=self.B, d=self.d, c=self.c, alpha=self.alpha, m_floor=self.m_floor,
                             M_null=self.M_null, seed=self.seed, pretest_p=self.pretest_p,
                             centering=self.centering, workers=overrides.get("workers", self.workers))

    def sequence_config(self, method: str | None = None, workers: int | None = None) -> SequenceConfig:
        return SequenceConfig(
            recipe=self.recipe, method=method or self.method,
            plan=self.plan(workers=workers or self.workers), max_steps=self.steps,
            phi=_spec(self.phi), h=_spec(self.h), q=_spec(self.q), h_fit=self.h_fit,
        )

    def build_scenario(self) -> Scenario:
        if isinstance(self.scenario, str):
            return canonical(self.scenario, n=self.n, p=self.p, strength=self.strength, b=self.b)
        if isinstance(self.scenario, Mapping):
            return Scenario.from_dict(self.scenario)
        raise ConfigError("scenario must be a canonical name or a mapping")


def _spec(data) -> nu.NuisanceSpec:
    if isinstance(data, nu.NuisanceSpec):
        return data
    if isinstance(data, str):
        return nu.NuisanceSpec(data)
    try:
        return nu.NuisanceSpec(**dict(data))
    except TypeError as exc:
        raise ConfigError(f"bad nuisance spec {data!r}: {exc}") from None


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for var, (key, cast) in ENV_OVERRIDES.items():
        if var in environ:
            try:
                out[key] = cast(environ[var])
            except ValueError:
                raise ConfigError(f"{var}={environ[var]!r} is not a valid {cast.__name__}") from None
    return out


def resolve_config(file_path=None, flags: Mapping | None = None, environ=None, mode: str | None = None) -> RunConfig:
    """Layer the config file, environment overrides and flags, later winning."""
    merged: dict = {}
    if file_path:
        merged.update(read_config_file(file_path))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    if mode:
        merged["mode"] = mode
    return RunConfig.from_mapping(merged)


# ---------------------------------------------------------------------------
# result <-> plain data


def _clean(value):
    """JSON-ready copy: tuples become lists, numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "tolist"):
        return _clean(value.tolist())
    return value


def sequence_to_dict(result: SequenceResult) -> dict:
    steps = []
    for s in result.steps:
        cal = asdict(s.calibration)
        steps.append({"step": s.step_index, "covariate": s.covariate, "name": s.name, "coef": s.coef,
                      "stat_scaled": s.stat_scaled, "decision": s.decision, "calibration": cal})
    return _clean({"steps": steps, "final_j": [j + 1 for j in result.final_j],
                   "final_names": [st.name for st in result.steps if st.k in result.final_j],
                   "stop_reason": result.stop_reason, "config": result.config})


def mc_to_dict(report: McReport) -> dict:
    return _clean(asdict(report))


def mc_from_dict(data: dict) -> McReport:
    methods = []
    for m in data["methods"]:
        steps = tuple(StepRate(**s) for s in m["steps"])
        methods.append(MethodSummary(m["label"], m["reps_ok"], steps, m["r_hat_one_fraction"],
                                     m["m_hat_n_fraction"], tuple(m["step1_pvalues"]),
                                     tuple((int(r), str(e)) for r, e in m["failures"])))
    return McReport(data["scenario"], data["reps"], data["seed"], data["max_steps"], tuple(methods),
                    data.get("config", {}), data.get("wall_clock"))


def step_rows(result_dict: dict) -> list[dict]:
    rows = []
    for s in result_dict["steps"]:
        cal = s["calibration"]
        rows.append({"step": s["step"], "covariate": s["covariate"], "name": s["name"], "coef": s["coef"],
                     "stat_scaled": s["stat_scaled"], "sigma_hat": cal["sigma_hat"], "m_hat": cal["m_hat"],
                     "r_hat": cal["r_hat"], "p_value": cal["p_value"], "method": cal["method"],
                     "decision": s["decision"]})
    return rows


def rate_rows(result_dict: dict) -> list[dict]:
    rows = []
    for m in result_dict["methods"]:
        for s in m["steps"]:
            rows.append({"method": m["label"], "step": s["step"], "rate": s["rate"], "se": s["se"],
                         "power_rate": s["power_rate"], "power_se": s["power_se"], "type1_rate": s["type1_rate"],
                         "type1_se": s["type1_se"], "selection_accuracy": s["selection_accuracy"],
                         "reps_ok": m["reps_ok"]})
    return rows


# ---------------------------------------------------------------------------
# report documents


@dataclass(frozen=True)
class ReportDocument:
    kind: str  # "sequence" or "simulation"
    result: dict
    provenance: dict
    schema: str = SCHEMA

    def to_json(self) -> str:
        body = {"schema": self.schema, "kind": self.kind, "provenance": self.provenance, "result": self.result}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ReportDocument":
        body = json.loads(text)
        if body.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported report schema {body.get('schema')!r}")
        return cls(body["kind"], body["result"], body["provenance"], body["schema"])

    def rows(self) -> list[dict]:
        return step_rows(self.result) if self.kind == "sequence" else rate_rows(self.result)

    def to_csv(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        buf = StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})
        return buf.getvalue()


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else str(value)
    return value


def make_document(kind: str, result: dict, config: RunConfig, started: str | None = None,
                  finished: str | None = None) -> ReportDocument:
    prov = {"config_hash": config.config_hash(), "seed": config.seed, "version": __version__,
            "config": _clean(config.semantic_dict())}
    if started is not None:
        prov["started"] = started
        prov["finished"] = finished
    return ReportDocument(kind, result, prov)


def companion_paths(out, fmt: str) -> tuple[Path, Path]:
    """``(json_path, csv_path)``; ``out`` names the file in the chosen format."""
    out = Path(out)
    if fmt == "json":
        return out, out.with_suffix(".csv")
    return out.with_suffix(".json") if out.suffix != ".json" else out.with_suffix(".report.json"), out


def write_atomic(contents: Mapping[Path, str]):
    """Write several files so that either all appear or none do."""
    temps = []
    try:
        for path, text in contents.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
            temps.append((tmp, path))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for tmp, path in temps:
            os.replace(tmp, path)
    finally:
        for tmp, _ in temps:
            if os.path.exists(tmp):
                os.unlink(tmp)


def write_document(doc: ReportDocument, out, fmt: str) -> tuple[Path, Path]:
    json_path, csv_path = companion_paths(out, fmt)
    write_atomic({json_path: doc.to_json(), csv_path: doc.to_csv()})
    return json_path, csv_path

