"""Core records shared by every stage of the pipeline.

Covariate indices are 0-based inside the package and converted to 1-based
only when results are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateName,
    NonFiniteValue,
    PropensityOutOfRange,
    TooFewRows,
    TreatmentNotBinary,
)

MIN_ROWS = 4


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome, binary treatment, covariates and an optional known propensity."""

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    q0: np.ndarray | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(np.ravel(self.y)))
        object.__setattr__(self, "a", _frozen(np.ravel(self.a)))
        if self.q0 is not None:
            object.__setattr__(self, "q0", _frozen(np.ravel(self.q0)))
        names = tuple(self.names) if len(self.names) else tuple(f"x{j + 1}" for j in range(x.shape[1]))
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def take(self, rows: np.ndarray) -> "Dataset":
        """Row subset (with repetition allowed); names carried over."""
        q0 = None if self.q0 is None else self.q0[rows]
        return Dataset(self.y[rows], self.a[rows], self.x[rows], q0, self.names)

    def select_columns(self, cols: Sequence[int]) -> "Dataset":
        cols = list(cols)
        return Dataset(self.y, self.a, self.x[:, cols], self.q0, tuple(self.names[c] for c in cols))

    def with_propensity(self, q0: np.ndarray | None) -> "Dataset":
        return Dataset(self.y, self.a, self.x, q0, self.names)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        same_q = (self.q0 is None and other.q0 is None) or (
            self.q0 is not None and other.q0 is not None and np.array_equal(self.q0, other.q0)
        )
        return (
            same_q
            and self.names == other.names
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.x, other.x)
        )


def validate(dataset: Dataset, internal: bool = False) -> Dataset:
    """Check the dataset invariants and return it unchanged.

    ``internal=True`` waives the minimum row count for bootstrap resamples.
    """
    n = dataset.n
    if dataset.a.shape != (n,) or dataset.x.shape[0] != n:
        raise DataError(f"length mismatch: y has {n} rows, a {dataset.a.shape[0]}, x {dataset.x.shape[0]}")
    if not internal and n < MIN_ROWS:
        raise TooFewRows(f"need at least {MIN_ROWS} rows, got {n}")
    if dataset.p < 1:
        raise DataError("need at least one covariate")
    if len(dataset.names) != dataset.p:
        raise DataError(f"{len(dataset.names)} names for {dataset.p} covariates")
    seen = set()
    for name in dataset.names:
        if name in seen:
            raise DuplicateName(f"duplicate covariate name {name!r}")
        seen.add(name)
    for label, arr in (("y", dataset.y), ("a", dataset.a)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise NonFiniteValue(f"non-finite value in column {label!r} at row {bad[0]}")
    bad_rows, bad_cols = np.nonzero(~np.isfinite(dataset.x))
    if bad_rows.size:
        raise NonFiniteValue(
            f"non-finite value in column {dataset.names[bad_cols[0]]!r} at row {bad_rows[0]}"
        )
    bad = np.flatnonzero((dataset.a != 0) & (dataset.a != 1))
    if bad.size:
        raise TreatmentNotBinary(f"treatment value {dataset.a[bad[0]]!r} at row {bad[0]} is not 0/1")
    if dataset.q0 is not None:
        if dataset.q0.shape != (n,):
            raise DataError("propensity length mismatch")
        bad = np.flatnonzero(~np.isfinite(dataset.q0))
        if bad.size:
            raise NonFiniteValue(f"non-finite value in column 'q0' at row {bad[0]}")
        bad = np.flatnonzero((dataset.q0 <= 0) | (dataset.q0 >= 1))
        if bad.size:
            raise PropensityOutOfRange(f"propensity {dataset.q0[bad[0]]!r} at row {bad[0]} not in (0, 1)")
    return dataset


def compute_w(a, q) -> np.ndarray:
    """Treatment residual ``a - q``; ``q`` may be a scalar or a vector in (0, 1)."""
    a = np.asarray(a, dtype=float)
    q = np.broadcast_to(np.asarray(q, dtype=float), a.shape) if np.ndim(q) == 0 else np.asarray(q, dtype=float)
    if q.shape != a.shape:
        raise DataError(f"length mismatch: a has {a.shape}, q has {q.shape}")
    if np.any((q <= 0) | (q >= 1)) or not np.all(np.isfinite(q)):
        raise PropensityOutOfRange("propensity must lie strictly inside (0, 1)")
    return a - q


@dataclass(frozen=True)
class StepContext:
    """Selected set J, remaining candidates and the design ``[1, X_J]``."""

    j_set: tuple[int, ...]
    jc_set: tuple[int, ...]
    xtilde: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, x: np.ndarray, j_set: Sequence[int] = (), order: Sequence[int] | None = None) -> "StepContext":
        p = x.shape[1]
        j_set = tuple(int(j) for j in j_set)
        if len(set(j_set)) != len(j_set) or any(j < 0 or j >= p for j in j_set):
            raise DataError(f"invalid selected set {j_set}")
        order = range(p) if order is None else order
        jc_set = tuple(int(k) for k in order if k not in j_set)
        return cls(j_set, jc_set, _frozen(design(x, j_set)))

    def extend(self, x: np.ndarray, k: int, order: Sequence[int] | None = None) -> "StepContext":
        if k not in self.jc_set:
            raise DataError(f"covariate {k} is not a remaining candidate")
        order = self.jc_set if order is None else order
        return StepContext.build(x, self.j_set + (k,), [c for c in order if c != k and c not in self.j_set])


def design(x: np.ndarray, j_set: Sequence[int]) -> np.ndarray:
    """``[1, X_J]``; works on stacked ``(..., n, p)`` inputs."""
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([ones, x[..., list(j_set)]], axis=-1)


@dataclass(frozen=True)
class Residualized:
    w: np.ndarray
    r: np.ndarray
    source: Literal["rct", "doubly-robust"] = "rct"
