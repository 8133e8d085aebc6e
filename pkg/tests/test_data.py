import numpy as np
import pytest

from seqint.data import Dataset, StepContext, compute_w, design, validate
from seqint.errors import (
    DataError,
    DuplicateName,
    NonFiniteValue,
    PropensityOutOfRange,
    TooFewRows,
    TreatmentNotBinary,
)


def small(**kw):
    base = dict(y=[1, 2, 3, 4], a=[0, 1, 0, 1], x=np.arange(4.0)[:, None])
    base.update(kw)
    return Dataset(**base)


def test_valid_dataset_passes_unchanged():
    ds = small()
    assert validate(ds) is ds
    assert validate(validate(ds)) == ds
    assert ds.n == 4 and ds.p == 1 and ds.names == ("x1",)


@pytest.mark.parametrize(
    "kw, err",
    [
        (dict(a=[0, 2, 0, 1]), TreatmentNotBinary),
        (dict(q0=[0.5, 1.0, 0.5, 0.5]), PropensityOutOfRange),
        (dict(q0=[0.5, 0.0, 0.5, 0.5]), PropensityOutOfRange),
        (dict(y=[1, np.nan, 3, 4]), NonFiniteValue),
        (dict(x=np.array([[0.0], [np.inf], [1.0], [2.0]])), NonFiniteValue),
        (dict(x=np.ones((4, 2)), names=("u", "u")), DuplicateName),
        (dict(y=[1, 2, 3], a=[0, 1, 0], x=np.ones((3, 1))), TooFewRows),
    ],
)
def test_invalid_datasets(kw, err):
    with pytest.raises(err):
        validate(small(**kw))


def test_error_names_offending_column_and_row():
    with pytest.raises(NonFiniteValue, match=r"'x1'.*row 1"):
        validate(small(x=np.array([[0.0], [np.nan], [1.0], [2.0]])))


def test_internal_resamples_skip_row_minimum():
    ds = Dataset([1.0], [1.0], [[0.0]])
    assert validate(ds, internal=True) is ds


def test_compute_w_examples():
    np.testing.assert_array_equal(compute_w([1, 0, 1, 0], 0.5), [0.5, -0.5, 0.5, -0.5])
    np.testing.assert_allclose(compute_w([1, 0], [0.8, 0.2]), [0.2, -0.2])
    with pytest.raises(DataError):
        compute_w([1], [0.0])
    with pytest.raises(DataError):
        compute_w([1, 0], [0.5, 0.5, 0.5])


def test_compute_w_never_zero():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 2, 500)
    q = rng.uniform(1e-6, 1 - 1e-6, 500)
    w = compute_w(a, q)
    assert np.all((np.abs(w) < 1) & (w != 0))


def test_step_context_partitions_indices():
    x = np.random.default_rng(0).standard_normal((10, 4))
    step = StepContext.build(x, [2])
    assert step.jc_set == (0, 1, 3)
    assert set(step.j_set) | set(step.jc_set) == set(range(4))
    np.testing.assert_array_equal(step.xtilde[:, 0], 1.0)
    np.testing.assert_array_equal(step.xtilde[:, 1], x[:, 2])
    nxt = step.extend(x, 0)
    assert nxt.j_set == (2, 0) and nxt.jc_set == (1, 3)
    with pytest.raises(DataError):
        StepContext.build(x, [1, 1])
    np.testing.assert_array_equal(design(x, []), np.ones((10, 1)))


def test_dataset_is_immutable():
    ds = small()
    with pytest.raises(ValueError):
        ds.y[0] = 5.0
