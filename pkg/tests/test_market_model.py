"""Parameter containers, coefficient specs, and the PSD factorization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from balmarkets.errors import (
    AsymmetricCovariance,
    DimensionMismatch,
    IndefiniteMatrix,
    NonPositiveInitialCap,
)
from balmarkets.market_model import (
    ConstraintKind,
    ConstraintSet,
    MarketParams,
    PathGrid,
    ProcessSpec,
    eval_spec,
    psd_factor,
    validate_params,
)


def _random_psd(rng, d, rank=None):
    b = rng.normal(size=(d, rank if rank is not None else d))
    return b @ b.T


# ---------------------------------------------------------------------------
# ProcessSpec


def test_constant_spec_ignores_arguments():
    spec = ProcessSpec.constant(2.5)
    assert spec(0.0) == 2.5
    assert spec(17.3, np.array([0.5, 0.5])) == 2.5
    assert spec.is_constant()
    assert not spec.depends_on_state()


def test_time_table_interpolates_between_knots():
    spec = ProcessSpec.time_table([0.0, 1.0, 2.0], [0.0, 2.0, 2.0])
    assert spec(0.5) == pytest.approx(1.0)
    assert spec(1.5) == pytest.approx(2.0)
    # outside the table the nearest value extends flat
    assert spec(5.0) == pytest.approx(2.0)
    assert not spec.depends_on_state()


def test_state_function_sees_the_state():
    spec = ProcessSpec.state_function(lambda t, k: float(k.sum()) + t)
    assert spec.depends_on_state()
    assert spec(1.0, np.array([0.25, 0.75])) == pytest.approx(2.0)


def test_eval_spec_matches_call():
    spec = ProcessSpec.constant(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(eval_spec(spec, 0.0), spec(0.0))


# ---------------------------------------------------------------------------
# validate_params

@st.composite
def _valid_params(draw):
    d = draw(st.integers(min_value=1, max_value=5))
    seed = draw(st.integers(min_value=0, max_value=2**31 - 1))
    rng = np.random.default_rng(seed)
    a = rng.normal(size=d)
    c = _random_psd(rng, d, rank=draw(st.integers(min_value=1, max_value=d)))
    r = float(rng.normal())
    s0 = rng.uniform(0.1, 10.0, size=d)
    return a, c, r, s0


@given(_valid_params())
@settings(max_examples=60, deadline=None)
def test_validate_accepts_valid_parameter_sets(tup):
    a, c, r, s0 = tup
    params = MarketParams.from_constants(a, c, r, s0)
    assert validate_params(params) is params


def test_validate_rejects_asymmetric_covariance():
    params = MarketParams.from_constants(
        [0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]], 0.0, [1.0, 1.0])
    with pytest.raises(AsymmetricCovariance):
        validate_params(params)


def test_validate_rejects_indefinite_covariance():
    params = MarketParams.from_constants(
        [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 0.0, [1.0, 1.0])
    with pytest.raises(Exception) as exc_info:
        validate_params(params)
    assert "eigenvalue" in str(exc_info.value)


def test_validate_rejects_nonpositive_initial_caps():
    params = MarketParams.from_constants(
        [0.0, 0.0], np.eye(2), 0.0, [1.0, 0.0])
    with pytest.raises(NonPositiveInitialCap):
        validate_params(params)


def test_validate_rejects_shape_mismatch():
    params = MarketParams.from_constants(
        [0.0, 0.0, 0.0], np.eye(2), 0.0, [1.0, 1.0])
    with pytest.raises(DimensionMismatch):
        validate_params(params)


# ---------------------------------------------------------------------------
# psd_factor


@given(st.integers(min_value=0, max_value=2**31 - 1),
       st.integers(min_value=1, max_value=6))
@settings(max_examples=60, deadline=None)
def test_psd_factor_reconstructs_full_rank(seed, d):
    rng = np.random.default_rng(seed)
    c = _random_psd(rng, d) + 1e-6 * np.eye(d)
    sigma = psd_factor(c)
    assert np.allclose(sigma @ sigma.T, c, atol=1e-10 * (1.0 + np.abs(c).max()))


def test_psd_factor_handles_rank_deficiency():
    rng = np.random.default_rng(7)
    c = _random_psd(rng, 5, rank=2)
    sigma = psd_factor(c)
    assert np.allclose(sigma @ sigma.T, c, atol=1e-10 * (1.0 + np.abs(c).max()))


def test_psd_factor_zero_matrix():
    sigma = psd_factor(np.zeros((3, 3)))
    assert np.allclose(sigma, 0.0)


def test_psd_factor_rejects_indefinite():
    c = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(IndefiniteMatrix):
        psd_factor(c)


# ---------------------------------------------------------------------------
# PathGrid


def test_grid_times_endpoints():
    grid = PathGrid(dt=0.25, n_steps=8)
    t = grid.times()
    assert t[0] == 0.0
    assert t[-1] == pytest.approx(2.0)
    assert len(t) == 9


def test_grid_rejects_bad_steps():
    with pytest.raises(ValueError):
        PathGrid(dt=-0.1, n_steps=10)
    with pytest.raises(ValueError):
        PathGrid(dt=0.1, n_steps=0)


# ---------------------------------------------------------------------------
# constraint sets


def test_closed_simplex_membership():
    cs = ConstraintSet.closed_simplex()
    assert cs.kind is ConstraintKind.CLOSED_SIMPLEX
    assert cs.contains(np.array([0.2, 0.3, 0.5]))
    assert cs.contains(np.array([1.0, 0.0, 0.0]))
    assert not cs.contains(np.array([0.6, 0.6, -0.2]))


def test_budget_hyperplane_membership():
    cs = ConstraintSet.budget_hyperplane()
    # shorting is allowed as long as the weights still sum to one
    assert cs.contains(np.array([1.5, -0.5]))
    assert not cs.contains(np.array([0.7, 0.7]))


def test_box_hyperplane_membership():
    # boxes must contain the whole simplex; they only limit excursions
    # beyond it
    cs = ConstraintSet.box_hyperplane(
        np.array([-0.5, -0.5]), np.array([1.5, 1.5]))
    assert cs.contains(np.array([1.3, -0.3]))
    assert not cs.contains(np.array([1.8, -0.8]))
    with pytest.raises(Exception):
        ConstraintSet.box_hyperplane(np.array([0.2, 0.0]),
                                     np.array([1.0, 1.0]))
