"""Growth-optimal portfolio solvers and the balance identities."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from balmarkets.errors import InfeasibleConstraint
from balmarkets.growth_opt import (
    growth_optimal_constrained,
    growth_optimal_hyperplane,
    growth_rate,
    implied_interest_rate,
    numeraire_condition,
    perfect_balance_residual,
)
from balmarkets.market_model import ConstraintSet


def _random_problem(rng, d):
    m = rng.standard_normal((d, d))
    c = m @ m.T + 0.05 * np.eye(d)
    a = rng.standard_normal(d)
    return a, c


def test_hyperplane_solution_satisfies_first_order_conditions():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.integers(1, 6)
        a, c = _random_problem(rng, d)
        rho, rate = growth_optimal_hyperplane(a, c)
        assert abs(rho.sum() - 1.0) < 1e-10
        # stationarity: a - c rho is the implied rate in every coordinate
        grad = a - c @ rho
        assert np.ptp(grad) < 1e-8
        assert rate == pytest.approx(grad[0], abs=1e-8)
        assert rate == pytest.approx(implied_interest_rate(a, c), abs=1e-10)


def test_hyperplane_beats_random_competitors():
    rng = np.random.default_rng(8)
    a, c = _random_problem(rng, 4)
    rho, r = growth_optimal_hyperplane(a, c)
    g_star = growth_rate(rho, a, c, r)
    for _ in range(200):
        z = rng.standard_normal(4)
        pi = z - (z.sum() - 1.0) / 4.0
        assert growth_rate(pi, a, c, r) <= g_star + 1e-10


def test_constrained_matches_hyperplane_when_unconstrained():
    rng = np.random.default_rng(9)
    for _ in range(10):
        d = int(rng.integers(2, 5))
        a, c = _random_problem(rng, d)
        rho_h, g_h = growth_optimal_hyperplane(a, c)
        sol = growth_optimal_constrained(
            a, c, implied_interest_rate(a, c), ConstraintSet.budget_hyperplane())
        np.testing.assert_allclose(sol.rho, rho_h, atol=1e-7)
        assert sol.kkt_residual < 1e-7


def test_simplex_constraint_activates_when_optimum_shorts():
    # strongly negative drift on company 0 pushes the unconstrained
    # optimum below zero; the simplex solution must clip it
    a = np.array([-5.0, 0.3])
    c = np.diag([0.04, 0.09])
    rho_free, _ = growth_optimal_hyperplane(a, c)
    assert rho_free[0] < 0.0
    sol = growth_optimal_constrained(a, c, 0.0, ConstraintSet.closed_simplex())
    assert sol.rho[0] == pytest.approx(0.0, abs=1e-9)
    assert sol.rho[1] == pytest.approx(1.0, abs=1e-9)


def test_constrained_never_beats_unconstrained():
    rng = np.random.default_rng(10)
    for _ in range(20):
        d = int(rng.integers(2, 6))
        a, c = _random_problem(rng, d)
        rho_free, r = growth_optimal_hyperplane(a, c)
        g_free = growth_rate(rho_free, a, c, r)
        sol = growth_optimal_constrained(a, c, r, ConstraintSet.closed_simplex())
        assert growth_rate(sol.rho, a, c, r) <= g_free + 1e-9
        assert np.all(sol.rho >= -1e-12)
        assert abs(sol.rho.sum() - 1.0) < 1e-9


def test_box_constraint_is_respected():
    a = np.array([2.0, 0.0, -2.0])
    c = np.eye(3)
    box = ConstraintSet.box_hyperplane([-0.25, -0.25, -0.25], [1.25, 1.25, 1.25])
    sol = growth_optimal_constrained(a, c, 0.0, box)
    assert np.all(sol.rho >= -0.25 - 1e-9)
    assert np.all(sol.rho <= 1.25 + 1e-9)
    assert abs(sol.rho.sum() - 1.0) < 1e-9


def test_infeasible_box_raises():
    with pytest.raises(InfeasibleConstraint):
        ConstraintSet.box_hyperplane([0.2, 0.2], [0.6, 0.6])


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_balanced_drift_implies_zero_residual(seed):
    """Drift of the form c kappa + r 1 is flagged as perfectly balanced."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    _, c = _random_problem(rng, d)
    kappa = rng.dirichlet(np.ones(d))
    r = float(rng.standard_normal())
    a = c @ kappa + r
    assert perfect_balance_residual(kappa, a, c) < 1e-8
    assert implied_interest_rate(a, c) == pytest.approx(r, abs=1e-8)
    rho, _ = growth_optimal_hyperplane(a, c)
    np.testing.assert_allclose(rho, kappa, atol=1e-8)


def test_unbalanced_drift_has_positive_residual():
    c = np.diag([0.04, 0.09])
    kappa = np.array([0.5, 0.5])
    a = np.array([1.0, 0.0])
    assert perfect_balance_residual(kappa, a, c) > 0.1


def test_growth_rate_hand_computed():
    # g(pi) = r + pi . (a - r 1) - pi . c pi / 2
    pi = np.array([0.6, 0.4])
    a = np.array([0.1, 0.05])
    c = np.array([[0.04, 0.01], [0.01, 0.09]])
    r = 0.02
    expected = r + pi @ (a - r) - 0.5 * pi @ c @ pi
    assert growth_rate(pi, a, c, r) == pytest.approx(expected, abs=1e-14)


def test_growth_rate_broadcasts_over_batches():
    rng = np.random.default_rng(12)
    a, c = _random_problem(rng, 3)
    batch = rng.dirichlet(np.ones(3), size=50)
    vec = growth_rate(batch, a, c, 0.01)
    assert vec.shape == (50,)
    for i in range(0, 50, 7):
        assert vec[i] == pytest.approx(growth_rate(batch[i], a, c, 0.01))


def test_numeraire_condition_zero_against_self_and_optimum():
    rng = np.random.default_rng(13)
    a, c = _random_problem(rng, 4)
    r = implied_interest_rate(a, c)
    rho, _ = growth_optimal_hyperplane(a, c)
    for _ in range(20):
        z = rng.standard_normal(4)
        pi = z - (z.sum() - 1.0) / 4.0
        # any budget-feasible portfolio is dominated by the optimum
        assert numeraire_condition(pi, rho, a, c, r) <= 1e-10
    assert numeraire_condition(rho, rho, a, c, r) == pytest.approx(0.0, abs=1e-12)
