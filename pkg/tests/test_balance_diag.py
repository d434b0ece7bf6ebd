"""Balance loss, segregation, limiting-distribution, and tail diagnostics."""

import numpy as np
import pytest

from balmarkets.balance_diag import (
    bank_rate_statistic,
    classify_outcome,
    distance_matrix,
    equivalence_classes,
    limiting_distribution,
    limiting_to_csv,
    lln_diagnostic,
    loss_of_balance,
    relative_covariance,
    relative_growth,
    relcap_drift,
    wealth_path,
)
from balmarkets.errors import HorizonTooShort, ShapeMismatch
from balmarkets.market_model import MarketParams, PathGrid, ProcessSpec
from balmarkets.sde_engine import (
    EngineDiagnostics,
    PathSet,
    simulate_capitalizations,
    simulate_relative_caps_balanced,
)

C3 = np.array([
    [0.09, 0.02, 0.01],
    [0.02, 0.16, 0.03],
    [0.01, 0.03, 0.25],
])
K3 = np.array([0.5, 0.3, 0.2])


def _synthetic_ps(kappa, dt=0.01):
    """Wrap a hand-built weight array in a PathSet."""
    kappa = np.asarray(kappa, dtype=float)
    n, steps, d = kappa.shape
    grid = PathGrid(dt=dt, n_steps=steps - 1)
    return PathSet(
        grid=grid,
        n_paths=n,
        seed=0,
        kappa=kappa,
        stored_steps=np.arange(steps),
        diagnostics=EngineDiagnostics(),
    )


# ---------------------------------------------------------------------------
# outcome classification on synthetic L paths


def test_flat_small_L_is_balanced():
    t = np.linspace(0.0, 100.0, 401)
    L = 1.0 - np.exp(-t)
    assert classify_outcome(L, t) == "Balanced"


def test_linear_growth_is_unbalanced():
    t = np.linspace(0.0, 100.0, 401)
    assert classify_outcome(0.5 * t, t) == "Unbalanced"


def test_flat_but_huge_L_is_not_balanced():
    t = np.linspace(0.0, 100.0, 401)
    L = np.full_like(t, 60.0)
    assert classify_outcome(L, t, L_cap=50.0) != "Balanced"


def test_slow_creep_is_indeterminate():
    t = np.linspace(0.0, 100.0, 401)
    # tail slope of 5e-3 sits between eps and 10 eps
    assert classify_outcome(5e-3 * t, t) == "Indeterminate"


# ---------------------------------------------------------------------------
# loss of balance on simulated markets


def _balanced_specs(c, rate):
    a_spec = ProcessSpec.state_function(lambda t, k: c @ k + rate)
    return a_spec, ProcessSpec.constant(rate)


def test_balanced_market_has_zero_loss():
    grid = PathGrid(dt=1e-3, n_steps=1000)
    ps = simulate_relative_caps_balanced(
        ProcessSpec.constant(C3), K3, grid, 40, 17)
    a_spec, r_spec = _balanced_specs(C3, 0.02)
    rep = loss_of_balance(ps, a_spec, r_spec)
    assert np.abs(rep.L_path).max() <= 1e-9
    assert set(rep.classification) == {"Balanced"}
    d = rep.to_json_dict()
    assert d["classification_counts"] == {"Balanced": 40}
    assert d["L_terminal_max"] <= 1e-9


def test_unbalanced_drift_accumulates_loss():
    # one company with a large drift edge the others cannot match
    params = MarketParams.from_constants(
        [1.0, 0.0], np.diag([0.04, 0.04]), 0.0, [1.0, 1.0])
    grid = PathGrid(dt=0.01, n_steps=2000)
    ps = simulate_capitalizations(params, grid, 30, 19, store_every=10)
    rep = loss_of_balance(
        ps, a_spec=ProcessSpec.constant(np.array([1.0, 0.0])),
        r_spec=ProcessSpec.constant(0.0))
    assert rep.L_path[:, -1].min() > 0.0
    assert np.all(np.diff(rep.L_path, axis=1) >= -1e-12)


def test_report_serialization_shape():
    grid = PathGrid(dt=0.01, n_steps=100)
    ps = simulate_relative_caps_balanced(
        ProcessSpec.constant(C3), K3, grid, 7, 23)
    a_spec, r_spec = _balanced_specs(C3, 0.0)
    d = loss_of_balance(ps, a_spec, r_spec).to_json_dict()
    assert set(d) == {
        "horizon", "n_paths", "eps_slope", "L_cap",
        "classification_counts", "L_terminal_mean", "L_terminal_max",
        "slope_tail_mean",
    }
    assert d["n_paths"] == 7


# ---------------------------------------------------------------------------
# segregation


def test_distance_matrix_symmetry_and_diagonal():
    params = MarketParams.from_constants(
        [0.3, 0.0, 0.0],
        np.diag([0.04, 0.04, 0.09]),
        0.0,
        [1.0, 1.0, 1.0],
    )
    grid = PathGrid(dt=0.01, n_steps=500)
    ps = simulate_capitalizations(params, grid, 2, 29)
    dm = distance_matrix(ps, a_spec=ProcessSpec.constant([0.3, 0.0, 0.0]))
    v = dm.values
    assert v.shape == (3, 3)
    np.testing.assert_allclose(v, v.T, atol=1e-12)
    assert np.all(np.diag(v) == 0.0)
    assert np.all(v[np.triu_indices(3, 1)] > 0.0)
    assert dm.horizon == pytest.approx(5.0)
    j = dm.to_json_dict()
    assert j["horizon"] == pytest.approx(5.0)
    assert np.asarray(j["values"]).shape == (3, 3)


def test_equal_companies_have_small_distance():
    # two identical companies plus one with a drift edge: the identical
    # pair stays close while both diverge from the third
    params = MarketParams.from_constants(
        [0.0, 0.0, 0.5],
        np.diag([0.04, 0.04, 0.04]),
        0.0,
        [1.0, 1.0, 1.0],
    )
    grid = PathGrid(dt=0.01, n_steps=1000)
    ps = simulate_capitalizations(params, grid, 1, 31)
    dm = distance_matrix(ps, a_spec=ProcessSpec.constant([0.0, 0.0, 0.5]))
    assert dm.values[0, 1] < dm.values[0, 2]
    assert dm.values[0, 1] < dm.values[1, 2]
    classes, intransitive = equivalence_classes(dm, d_threshold=dm.values[0, 2] / 2.0)
    assert not intransitive
    assert sorted(map(sorted, classes)) == [[0, 1], [2]]


def test_intransitive_grouping_is_flagged():
    from balmarkets.balance_diag import DistanceMatrix
    # 0~1 and 1~2 close but 0~2 far: chained grouping is reported
    values = np.array([
        [0.0, 1.0, 40.0],
        [1.0, 0.0, 1.0],
        [40.0, 1.0, 0.0],
    ])
    classes, intransitive = equivalence_classes(
        DistanceMatrix(values=values, horizon=1.0), d_threshold=5.0)
    assert intransitive
    assert sorted(map(sorted, classes)) == [[0, 1, 2]]


# ---------------------------------------------------------------------------
# limiting distribution


def test_limiting_distribution_on_synthetic_paths():
    steps = 101
    settled_at_vertex = np.zeros((steps, 2))
    settled_at_vertex[:, 0] = 1.0
    interior = np.column_stack([np.full(steps, 0.6), np.full(steps, 0.4)])
    swing = np.empty((steps, 2))
    swing[:, 0] = 0.5 + 0.45 * np.sin(np.linspace(0.0, 20.0, steps))
    swing[:, 1] = 1.0 - swing[:, 0]
    ps = _synthetic_ps(np.stack([settled_at_vertex, interior, swing]))
    ld = limiting_distribution(ps)
    assert ld.labels == ["atom_1", "interior", "oscillating"]
    assert ld.histogram == {"atom_1": 1, "interior": 1, "oscillating": 1}
    assert ld.fraction("atom_1") == pytest.approx(1.0 / 3.0)


def test_unsettled_majority_raises_horizon_too_short():
    steps = 101
    drifting = np.empty((steps, 2))
    # moves by 0.2 over the tail: neither settled nor oscillating
    drifting[:, 0] = np.linspace(0.3, 0.7, steps)
    drifting[:, 1] = 1.0 - drifting[:, 0]
    ps = _synthetic_ps(np.stack([drifting, drifting.copy()]))
    with pytest.raises(HorizonTooShort):
        limiting_distribution(ps)
    # a permissive cap turns the same data into labeled output
    ld = limiting_distribution(ps, indeterminate_cap=1.0)
    assert ld.labels == ["indeterminate", "indeterminate"]


def test_limiting_csv_layout(tmp_path):
    steps = 11
    flat = np.column_stack([np.ones(steps), np.zeros(steps)])
    ps = _synthetic_ps(flat[None])
    ld = limiting_distribution(ps)
    f = tmp_path / "limiting.csv"
    limiting_to_csv(ld, f, L_terminal=np.array([2.5]))
    lines = f.read_text().splitlines()
    assert lines[0] == "path,class,terminal_kappa_1,terminal_kappa_2,L_terminal"
    assert lines[1] == "0,atom_1,1,0,2.5"


# ---------------------------------------------------------------------------
# wealth and tail diagnostics


def test_wealth_of_market_portfolio_tracks_total_capital():
    params = MarketParams.from_constants(
        [0.1, 0.0], np.diag([0.04, 0.09]), 0.0, [2.0, 3.0])
    grid = PathGrid(dt=1e-3, n_steps=500)
    ps = simulate_capitalizations(params, grid, 12, 37,
                                  store_increments=True)
    V = wealth_path(ps, "market",
                    a_spec=ProcessSpec.constant([0.1, 0.0]),
                    r_spec=ProcessSpec.constant(0.0))
    total = ps.caps.sum(axis=2)
    # Euler log-wealth vs exact per-company exponentials: O(dt) agreement
    np.testing.assert_allclose(V, total / total[:, :1], rtol=5e-3)


def test_relative_quantities_hand_checked():
    c = np.array([[0.04, 0.0], [0.0, 0.09]])
    pi = np.array([0.7, 0.3])
    rho = np.array([0.5, 0.5])
    diff = pi - rho
    assert relative_covariance(pi, rho, c) == pytest.approx(diff @ c @ diff)
    a = np.array([0.1, 0.05])
    g_gap = relative_growth(pi, rho, a, c, 0.02)
    expected = (pi - rho) @ (a - 0.02) - 0.5 * (pi @ c @ pi - rho @ c @ rho)
    assert g_gap == pytest.approx(expected, abs=1e-14)


def test_relcap_drift_vanishes_exactly_when_balanced():
    rng = np.random.default_rng(41)
    m = rng.standard_normal((3, 3))
    c = m @ m.T + 0.1 * np.eye(3)
    kappa = rng.dirichlet(np.ones(3))
    a = c @ kappa + 0.07
    assert np.abs(relcap_drift(kappa, a, c)).max() < 1e-12
    assert np.abs(relcap_drift(kappa, a + [0.5, 0.0, 0.0], c)).max() > 1e-3


def test_lln_diagnostic_flags_collapse():
    t = np.linspace(0.0, 300.0, 3001)
    B = 1.0 + t
    rng = np.random.default_rng(43)
    X = np.cumsum(rng.standard_normal(3001) * 0.1)
    ratio, flag = lln_diagnostic(X, B)
    assert flag
    assert abs(ratio) < 0.05


def test_lln_diagnostic_keeps_quiet_without_evidence():
    # normalizer never exceeds 100: no call either way
    B = np.linspace(1.0, 50.0, 101)
    X = np.zeros(101)
    ratio, flag = lln_diagnostic(X, B)
    assert ratio == 0.0
    assert not flag
    # linear growth in X keeps the ratio large
    B2 = np.linspace(1.0, 400.0, 101)
    ratio2, flag2 = lln_diagnostic(B2 * 0.5, B2)
    assert ratio2 == pytest.approx(0.5)
    assert not flag2


def test_lln_diagnostic_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        lln_diagnostic(np.zeros(5), np.zeros(6))
    with pytest.raises(Exception):
        lln_diagnostic(np.zeros(5), np.array([1.0, 2.0, 1.5, 3.0, 4.0]))


def test_bank_rate_statistic_zero_when_rates_agree():
    grid = PathGrid(dt=0.01, n_steps=200)
    ps = simulate_relative_caps_balanced(
        ProcessSpec.constant(C3), K3, grid, 1, 47)
    same = ProcessSpec.constant(0.03)
    assert bank_rate_statistic(ps, same, same) == pytest.approx(0.0)
    other = ProcessSpec.constant(0.05)
    stat = bank_rate_statistic(ps, other, same)
    ones = np.ones(3)
    expected = ones @ np.linalg.solve(C3, ones) * 0.02**2 * 2.0
    assert stat == pytest.approx(expected, rel=1e-6)
