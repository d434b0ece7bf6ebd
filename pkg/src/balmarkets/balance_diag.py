"""Balance diagnostics on simulated paths.

Everything in this module consumes a :class:`~balmarkets.sde_engine.PathSet`
and reuses the path's own driver increments; pathwise identities such as the
wealth decomposition only hold when drift and noise come from the same
realization, so nothing here re-simulates.

The central object is the loss-of-balance process

    L_t = integral of (g* - g^kappa) du  over [0, t],

where ``g*`` is the best growth rate over the closed simplex and
``g^kappa`` the market portfolio's.  ``L`` is flat exactly when the market
weights are martingales; its tail slope drives the Balanced / Unbalanced /
Indeterminate call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonTooShort, ShapeMismatch, SingularCovariance
from .growth_opt import growth_optimal_constrained, growth_rate
from .market_model import ConstraintSet, ProcessSpec, psd_factor
from .sde_engine import PathSet

__all__ = [
    "BalanceReport",
    "DistanceMatrix",
    "relcap_drift",
    "relative_growth",
    "relative_covariance",
    "loss_of_balance",
    "classify_outcome",
    "wealth_path",
    "log_relative_wealth_decomposition",
    "pairwise_distance",
    "distance_matrix",
    "equivalence_classes",
    "limiting_distribution",
    "LimitingDistribution",
    "limiting_to_csv",
    "lln_diagnostic",
    "bank_rate_statistic",
]

DEFAULT_EPS_SLOPE = 1e-3
DEFAULT_L_CAP = 50.0
DEFAULT_DISTANCE_THRESHOLD = 25.0
DEFAULT_ATOM_EPS = 0.01
_GAP_TOL = 1e-12


# ---------------------------------------------------------------------------
# pointwise quantities


def relcap_drift(kappa, a, c) -> np.ndarray:
    """Drift of each weight: ``kappa_i * <e_i - kappa, a - c kappa>``.

    Vanishes identically iff ``a - c kappa`` is a multiple of the ones
    vector, i.e. iff the market is balanced at this state.  Broadcasts over
    leading axes of ``kappa``.
    """
    kappa = np.asarray(kappa, dtype=float)
    a = np.asarray(a, dtype=float)
    excess = a - kappa @ c
    mean_part = np.einsum("...i,...i->...", kappa, excess)
    return kappa * (excess - mean_part[..., None])


def relative_growth(pi, rho, a, c, r) -> float:
    """Growth-rate spread ``g^pi - g^rho``."""
    return growth_rate(pi, a, c, r) - growth_rate(rho, a, c, r)


def relative_covariance(pi, rho, c) -> float:
    """Quadratic-variation rate of the log wealth ratio: ``<pi-rho, c(pi-rho)>``."""
    diff = np.asarray(pi, dtype=float) - np.asarray(rho, dtype=float)
    return float(np.einsum("...i,ij,...j->...", diff, np.asarray(c, dtype=float), diff))


# ---------------------------------------------------------------------------
# loss of balance


@dataclass
class BalanceReport:
    """Loss-of-balance paths and their outcome classification.

    ``L_path`` has shape (n_paths, n_stored) and is nondecreasing along the
    time axis with ``L[:, 0] = 0``.  ``slope_tail`` is the average dL/dt
    over the final quarter of the horizon.
    """

    times: np.ndarray
    L_path: np.ndarray
    classification: list[str]
    L_terminal: np.ndarray
    slope_tail: np.ndarray
    eps_slope: float = DEFAULT_EPS_SLOPE
    L_cap: float = DEFAULT_L_CAP

    @property
    def n_paths(self) -> int:
        return self.L_path.shape[0]

    def to_json_dict(self) -> dict:
        counts: dict[str, int] = {}
        for label in self.classification:
            counts[label] = counts.get(label, 0) + 1
        return {
            "horizon": float(self.times[-1]),
            "n_paths": self.n_paths,
            "eps_slope": self.eps_slope,
            "L_cap": self.L_cap,
            "classification_counts": counts,
            "L_terminal_mean": float(self.L_terminal.mean()),
            "L_terminal_max": float(self.L_terminal.max()),
            "slope_tail_mean": float(self.slope_tail.mean()),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _growth_gap_grid(
    ps: PathSet,
    a_spec: ProcessSpec,
    r_spec: ProcessSpec,
    constraint: ConstraintSet,
) -> np.ndarray:
    """(n_paths, n_stored) array of ``g* - g^kappa`` at the stored states."""
    if ps.c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    c_spec = ps.c_spec
    times = ps.times()
    kappa = ps.kappa
    deterministic = not (
        a_spec.depends_on_state()
        or c_spec.depends_on_state()
        or r_spec.depends_on_state()
    )
    all_const = (
        a_spec.is_constant() and c_spec.is_constant() and r_spec.is_constant()
    )
    if all_const:
        a = np.asarray(a_spec(0.0), dtype=float)
        c = np.asarray(c_spec(0.0), dtype=float)
        r = float(r_spec(0.0))
        g_star = growth_optimal_constrained(a, c, r, constraint).g_star
        gk = growth_rate(kappa, a, c, r)
        return g_star - gk
    gap = np.empty(kappa.shape[:2])
    if deterministic:
        for k, t in enumerate(times):
            a = np.asarray(a_spec(float(t)), dtype=float)
            c = np.asarray(c_spec(float(t)), dtype=float)
            r = float(r_spec(float(t)))
            g_star = growth_optimal_constrained(a, c, r, constraint).g_star
            gap[:, k] = g_star - growth_rate(kappa[:, k], a, c, r)
        return gap
    # state-dependent coefficients force one solve per (path, step)
    for p in range(kappa.shape[0]):
        for k, t in enumerate(times):
            state = kappa[p, k]
            a = np.asarray(a_spec(float(t), state), dtype=float)
            c = np.asarray(c_spec(float(t), state), dtype=float)
            r = float(r_spec(float(t), state))
            g_star = growth_optimal_constrained(a, c, r, constraint).g_star
            gap[p, k] = g_star - growth_rate(state, a, c, r)
    return gap


def loss_of_balance(
    ps: PathSet,
    a_spec: ProcessSpec,
    r_spec: ProcessSpec,
    *,
    constraint: ConstraintSet | None = None,
    eps_slope: float = DEFAULT_EPS_SLOPE,
    L_cap: float = DEFAULT_L_CAP,
) -> BalanceReport:
    """Accumulate the growth-rate gap to the best simplex portfolio.

    Uses a left-endpoint rule on the stored grid: the increment over
    ``[t_k, t_{k+1}]`` is ``(g*_k - g^kappa_k) * (t_{k+1} - t_k)``.  The gap
    is nonnegative by construction (the market weight vector is feasible);
    anything below ``-1e-12`` signals a solver failure and raises.
    """
    if constraint is None:
        constraint = ConstraintSet.closed_simplex()
    gap = _growth_gap_grid(ps, a_spec, r_spec, constraint)
    worst = float(gap.min())
    if worst < -_GAP_TOL:
        raise ValueError(
            f"growth gap fell to {worst:.3e}; optimizer failed to dominate "
            "the market portfolio"
        )
    np.maximum(gap, 0.0, out=gap)
    times = ps.times()
    dts = np.diff(times)
    L = np.zeros_like(gap)
    np.cumsum(gap[:, :-1] * dts, axis=1, out=L[:, 1:])
    cls = [classify_outcome(L[p], times, eps_slope, L_cap) for p in range(len(L))]
    slope = np.array([_tail_slope(L[p], times) for p in range(len(L))])
    return BalanceReport(
        times=times,
        L_path=L,
        classification=cls,
        L_terminal=L[:, -1].copy(),
        slope_tail=slope,
        eps_slope=eps_slope,
        L_cap=L_cap,
    )


def _tail_slope(L: np.ndarray, times: np.ndarray) -> float:
    horizon = times[-1]
    idx = int(np.searchsorted(times, 0.75 * horizon))
    if idx >= len(times) - 1:
        idx = len(times) - 2
    return float((L[-1] - L[idx]) / (times[-1] - times[idx]))


def classify_outcome(
    L_path: np.ndarray,
    times: np.ndarray,
    eps_slope: float = DEFAULT_EPS_SLOPE,
    L_cap: float = DEFAULT_L_CAP,
) -> str:
    """Finite-horizon outcome call from the tail slope of L.

    Balanced when L has flattened out (tail slope below ``eps_slope`` per
    unit time) and stayed below ``L_cap``; Unbalanced when the tail still
    rises at more than ten times that rate; Indeterminate otherwise.
    """
    L_path = np.asarray(L_path, dtype=float)
    slope = _tail_slope(L_path, np.asarray(times, dtype=float))
    if slope < eps_slope and L_path[-1] < L_cap:
        return "Balanced"
    if slope > 10.0 * eps_slope:
        return "Unbalanced"
    return "Indeterminate"


# ---------------------------------------------------------------------------
# wealth


def _require_full_resolution(ps: PathSet, what: str) -> None:
    if ps.brownian_increments is None:
        raise ValueError(f"{what} needs stored Brownian increments")
    if len(ps.stored_steps) != ps.grid.n_steps + 1:
        raise ValueError(f"{what} needs store_every=1")


def _coeff_closure(ps: PathSet, a_spec, r_spec):
    """Resolve per-step (a, c, r) evaluation for a path set.

    Falls back to the balanced implied drift ``a = c kappa + r 1`` when no
    drift spec is available (the natural completion for weight-engine
    paths).
    """
    c_spec = ps.c_spec
    if c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    a_spec = a_spec if a_spec is not None else ps.a_spec
    r_spec = r_spec if r_spec is not None else ps.r_spec
    if r_spec is None:
        r_spec = ProcessSpec.constant(0.0)

    def coeffs(t: float, kappa_batch: np.ndarray):
        if c_spec.depends_on_state():
            c_rows = np.stack(
                [np.asarray(c_spec(t, row), dtype=float) for row in kappa_batch]
            )
        else:
            c_rows = np.asarray(c_spec(t), dtype=float)
        if r_spec.depends_on_state():
            r_rows = np.array(
                [float(r_spec(t, row)) for row in kappa_batch]
            )
        else:
            r_rows = float(r_spec(t))
        if a_spec is None:
            if c_rows.ndim == 2:
                a_rows = kappa_batch @ c_rows + np.atleast_1d(r_rows)[..., None]
            else:
                a_rows = np.einsum("pij,pj->pi", c_rows, kappa_batch)
                a_rows += np.atleast_1d(r_rows)[..., None]
        elif a_spec.depends_on_state():
            a_rows = np.stack(
                [np.asarray(a_spec(t, row), dtype=float) for row in kappa_batch]
            )
        else:
            a_rows = np.asarray(a_spec(t), dtype=float)
        return a_rows, c_rows, r_rows

    return coeffs


def _portfolio_rows(pi_spec, t: float, kappa_batch: np.ndarray, d: int) -> np.ndarray:
    if isinstance(pi_spec, str):
        if pi_spec != "market":
            raise ValueError(f"unknown portfolio shorthand {pi_spec!r}")
        return kappa_batch
    if isinstance(pi_spec, ProcessSpec):
        if pi_spec.depends_on_state():
            rows = np.stack(
                [np.asarray(pi_spec(t, row), dtype=float) for row in kappa_batch]
            )
        else:
            rows = np.asarray(pi_spec(t), dtype=float)
    else:
        rows = np.asarray(pi_spec, dtype=float)
    if rows.shape[-1] != d:
        raise ShapeMismatch(
            f"portfolio has {rows.shape[-1]} coordinates, market has {d}"
        )
    return rows


def wealth_path(
    ps: PathSet,
    pi_spec,
    *,
    a_spec: ProcessSpec | None = None,
    r_spec: ProcessSpec | None = None,
) -> np.ndarray:
    """Wealth of a self-financing portfolio along the stored paths, V_0 = 1.

    ``pi_spec`` gives the fraction of wealth in each company; whatever is
    left over (possibly negative) sits in the bank at the short rate.  The
    string ``"market"`` means hold the running weight vector itself.  The
    log-wealth update uses the path's own Brownian increments, so identities
    like ``V^{e_i} = S_i / S_i(0)`` hold exactly on capitalization paths.

    Returns an (n_paths, n_steps + 1) array.
    """
    _require_full_resolution(ps, "wealth_path")
    coeffs = _coeff_closure(ps, a_spec, r_spec)
    n, d = ps.n_paths, ps.d
    n_steps = ps.grid.n_steps
    dt = ps.grid.dt
    times = ps.times()
    log_v = np.zeros((n, n_steps + 1))
    const_c = ps.c_spec.is_constant()
    sigma_cache = psd_factor(np.asarray(ps.c_spec(0.0), dtype=float)) if const_c else None
    for k in range(n_steps):
        t = float(times[k])
        kap = ps.kappa[:, k]
        a, c, r = coeffs(t, kap)
        pi_b = np.broadcast_to(
            np.atleast_2d(_portfolio_rows(pi_spec, t, kap, d)), (n, d)
        )
        a_b = np.broadcast_to(np.atleast_2d(a), (n, d))
        r_b = np.broadcast_to(np.atleast_1d(r), (n,))
        if c.ndim == 2:
            cpi = pi_b @ c
            sigma = sigma_cache if const_c else psd_factor(c)
            noise = np.einsum(
                "pj,pj->p", pi_b @ sigma, ps.brownian_increments[:, k]
            )
        else:
            cpi = np.einsum("pij,pj->pi", c, pi_b)
            noise = np.empty(n)
            for p in range(n):
                noise[p] = pi_b[p] @ psd_factor(c[p]) @ ps.brownian_increments[p, k]
        drift = (
            r_b
            + np.einsum("pi,pi->p", pi_b, a_b) - r_b * pi_b.sum(axis=1)
            - 0.5 * np.einsum("pi,pi->p", pi_b, cpi)
        )
        log_v[:, k + 1] = log_v[:, k] + drift * dt + noise
    return np.exp(log_v)


def log_relative_wealth_decomposition(
    ps: PathSet,
    a_spec: ProcessSpec | None = None,
    r_spec: ProcessSpec | None = None,
    *,
    constraint: ConstraintSet | None = None,
):
    """Split ``log(V^market / V^growth-opt)`` into drift and noise parts.

    Returns ``(drift_part, martingale_part)``, both (n_paths, n_steps + 1).
    The drift part is ``-L_t``; the martingale part accumulates
    ``<kappa - rho, sigma dW>``.  Their sum reproduces the directly
    computed log wealth ratio because all three reuse the same increments.
    """
    _require_full_resolution(ps, "log_relative_wealth_decomposition")
    if constraint is None:
        constraint = ConstraintSet.closed_simplex()
    coeffs = _coeff_closure(ps, a_spec, r_spec)
    n, d = ps.n_paths, ps.d
    n_steps = ps.grid.n_steps
    dt = ps.grid.dt
    times = ps.times()
    drift_part = np.zeros((n, n_steps + 1))
    mart_part = np.zeros((n, n_steps + 1))
    const_all = (
        ps.c_spec.is_constant()
        and (a_spec or ps.a_spec) is not None
        and (a_spec or ps.a_spec).is_constant()
        and (r_spec or ps.r_spec or ProcessSpec.constant(0.0)).is_constant()
    )
    rho_cache = None
    for k in range(n_steps):
        t = float(times[k])
        kap = ps.kappa[:, k]
        a, c, r = coeffs(t, kap)
        if c.ndim == 2:
            sigma = psd_factor(c)
            if const_all:
                if rho_cache is None:
                    sol = growth_optimal_constrained(
                        np.asarray(a, dtype=float).reshape(d),
                        c,
                        float(np.atleast_1d(r)[0]),
                        constraint,
                    )
                    rho_cache = (sol.rho, sol.g_star)
                rho, g_star = rho_cache
                rho_rows = np.broadcast_to(rho, (n, d))
                gap = g_star - growth_rate(kap, a, c, float(np.atleast_1d(r)[0]))
            else:
                rho_rows = np.empty((n, d))
                gap = np.empty(n)
                a_b = np.broadcast_to(np.atleast_2d(a), (n, d))
                r_b = np.broadcast_to(np.atleast_1d(r), (n,))
                for p in range(n):
                    sol = growth_optimal_constrained(
                        a_b[p], c, float(r_b[p]), constraint
                    )
                    rho_rows[p] = sol.rho
                    gap[p] = sol.g_star - growth_rate(kap[p], a_b[p], c, float(r_b[p]))
            noise = np.einsum("pj,pj->p", (kap - rho_rows) @ sigma,
                              ps.brownian_increments[:, k])
        else:
            rho_rows = np.empty((n, d))
            gap = np.empty(n)
            noise = np.empty(n)
            a_b = np.broadcast_to(np.atleast_2d(a), (n, d))
            r_b = np.broadcast_to(np.atleast_1d(r), (n,))
            for p in range(n):
                sol = growth_optimal_constrained(a_b[p], c[p], float(r_b[p]), constraint)
                rho_rows[p] = sol.rho
                gap[p] = sol.g_star - growth_rate(kap[p], a_b[p], c[p], float(r_b[p]))
                noise[p] = (kap[p] - rho_rows[p]) @ psd_factor(c[p]) @ \
                    ps.brownian_increments[p, k]
        gap = np.maximum(gap, 0.0)
        drift_part[:, k + 1] = drift_part[:, k] - gap * dt
        mart_part[:, k + 1] = mart_part[:, k] + noise
    return drift_part, mart_part


# ---------------------------------------------------------------------------
# segregation distances


@dataclass
class DistanceMatrix:
    """Pairwise segregation distances accumulated to a horizon."""

    values: np.ndarray
    horizon: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeMismatch(f"distance matrix must be square, got {v.shape}")
        if np.abs(v - v.T).max() > 1e-9 or np.abs(np.diag(v)).max() > 1e-9:
            raise ValueError("distance matrix must be symmetric with zero diagonal")
        self.values = v

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def to_json_dict(self) -> dict:
        return {"horizon": self.horizon, "values": self.values.tolist()}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _pair_integrand(a, c, i: int, j: int):
    g_ij = (a[..., i] - 0.5 * c[..., i, i]) - (a[..., j] - 0.5 * c[..., j, j])
    c_ij = c[..., i, i] + c[..., j, j] - 2.0 * c[..., i, j]
    return np.abs(g_ij) + 0.5 * c_ij


def pairwise_distance(
    ps: PathSet,
    i: int,
    j: int,
    a_spec: ProcessSpec,
    *,
    horizon: float | None = None,
    path_index: int = 0,
) -> float:
    """Accumulated divergence between companies ``i`` and ``j`` on one path.

    Integrates ``|g^{i|j}| + c^{i|j} / 2`` (single-company growth spread
    plus half the variance of the log ratio) with a left-endpoint rule on
    the stored grid up to ``horizon``.
    """
    if i == j:
        return 0.0
    if ps.c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    times = ps.times()
    if horizon is None:
        horizon = float(times[-1])
    c_spec = ps.c_spec
    if a_spec.is_constant() and c_spec.is_constant():
        a = np.asarray(a_spec(0.0), dtype=float)
        c = np.asarray(c_spec(0.0), dtype=float)
        return float(_pair_integrand(a, c, i, j) * min(horizon, times[-1]))
    total = 0.0
    for k in range(len(times) - 1):
        t = float(times[k])
        if t >= horizon:
            break
        state = ps.kappa[path_index, k]
        a = np.asarray(a_spec(t, state), dtype=float)
        c = np.asarray(c_spec(t, state), dtype=float)
        step = min(float(times[k + 1]), horizon) - t
        total += float(_pair_integrand(a, c, i, j)) * step
    return total


def distance_matrix(
    ps: PathSet,
    a_spec: ProcessSpec,
    *,
    horizon: float | None = None,
    path_index: int = 0,
) -> DistanceMatrix:
    """All pairwise segregation distances on one path."""
    d = ps.d
    times = ps.times()
    if horizon is None:
        horizon = float(times[-1])
    vals = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            vals[i, j] = vals[j, i] = pairwise_distance(
                ps, i, j, a_spec, horizon=horizon, path_index=path_index
            )
    return DistanceMatrix(values=vals, horizon=horizon)


def equivalence_classes(
    D: DistanceMatrix,
    d_threshold: float = DEFAULT_DISTANCE_THRESHOLD,
):
    """Group companies whose accumulated divergence stays below a cutoff.

    Closeness at finite horizon need not be transitive, so classes are the
    connected components of the closeness graph; the returned flag is True
    when closure glued together a pair whose direct distance exceeds the
    threshold.
    """
    d = D.d
    close = D.values < d_threshold
    labels = np.full(d, -1)
    comp = 0
    for start in range(d):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = comp
        while stack:
            u = stack.pop()
            for v in range(d):
                if labels[v] < 0 and close[u, v]:
                    labels[v] = comp
                    stack.append(v)
        comp += 1
    classes = [sorted(np.flatnonzero(labels == k).tolist()) for k in range(comp)]
    intransitive = False
    for members in classes:
        for x in members:
            for y in members:
                if x < y and not close[x, y]:
                    intransitive = True
    return classes, intransitive


# ---------------------------------------------------------------------------
# limiting capital distribution


@dataclass
class LimitingDistribution:
    """Per-path terminal classification of the weight vector."""

    labels: list[str]
    terminal_kappa: np.ndarray
    histogram: dict[str, int] = field(default_factory=dict)
    atom_eps: float = DEFAULT_ATOM_EPS

    def fraction(self, label: str) -> float:
        return self.histogram.get(label, 0) / max(len(self.labels), 1)


def limiting_distribution(
    ps: PathSet,
    atom_eps: float = DEFAULT_ATOM_EPS,
    *,
    indeterminate_cap: float = 0.5,
) -> LimitingDistribution:
    """Classify where each path's weight vector is heading.

    A path that has settled (every coordinate moves less than ``atom_eps``
    over the final quarter of the horizon) is an atom at a vertex when its
    top weight exceeds ``1 - atom_eps`` and interior otherwise.  A path
    whose tail still swings some coordinate by more than 0.5 is
    oscillating.  Raises :class:`HorizonTooShort` when more than half the
    paths land in neither bucket.
    """
    times = ps.times()
    horizon = times[-1]
    tail_from = int(np.searchsorted(times, 0.75 * horizon))
    tail_from = min(tail_from, len(times) - 2)
    tail = ps.kappa[:, tail_from:, :]
    tail_range = tail.max(axis=1) - tail.min(axis=1)
    worst_range = tail_range.max(axis=1)
    terminal = ps.kappa[:, -1, :]
    labels = []
    for p in range(ps.n_paths):
        if worst_range[p] < atom_eps:
            top = int(np.argmax(terminal[p]))
            if terminal[p, top] > 1.0 - atom_eps:
                labels.append(f"atom_{top + 1}")
            else:
                labels.append("interior")
        elif worst_range[p] > 0.5:
            labels.append("oscillating")
        else:
            labels.append("indeterminate")
    histogram: dict[str, int] = {}
    for label in labels:
        histogram[label] = histogram.get(label, 0) + 1
    frac_ind = histogram.get("indeterminate", 0) / max(ps.n_paths, 1)
    if frac_ind > indeterminate_cap:
        raise HorizonTooShort(
            f"{frac_ind:.0%} of paths have not settled or cycled; "
            "extend the horizon"
        )
    return LimitingDistribution(
        labels=labels,
        terminal_kappa=terminal.copy(),
        histogram=histogram,
        atom_eps=atom_eps,
    )


def limiting_to_csv(
    ld: LimitingDistribution,
    path,
    L_terminal: np.ndarray | None = None,
) -> None:
    """Write ``path,class,terminal_kappa_1..d,L_terminal`` rows."""
    n, d = ld.terminal_kappa.shape
    if L_terminal is None:
        L_terminal = np.full(n, np.nan)
    with open(path, "w") as fh:
        cols = ",".join(f"terminal_kappa_{i + 1}" for i in range(d))
        fh.write(f"path,class,{cols},L_terminal\n")
        for p in range(n):
            row = ",".join(f"{x:.17g}" for x in ld.terminal_kappa[p])
            fh.write(f"{p},{ld.labels[p]},{row},{L_terminal[p]:.17g}\n")


# ---------------------------------------------------------------------------
# tail diagnostics


def lln_diagnostic(X_path: np.ndarray, B_path: np.ndarray):
    """Terminal ratio of a process to a nondecreasing normalizer.

    Returns ``(X_T / B_T, flag)`` where the flag reports whether the ratio
    has visibly collapsed (|ratio| < 0.05 with the normalizer past 100).
    """
    X = np.asarray(X_path, dtype=float)
    B = np.asarray(B_path, dtype=float)
    if X.shape != B.shape:
        raise ShapeMismatch(f"paths have shapes {X.shape} vs {B.shape}")
    if np.any(np.diff(B) < -1e-12):
        raise ValueError("normalizer path must be nondecreasing")
    ratio = float(X[-1] / B[-1])
    flag = bool(B[-1] > 100.0 and abs(ratio) < 0.05)
    return ratio, flag


def bank_rate_statistic(
    ps: PathSet,
    r_tilde_spec: ProcessSpec,
    r_spec: ProcessSpec,
    *,
    path_index: int = 0,
) -> float:
    """Accumulated ``<1, c^{-1} 1> |r~ - r|^2`` along one path.

    Measures how far an alternative bank rate drifts from the implied one,
    weighted by the market's inverse covariance.  Finite accumulation is
    the balance-preserving regime; reported as a raw number with no
    built-in cutoff.
    """
    if ps.c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    times = ps.times()
    total = 0.0
    ones = np.ones(ps.d)
    c_const = ps.c_spec.is_constant()
    if c_const:
        c = np.asarray(ps.c_spec(0.0), dtype=float)
        if np.linalg.cond(c) > 1e12:
            raise SingularCovariance("covariance is numerically singular")
        weight_const = float(ones @ np.linalg.solve(c, ones))
    for k in range(len(times) - 1):
        t = float(times[k])
        state = ps.kappa[path_index, k]
        if c_const:
            weight = weight_const
        else:
            c = np.asarray(ps.c_spec(t, state), dtype=float)
            if np.linalg.cond(c) > 1e12:
                raise SingularCovariance(
                    f"covariance is numerically singular at t={t:.6g}"
                )
            weight = float(ones @ np.linalg.solve(c, ones))
        rt = float(r_tilde_spec(t, state))
        rr = float(r_spec(t, state))
        total += weight * (rt - rr) ** 2 * float(times[k + 1] - times[k])
    return total
