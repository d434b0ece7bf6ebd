"""Growth rates, growth-optimal portfolios, and implied interest rates.

The long-run exponential rate of a portfolio ``pi`` in a market with drift
``a``, covariance rate ``c`` and bank rate ``r`` is

    g(pi) = r + <pi, a - r 1> - 0.5 <pi, c pi>.

Maximizing g over the full-investment hyperplane couples the optimizer and a
scalar multiplier through the linear system ``c rho = a - rate * 1``; that
multiplier is the interest rate the market itself implies.  Maximization over
the closed simplex or a box adds coordinate bounds and is solved exactly by a
primal active-set method whose equality subproblem is the same bordered
system restricted to the free coordinates.

No iterative tolerance is hidden here: solutions come out of linear solves,
so KKT residuals sit at rounding level for well-scaled inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleConstraint, NoSolution, SingularCovariance
from .market_model import ConstraintKind, ConstraintSet

__all__ = [
    "GrowthSolution",
    "growth_rate",
    "implied_interest_rate",
    "growth_optimal_hyperplane",
    "growth_optimal_constrained",
    "numeraire_condition",
    "perfect_balance_residual",
]

COND_CAP = 1e12
_CONSISTENCY_TOL = 1e-9
_BOUND_TOL = 1e-12
_MULT_TOL = 1e-10
# Relative singular-value cutoff for least-squares face solves; directions
# this flat are treated as exact degeneracies rather than inverted.
_RCOND = 1e-12


@dataclass(frozen=True)
class GrowthSolution:
    """Optimizer, its growth rate, budget multiplier, and KKT residual."""

    rho: np.ndarray
    g_star: float
    multiplier: float
    kkt_residual: float


def growth_rate(pi, a, c, r) -> np.ndarray | float:
    """Growth rate of portfolio(s) ``pi``; broadcasts over leading axes.

    ``pi`` may be a single weight vector or an array of shape (..., d).
    """
    pi = np.asarray(pi, dtype=float)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    excess = pi @ (a - r)
    quad = np.einsum("...i,ij,...j->...", pi, c, pi)
    out = r + excess - 0.5 * quad
    return float(out) if out.ndim == 0 else out


def implied_interest_rate(a, c) -> float:
    """Rate making ``c^{-1}(a - rate*1)`` a full-investment vector.

    Requires an invertible covariance with condition number below 1e12.
    """
    c = np.asarray(c, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.linalg.cond(c) > COND_CAP:
        raise SingularCovariance(
            "covariance condition number exceeds 1e12; "
            "use growth_optimal_hyperplane, which tolerates singular c"
        )
    ones = np.ones(len(a))
    cinv_ones = np.linalg.solve(c, ones)
    return float((a @ cinv_ones - 1.0) / (ones @ cinv_ones))


def _bordered_solve(c, rhs_top, rhs_sum):
    """Solve [[c, 1], [1^T, 0]] [p; mult] = [rhs_top; rhs_sum].

    Falls back to a minimum-norm least-squares solution when the bordered
    matrix is singular; returns ``None`` if the system is inconsistent.
    """
    n = c.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = c
    M[:n, n] = 1.0
    M[n, :n] = 1.0
    rhs = np.append(rhs_top, rhs_sum)
    z = _checked_solve(M, rhs)
    if z is None:
        z, *_ = np.linalg.lstsq(M, rhs, rcond=_RCOND)
        scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
        if np.linalg.norm(M @ z - rhs) > _CONSISTENCY_TOL * scale:
            return None
    return z[:n], float(z[n])


def _checked_solve(M, rhs):
    """Direct solve that rejects garbage answers from near-singular systems.

    A backward-stable solve of an ill-conditioned system can return a huge
    vector whose residual is small relative to ``|M| |z|`` but not relative
    to ``rhs``; checking against ``rhs`` scale exposes it.
    """
    try:
        z = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(z)):
        return None
    scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
    if np.linalg.norm(M @ z - rhs) > _CONSISTENCY_TOL * scale:
        return None
    if np.abs(z).max() > 1e12 * scale:
        return None
    return z


def growth_optimal_hyperplane(a, c) -> tuple[np.ndarray, float]:
    """Growth-optimal weights on the full-investment hyperplane.

    Returns ``(rho, implied_rate)`` with ``c @ rho == a - implied_rate * 1``
    and ``sum(rho) == 1``.  Singular ``c`` is fine as long as the optimality
    system stays consistent; an inconsistent system (an unbounded growth
    opportunity) raises :class:`NoSolution`.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    sol = _bordered_solve(c, a, 1.0)
    if sol is None:
        raise NoSolution(
            "no finite hyperplane optimizer: c rho = a - rate*1 is inconsistent"
        )
    return sol


def _face_solve(c, q, free, p_fixed):
    """Minimizer or improving ray on the face with non-free coords pinned.

    Returns ``("point", p)`` when the restricted bordered system has a
    solution (then ``p`` minimizes the face objective because ``c`` is PSD),
    or ``("ray", v)`` when it is inconsistent.  The ray is the least-squares
    residual of the symmetric bordered system, which has zero curvature and
    strictly improves the objective, so the caller can ride it to a bound.
    """
    d = len(q)
    p = p_fixed.copy()
    fixed_sum = float(p_fixed[~free].sum())
    cf = c[np.ix_(free, free)]
    rhs_top = q[free] - c[np.ix_(free, ~free)] @ p_fixed[~free]

    n = cf.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = cf
    M[:n, n] = 1.0
    M[n, :n] = 1.0
    rhs = np.append(rhs_top, 1.0 - fixed_sum)
    z = _checked_solve(M, rhs)
    if z is None:
        z, *_ = np.linalg.lstsq(M, rhs, rcond=_RCOND)
        resid = rhs - M @ z
        scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
        if np.linalg.norm(resid) > _CONSISTENCY_TOL * scale:
            v = np.zeros(d)
            v[free] = resid[:n]
            return "ray", v
    p[free] = z[:n]
    return "point", p


def growth_optimal_constrained(a, c, r, constraint: ConstraintSet) -> GrowthSolution:
    """Exact growth maximizer over the simplex or a box-with-budget set.

    Primal active-set iteration: solve the equality subproblem on the current
    face, line-search toward it (adding the blocking bound on contact), and
    release the bound with the most negative multiplier at a face optimum.
    Faces with no stationary point (possible for singular ``c``) are escaped
    along the projected gradient.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    d = len(a)
    if constraint.kind is ConstraintKind.BUDGET_HYPERPLANE:
        rho, mult = growth_optimal_hyperplane(a - r, c)
        # a - r*1 shifts the excess-return vector; g uses the external r.
        g = growth_rate(rho, a, c, r)
        return GrowthSolution(rho, float(g), mult + r, _kkt_residual(rho, c, a - r, None, None))

    if constraint.kind is ConstraintKind.CLOSED_SIMPLEX:
        lo = np.zeros(d)
        hi = np.full(d, np.inf)
    else:
        lo, hi = constraint.lo.copy(), constraint.hi.copy()
        if float(lo.sum()) > 1.0 + _BOUND_TOL or float(hi.sum()) < 1.0 - _BOUND_TOL:
            raise InfeasibleConstraint("box does not intersect the budget hyperplane")

    q = a - r  # maximize <p,q> - 0.5 p'cp over the bounded face set
    x = np.clip(np.full(d, 1.0 / d), lo, hi)
    deficit = 1.0 - float(x.sum())
    if abs(deficit) > _BOUND_TOL:
        # Only reachable for boxes excluding the uniform vector, which the
        # ConstraintSet validator rules out; kept as a safety net.
        room = np.where(deficit > 0, hi - x, lo - x)
        movable = np.abs(room) > _BOUND_TOL
        if not np.any(movable):
            raise InfeasibleConstraint("cannot find a feasible starting point")
        x[movable] += deficit / movable.sum()
        x = np.clip(x, lo, hi)

    at_lo = np.abs(x - lo) <= _BOUND_TOL
    at_hi = np.abs(x - hi) <= _BOUND_TOL

    for _ in range(60 * (d + 1)):
        free = ~(at_lo | at_hi)
        if free.any():
            p_fixed = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
            kind, payload = _face_solve(c, q, free, p_fixed)

            if kind == "ray":
                # Zero-curvature improving ray (singular face): ride it to
                # the blocking bound, which must exist on a budget face.
                alpha_max, hit, side = _max_feasible_step(x, payload, lo, hi)
                if not np.isfinite(alpha_max):
                    raise NoSolution(
                        "growth objective unbounded on the constraint set"
                    )
                x = x + alpha_max * payload
                at_lo[hit] = side == "lo"
                at_hi[hit] = side == "hi"
                x[hit] = lo[hit] if at_lo[hit] else hi[hit]
                continue

            step = payload - x
            if np.linalg.norm(step, ord=np.inf) > 1e-13:
                alpha_max, hit, side = _max_feasible_step(x, step, lo, hi)
                if alpha_max < 1.0:
                    x = x + alpha_max * step
                    at_lo[hit] = side == "lo"
                    at_hi[hit] = side == "hi"
                    x[hit] = lo[hit] if at_lo[hit] else hi[hit]
                    continue
                x = payload

        # Face optimum reached: check bound multipliers.  Stationarity on
        # free coordinates reads (c x - q)_i = lam; bound multipliers are
        # (c x - q)_i - lam at lower bounds and lam - (c x - q)_i at upper.
        grad_dual = c @ x - q
        if free.any():
            lam = float(grad_dual[free].mean())
        else:
            hi_req = float(grad_dual[at_lo].min()) if at_lo.any() else np.inf
            lo_req = float(grad_dual[at_hi].max()) if at_hi.any() else -np.inf
            lam = (
                min(hi_req, max(lo_req, 0.0))
                if lo_req <= hi_req
                else 0.5 * (lo_req + hi_req)
            )
        mu_lo = grad_dual - lam  # >= 0 wanted where at_lo
        mu_hi = lam - grad_dual  # >= 0 wanted where at_hi
        worst_lo = np.where(at_lo, mu_lo, np.inf)
        worst_hi = np.where(at_hi, mu_hi, np.inf)
        k_lo = int(np.argmin(worst_lo))
        k_hi = int(np.argmin(worst_hi))
        if worst_lo[k_lo] >= -_MULT_TOL and worst_hi[k_hi] >= -_MULT_TOL:
            break
        if worst_lo[k_lo] <= worst_hi[k_hi]:
            at_lo[k_lo] = False
        else:
            at_hi[k_hi] = False
    else:
        raise NoSolution("active-set iteration did not converge")

    rho = x
    g = growth_rate(rho, a, c, r)
    resid = _kkt_residual(rho, c, q, lo, hi)
    # Report the multiplier in implied-rate form: c rho = q - (mult - r) * 1
    # on free coordinates, mirroring the hyperplane solver's convention.
    return GrowthSolution(rho, float(g), float(r - lam), resid)


def _max_feasible_step(x, step, lo, hi):
    """Largest alpha keeping x + alpha*step within bounds.

    Returns ``(alpha, k, side)`` where coordinate ``k`` is the blocker and
    ``side`` says which of its bounds it touched.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        to_lo = np.where(step < -1e-15, (lo - x) / step, np.inf)
        to_hi = np.where(step > 1e-15, (hi - x) / step, np.inf)
    bounds = np.minimum(to_lo, to_hi)
    k = int(np.argmin(bounds))
    side = "lo" if to_lo[k] <= to_hi[k] else "hi"
    return float(max(bounds[k], 0.0)), k, side


def _kkt_residual(p, c, q, lo, hi):
    """Max KKT violation of p for max <p,q> - 0.5 p'cp on the bound set."""
    grad_dual = c @ p - q
    viol = [abs(float(p.sum()) - 1.0)]
    if lo is None:
        # pure hyperplane: stationarity must hold on all coordinates
        viol.append(float(np.abs(grad_dual - grad_dual.mean()).max()))
    else:
        interior = (p > lo + 1e-9) & (p < hi - 1e-9)
        viol.append(float(np.abs(np.clip(lo - p, 0.0, None)).max(initial=0.0)))
        viol.append(float(np.abs(np.clip(p - hi, 0.0, None)).max(initial=0.0)))
        if interior.any():
            lam = float(grad_dual[interior].mean())
            viol.append(float(np.abs(grad_dual[interior] - lam).max()))
            at_lo = p <= lo + 1e-9
            at_hi = p >= hi - 1e-9
            if at_lo.any():
                viol.append(float(np.clip(lam - grad_dual[at_lo], 0.0, None).max()))
            if at_hi.any():
                viol.append(float(np.clip(grad_dual[at_hi] - lam, 0.0, None).max()))
    return max(viol)


def numeraire_condition(pi, rho, a, c, r) -> float:
    """Directional optimality gap ``<pi - rho, a - r1 - c rho>``.

    Nonpositive for every admissible ``pi`` exactly when wealth relative to
    ``rho`` is a supermartingale, i.e. when ``rho`` is growth-optimal.
    """
    pi = np.asarray(pi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    return float((pi - rho) @ (a - r - c @ rho))


def perfect_balance_residual(kappa, a, c) -> float:
    """How far ``a - c kappa`` is from a constant vector (L2 norm).

    Zero means the drift decomposes as ``a = c kappa + rate * 1`` for the
    least-squares rate, the algebraic signature of a perfectly balanced
    market.
    """
    kappa = np.asarray(kappa, dtype=float)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    gap = a - c @ kappa
    return float(np.linalg.norm(gap - gap.mean()))
