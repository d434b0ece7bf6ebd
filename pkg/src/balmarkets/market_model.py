"""Market model primitives: coefficient specs, parameter containers, validation.

A market with ``d`` companies is described by a drift rate ``a`` (vector), a
covariance rate ``c`` (PSD matrix) and an interest rate ``r`` (scalar), each of
which may be constant, a function of time, or a function of time and the
current relative-capitalization vector.  This module holds those descriptions
plus the shared PSD factorization used by every simulator.

All containers are frozen dataclasses; evaluation never mutates state, so
instances can be shared freely across worker threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AsymmetricCovariance,
    DimensionMismatch,
    IndefiniteMatrix,
    InfeasibleConstraint,
    NegativeEigenvalue,
    NonPositiveInitialCap,
    ShapeMismatch,
)

__all__ = [
    "SpecKind",
    "ProcessSpec",
    "eval_spec",
    "Portfolio",
    "ConstraintKind",
    "ConstraintSet",
    "MarketParams",
    "PathGrid",
    "validate_params",
    "psd_factor",
    "PSD_TOL",
]

# Relative tolerance for "is this matrix PSD": eigenvalues down to
# -PSD_TOL * (1 + max|c|) are treated as rounding noise and clipped.
PSD_TOL = 1e-10

SIMPLEX_TOL = 1e-12


class SpecKind(enum.Enum):
    CONSTANT = "constant"
    TIME_FUNCTION = "time_function"
    STATE_FUNCTION = "state_function"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProcessSpec:
    """A coefficient process: constant, time table, or state function.

    Time tables interpolate piecewise-linearly between knots and extrapolate
    with the boundary value on either side.  State functions receive
    ``(t, kappa)`` and must be pure; they are re-evaluated at every step of a
    simulation and their output shape must never change.
    """

    kind: SpecKind
    value: np.ndarray | float | None = None
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    fn: Callable[[float, np.ndarray], np.ndarray | float] | None = None

    @staticmethod
    def constant(value: np.ndarray | float | Sequence[float]) -> "ProcessSpec":
        if np.isscalar(value):
            return ProcessSpec(SpecKind.CONSTANT, value=float(value))
        return ProcessSpec(SpecKind.CONSTANT, value=_freeze(np.asarray(value)))

    @staticmethod
    def time_table(times: Sequence[float], values: Sequence) -> "ProcessSpec":
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.ndim != 1 or len(t) < 1:
            raise ShapeMismatch("time table needs a 1-d array of knot times")
        if len(v) != len(t):
            raise ShapeMismatch(
                f"time table has {len(t)} knots but {len(v)} values"
            )
        if np.any(np.diff(t) <= 0.0):
            raise ShapeMismatch("time table knots must be strictly increasing")
        return ProcessSpec(SpecKind.TIME_FUNCTION, times=_freeze(t), values=_freeze(v))

    @staticmethod
    def state_function(
        fn: Callable[[float, np.ndarray], np.ndarray | float],
    ) -> "ProcessSpec":
        return ProcessSpec(SpecKind.STATE_FUNCTION, fn=fn)

    def __call__(self, t: float, kappa: np.ndarray | None = None):
        if self.kind is SpecKind.CONSTANT:
            return self.value
        if self.kind is SpecKind.TIME_FUNCTION:
            times, values = self.times, self.values
            if t <= times[0]:
                return values[0]
            if t >= times[-1]:
                return values[-1]
            j = int(np.searchsorted(times, t, side="right"))
            w = (t - times[j - 1]) / (times[j] - times[j - 1])
            return (1.0 - w) * values[j - 1] + w * values[j]
        return self.fn(t, kappa)

    def is_constant(self) -> bool:
        return self.kind is SpecKind.CONSTANT

    def depends_on_state(self) -> bool:
        return self.kind is SpecKind.STATE_FUNCTION


def eval_spec(spec: ProcessSpec, t: float, kappa: np.ndarray | None = None):
    """Evaluate ``spec`` at time ``t`` and state ``kappa``.

    Thin wrapper over ``spec(t, kappa)`` that exists so call sites read
    uniformly; shape checking against the market dimension happens in the
    consumers, which know what shape they expect.
    """
    return spec(t, kappa)


def check_spec_shape(
    spec: ProcessSpec, t: float, kappa: np.ndarray, expected: tuple[int, ...], name: str
) -> np.ndarray:
    """Evaluate a spec and insist on an exact output shape."""
    out = np.asarray(spec(t, kappa), dtype=float)
    if expected == () and out.shape != ():
        raise ShapeMismatch(f"{name} must evaluate to a scalar, got shape {out.shape}")
    if expected != () and out.shape != expected:
        raise ShapeMismatch(
            f"{name} must evaluate to shape {expected}, got {out.shape}"
        )
    return out


@dataclass(frozen=True)
class Portfolio:
    """Weights over companies summing to 1 (long positions optional).

    ``weights[i]`` is the fraction of wealth in company ``i``; the complement
    of the sum would sit in the bank, so a full-investment portfolio sums to 1.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = _freeze(np.atleast_1d(self.weights))
        if w.ndim != 1:
            raise DimensionMismatch("portfolio weights must be one-dimensional")
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return len(self.weights)

    def require_simplex(self) -> None:
        w = self.weights
        if abs(float(w.sum()) - 1.0) > SIMPLEX_TOL or np.any(w < -SIMPLEX_TOL):
            raise InfeasibleConstraint(
                f"weights {w} are not on the closed simplex"
            )


class ConstraintKind(enum.Enum):
    CLOSED_SIMPLEX = "closed_simplex"
    BUDGET_HYPERPLANE = "budget_hyperplane"
    BOX_HYPERPLANE = "box_hyperplane"


@dataclass(frozen=True)
class ConstraintSet:
    """Admissible portfolio set; always contains the closed simplex.

    The box variant intersects coordinate bounds with the full-investment
    hyperplane.  Bounds must satisfy ``lo <= 0`` and ``hi >= 1`` per
    coordinate so that buy-and-hold positions in single companies stay
    admissible.
    """

    kind: ConstraintKind
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @staticmethod
    def closed_simplex() -> "ConstraintSet":
        return ConstraintSet(ConstraintKind.CLOSED_SIMPLEX)

    @staticmethod
    def budget_hyperplane() -> "ConstraintSet":
        return ConstraintSet(ConstraintKind.BUDGET_HYPERPLANE)

    @staticmethod
    def box_hyperplane(lo, hi) -> "ConstraintSet":
        lo = _freeze(np.atleast_1d(lo))
        hi = _freeze(np.atleast_1d(hi))
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds must have matching shapes")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise InfeasibleConstraint("box bounds must be finite")
        if np.any(lo > 0.0) or np.any(hi < 1.0):
            raise InfeasibleConstraint(
                "box must contain the closed simplex (lo <= 0 and hi >= 1)"
            )
        return ConstraintSet(ConstraintKind.BOX_HYPERPLANE, lo=lo, hi=hi)

    def contains(self, weights: np.ndarray, tol: float = 1e-9) -> bool:
        w = np.asarray(weights, dtype=float)
        if abs(float(w.sum()) - 1.0) > tol:
            return False
        if self.kind is ConstraintKind.CLOSED_SIMPLEX:
            return bool(np.all(w >= -tol))
        if self.kind is ConstraintKind.BOX_HYPERPLANE:
            return bool(np.all(w >= self.lo - tol) and np.all(w <= self.hi + tol))
        return True


@dataclass(frozen=True)
class MarketParams:
    """Full parameterization of a d-company market."""

    d: int
    a_spec: ProcessSpec
    c_spec: ProcessSpec
    r_spec: ProcessSpec
    s0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s0", _freeze(np.atleast_1d(self.s0)))

    @staticmethod
    def from_constants(a, c, r, s0) -> "MarketParams":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        return MarketParams(
            d=len(a),
            a_spec=ProcessSpec.constant(a),
            c_spec=ProcessSpec.constant(np.asarray(c, dtype=float)),
            r_spec=ProcessSpec.constant(float(r)),
            s0=np.atleast_1d(np.asarray(s0, dtype=float)),
        )


@dataclass(frozen=True)
class PathGrid:
    """Uniform time grid ``t_k = t0 + k*dt`` for ``k = 0..n_steps``."""

    dt: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def t_final(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def validate_params(params: MarketParams) -> MarketParams:
    """Check a parameter set and return it unchanged if acceptable.

    The coefficient specs are probed at ``t = 0`` with the uniform weight
    vector; state-dependent specs are trusted to keep that shape afterwards
    (re-checked during simulation).  Raises the most specific error available.
    """
    d = params.d
    if d < 1:
        raise DimensionMismatch(f"need at least one company, got d={d}")
    if params.s0.shape != (d,):
        raise DimensionMismatch(
            f"s0 has shape {params.s0.shape}, expected ({d},)"
        )
    if not np.all(np.isfinite(params.s0)) or np.any(params.s0 <= 0.0):
        raise NonPositiveInitialCap(f"initial capitalizations must be > 0, got {params.s0}")

    kappa0 = np.full(d, 1.0 / d)
    check_spec_shape(params.a_spec, 0.0, kappa0, (d,), "drift rate a")
    check_spec_shape(params.r_spec, 0.0, kappa0, (), "interest rate r")
    c = check_spec_shape(params.c_spec, 0.0, kappa0, (d, d), "covariance rate c")

    scale = 1.0 + float(np.max(np.abs(c))) if c.size else 1.0
    if not np.allclose(c, c.T, atol=PSD_TOL * scale, rtol=0.0):
        raise AsymmetricCovariance("covariance rate matrix is not symmetric")
    eigs = np.linalg.eigvalsh(0.5 * (c + c.T))
    if eigs.min() < -PSD_TOL * scale:
        raise NegativeEigenvalue(
            f"covariance has eigenvalue {eigs.min():.3e} below -{PSD_TOL * scale:.3e}"
        )
    return params


def psd_factor(c: np.ndarray) -> np.ndarray:
    """Factor a PSD matrix as ``sigma @ sigma.T == c`` up to rounding.

    Positive-definite input takes the plain Cholesky fast path and the result
    is lower-triangular.  Rank-deficient input falls back to a pivoted
    Cholesky (row-permuted triangle), which reproduces exact zeros instead of
    smearing them with a diagonal shift.  Input indefinite beyond
    ``PSD_TOL`` relative tolerance raises :class:`IndefiniteMatrix`.
    """
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {c.shape}")
    d = c.shape[0]
    scale = 1.0 + float(np.max(np.abs(c))) if c.size else 1.0
    if not np.allclose(c, c.T, atol=PSD_TOL * scale, rtol=0.0):
        raise AsymmetricCovariance("matrix to factor is not symmetric")

    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        pass

    sym = 0.5 * (c + c.T)
    eigs = np.linalg.eigvalsh(sym)
    if eigs.min() < -PSD_TOL * scale:
        raise IndefiniteMatrix(
            f"eigenvalue {eigs.min():.3e} below -{PSD_TOL * scale:.3e}"
        )

    # Pivoted Cholesky: sym[p, :][:, p] = L @ L.T with p the pivot order.
    from scipy.linalg.lapack import dpstrf

    low, piv, rank, info = dpstrf(sym, lower=1)
    if info < 0:
        raise IndefiniteMatrix(f"pivoted factorization failed (info={info})")
    piv = piv - 1  # LAPACK is 1-based
    tri = np.tril(low)
    tri[:, rank:] = 0.0
    sigma = np.zeros_like(tri)
    sigma[piv, :] = tri
    return sigma
