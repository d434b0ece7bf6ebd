"""Markets with totally inaccessible jumps: simulation and diagnostics.

Extends the balanced weight dynamics with a finite-activity jump measure.
Between jumps each weight follows the continuous balanced SDE plus the
compensator drift

    -<e_i - kappa, I1(kappa)> dt,   I1(kappa) = integral of x / (1 + <kappa, x>) dnu,

and at a jump with size vector ``x`` the weights move by the exact
simplex-preserving update ``kappa_i <- kappa_i (1 + x_i) / (1 + <kappa, x>)``.
A coordinate of ``x`` equal to -1 annihilates that company; the compensator
drift can also push a weight through zero in finite time.  Either way death
is absorbing.

Jump times are sampled by thinning against a declared intensity bound, from
a dedicated per-path random stream, so simulations with zero intensity
consume exactly the same Brownian draws as the continuous engine and
reproduce its paths bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    CompensatorUnavailable,
    DimensionMismatch,
    InconsistentInitialState,
    NoSolution,
)
from .growth_opt import growth_optimal_constrained, growth_rate
from .market_model import ConstraintSet, PathGrid, ProcessSpec, psd_factor
from .sde_engine import (
    STREAM_BROWNIAN,
    STREAM_JUMP,
    EngineDiagnostics,
    PathSet,
    _BLOCK_STEPS,
    _renormalize_log,
    _run_chunked,
    _stored_steps,
    path_generator,
)

__all__ = [
    "JumpSpec",
    "LifetimeRecord",
    "ALIVE",
    "CONTINUOUS_VANISH",
    "JUMP_TO_ZERO",
    "simulate_jump_balanced",
    "drift_from_balance_jump",
    "rel_rate_of_return",
    "growth_optimal_jump",
    "loss_of_balance_jump",
    "pairwise_distance_jump",
    "example_death_of_company",
    "jump_pathset_to_csv",
]

DEATH_THRESHOLD = 1e-12
ALIVE = "Alive"
CONTINUOUS_VANISH = "ContinuousVanish"
JUMP_TO_ZERO = "JumpToZero"

_PGD_MAX_ITER = 200
_PGD_TOL = 1e-10
_DOMAIN_FLOOR = 1e-12


@dataclass(frozen=True)
class JumpSpec:
    """Finite-activity jump measure with closed-form compensator moments.

    The supported law places probability ``probs[k]`` on finitely many size
    vectors ``atoms[k]`` (each coordinate in [-1, inf)), arriving at rate
    ``intensity(t, kappa) <= lam_max``; atoms may vary deterministically in
    time via a callable ``t -> (K, d) array``.  ``sampler_only`` specs can
    be simulated through their sampler but cannot answer compensator
    queries, which raise :class:`CompensatorUnavailable`.
    """

    intensity: ProcessSpec
    lam_max: float
    d: int
    atoms: np.ndarray | Callable[[float], np.ndarray] | None = None
    probs: np.ndarray | None = None
    sampler: Callable | None = None
    max_jumps: int | None = None

    @staticmethod
    def finite_atoms(
        intensity, lam_max: float, atoms, probs, *, max_jumps: int | None = None
    ) -> "JumpSpec":
        if not isinstance(intensity, ProcessSpec):
            intensity = ProcessSpec.constant(float(intensity))
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("atom probabilities must be a distribution")
        if callable(atoms):
            d = np.asarray(atoms(0.0), dtype=float).shape[1]
        else:
            atoms = np.asarray(atoms, dtype=float)
            if atoms.ndim != 2 or atoms.shape[0] != len(probs):
                raise DimensionMismatch(
                    f"atoms shape {atoms.shape} does not match {len(probs)} probs"
                )
            _check_atoms(atoms)
            d = atoms.shape[1]
        if lam_max < 0:
            raise ValueError("lam_max must be nonnegative")
        return JumpSpec(
            intensity=intensity,
            lam_max=float(lam_max),
            d=d,
            atoms=atoms,
            probs=probs,
            max_jumps=max_jumps,
        )

    @staticmethod
    def sampler_only(
        intensity, lam_max: float, d: int, sampler: Callable,
        *, max_jumps: int | None = None,
    ) -> "JumpSpec":
        if not isinstance(intensity, ProcessSpec):
            intensity = ProcessSpec.constant(float(intensity))
        return JumpSpec(
            intensity=intensity,
            lam_max=float(lam_max),
            d=int(d),
            sampler=sampler,
            max_jumps=max_jumps,
        )

    @property
    def has_moments(self) -> bool:
        return self.atoms is not None

    def atoms_at(self, t: float) -> np.ndarray:
        if self.atoms is None:
            raise CompensatorUnavailable(
                "this jump law only has a sampler; compensator moments "
                "need finite atoms"
            )
        if callable(self.atoms):
            x = np.asarray(self.atoms(float(t)), dtype=float)
            _check_atoms(x)
            return x
        return self.atoms

    def intensity_at(self, t: float, kappa=None) -> float:
        lam = float(self.intensity(t, kappa))
        if lam < -1e-15 or lam > self.lam_max * (1.0 + 1e-12) + 1e-15:
            raise ValueError(
                f"intensity {lam} at t={t} leaves [0, lam_max={self.lam_max}]"
            )
        return min(max(lam, 0.0), self.lam_max)

    # -- compensator moments -------------------------------------------------

    def i1(self, t: float, kappa: np.ndarray) -> np.ndarray:
        """``integral of x / (1 + <kappa, x>) dnu`` as a d-vector."""
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        if lam == 0.0:
            return np.zeros(self.d)
        denom = 1.0 + x @ np.asarray(kappa, dtype=float)
        if np.any(denom <= 0.0):
            raise ValueError("jump size annihilates the whole market")
        return lam * ((self.probs / denom) @ x)

    def i2(self, t: float, kappa=None) -> np.ndarray:
        """``integral of x 1{|x| <= 1} dnu`` (Euclidean truncation)."""
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        small = np.linalg.norm(x, axis=1) <= 1.0
        return lam * ((self.probs * small) @ x)

    def growth_jump_term(self, t: float, p: np.ndarray, kappa=None) -> float:
        """``integral of [log(1 + <p, x>) - <p, x> 1{|x| <= 1}] dnu``."""
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        if lam == 0.0:
            return 0.0
        px = x @ np.asarray(p, dtype=float)
        if np.any(1.0 + px <= 0.0):
            return -np.inf
        small = np.linalg.norm(x, axis=1) <= 1.0
        return lam * float(self.probs @ (np.log1p(px) - px * small))

    def growth_jump_gradient(self, t: float, p: np.ndarray, kappa=None) -> np.ndarray:
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        if lam == 0.0:
            return np.zeros(self.d)
        px = x @ np.asarray(p, dtype=float)
        small = np.linalg.norm(x, axis=1) <= 1.0
        return lam * ((self.probs / (1.0 + px) - self.probs * small) @ x)

    def loss_jump_integrand(
        self, t: float, kappa: np.ndarray, rho: np.ndarray
    ) -> float:
        """``integral of 1 ∧ log^2((1 + <kappa, x>)/(1 + <rho, x>)) dnu``."""
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        if lam == 0.0:
            return 0.0
        num = 1.0 + x @ np.asarray(kappa, dtype=float)
        den = 1.0 + x @ np.asarray(rho, dtype=float)
        with np.errstate(divide="ignore"):
            ratio = np.where((num > 0.0) & (den > 0.0), num / den, np.inf)
            val = np.minimum(1.0, np.log(ratio) ** 2)
        val = np.where(np.isfinite(val), val, 1.0)
        return lam * float(self.probs @ val)

    def pair_jump_integrand(self, t: float, i: int, j: int, kappa=None) -> float:
        """``integral of 1 ∧ log^2((1 + x_i)/(1 + x_j)) dnu``."""
        x = self.atoms_at(t)
        lam = self.intensity_at(t, kappa)
        if lam == 0.0:
            return 0.0
        with np.errstate(divide="ignore"):
            num = np.log1p(x[:, i])
            den = np.log1p(x[:, j])
            val = np.minimum(1.0, (num - den) ** 2)
        val = np.where(np.isfinite(val), val, 1.0)
        return lam * float(self.probs @ val)

    # -- sampling ------------------------------------------------------------

    def sample_jump(self, t: float, kappa: np.ndarray, rng) -> np.ndarray:
        if self.sampler is not None:
            x = np.asarray(self.sampler(t, kappa, rng), dtype=float)
            _check_atoms(x[None, :])
            return x
        x = self.atoms_at(t)
        k = int(np.searchsorted(np.cumsum(self.probs), rng.uniform(), side="right"))
        k = min(k, len(self.probs) - 1)
        return x[k]


def _check_atoms(x: np.ndarray) -> None:
    if np.any(x < -1.0):
        raise ValueError("jump sizes must be >= -1 in every coordinate")
    if np.any(np.all(x <= -1.0 + 1e-15, axis=1)):
        raise ValueError("a jump of -1 in every coordinate annihilates the market")


@dataclass
class LifetimeRecord:
    """Death bookkeeping for a simulated ensemble.

    ``zeta[p, i]`` is company i's death time on path p (inf while alive);
    ``death_mode`` holds one of {Alive, ContinuousVanish, JumpToZero}.  The
    jump counters are auxiliary: accepted jumps per path, the first
    accepted jump time (nan when none), and the time the per-path jump
    budget ran out (inf when it never did); after that moment the jump
    measure, and with it the compensator drift, is switched off.
    """

    zeta: np.ndarray
    death_mode: np.ndarray
    jump_count: np.ndarray = field(default=None)
    first_jump_time: np.ndarray = field(default=None)
    budget_exhausted_time: np.ndarray = field(default=None)

    @property
    def n_paths(self) -> int:
        return self.zeta.shape[0]

    def died(self, company: int) -> np.ndarray:
        return np.isfinite(self.zeta[:, company])

    def death_fraction(self, company: int) -> float:
        return float(self.died(company).mean())


# ---------------------------------------------------------------------------
# simulation


def simulate_jump_balanced(
    c_spec: ProcessSpec,
    jump_spec: JumpSpec,
    kappa0,
    grid: PathGrid,
    n_paths: int,
    seed: int,
    *,
    store_every: int = 1,
    store_increments: bool = False,
    n_threads: int = 1,
):
    """Balanced weight dynamics with compensated finite-activity jumps.

    Returns ``(PathSet, LifetimeRecord)``.  Dead companies are frozen at
    weight zero.  The Brownian and jump draws come from separate per-path
    streams, so a spec with zero intensity reproduces
    ``simulate_relative_caps_balanced`` exactly.
    """
    if not jump_spec.has_moments:
        raise CompensatorUnavailable(
            "simulation needs the compensator drift; provide finite atoms"
        )
    kappa0 = np.asarray(kappa0, dtype=float)
    d = len(kappa0)
    if jump_spec.d != d:
        raise DimensionMismatch(
            f"jump law is {jump_spec.d}-dimensional, market is {d}"
        )
    if np.any(kappa0 < 0.0) or abs(float(kappa0.sum()) - 1.0) > 1e-9:
        raise InconsistentInitialState(
            f"kappa0 must lie in the closed simplex, got {kappa0}"
        )
    kappa0 = kappa0 / kappa0.sum()
    if store_increments and store_every != 1:
        raise ValueError("increments can only be stored at full resolution")

    stored = _stored_steps(grid.n_steps, store_every)
    stored_pos = {int(s): i for i, s in enumerate(stored)}
    kappa_out = np.empty((n_paths, len(stored), d))
    inc_out = np.empty((n_paths, grid.n_steps, d)) if store_increments else None
    zeta = np.full((n_paths, d), np.inf)
    mode = np.full((n_paths, d), ALIVE, dtype="<U16")
    jump_count = np.zeros(n_paths, dtype=np.int64)
    first_jump = np.full(n_paths, np.nan)
    budget_out = np.full(n_paths, np.inf)
    if jump_spec.max_jumps == 0:
        budget_out[:] = grid.t0

    const_c = c_spec.is_constant()
    state_c = c_spec.depends_on_state()
    zero_c = False
    if const_c:
        c0 = np.asarray(c_spec(0.0), dtype=float)
        sigma0 = psd_factor(c0)
        diag_c0 = np.diag(c0).copy()
        zero_c = not c0.any()
    sqrt_dt = np.sqrt(grid.dt)
    dt = grid.dt
    t_final = grid.t_final
    lam_max = jump_spec.lam_max
    state_intensity = jump_spec.intensity.depends_on_state()

    # hoist the per-step time dependence out of the hot loop: the intensity
    # and the atoms are functions of time alone unless state-dependent
    step_times = grid.t0 + dt * np.arange(grid.n_steps)
    lam_steps = None
    if not state_intensity:
        lam_steps = np.array(
            [jump_spec.intensity_at(tk) for tk in step_times]
        )
    if callable(jump_spec.atoms):
        atoms_steps = [
            jump_spec.atoms_at(tk)
            if (lam_steps is None or lam_steps[k] > 0.0)
            else None
            for k, tk in enumerate(step_times)
        ]
    else:
        atoms_steps = None
        atoms_const = jump_spec.atoms

    def worker(lo: int, hi: int) -> EngineDiagnostics:
        m = hi - lo
        diag = EngineDiagnostics()
        gens = [path_generator(seed, STREAM_BROWNIAN, p) for p in range(lo, hi)]
        jgens = [path_generator(seed, STREAM_JUMP, p) for p in range(lo, hi)]
        # pending thinning candidates; inf when the budget is exhausted
        next_tau = np.full(m, np.inf)
        if lam_max > 0.0 and (jump_spec.max_jumps is None or jump_spec.max_jumps > 0):
            for i in range(m):
                next_tau[i] = grid.t0 + jgens[i].exponential(1.0 / lam_max)
        with np.errstate(divide="ignore"):
            logk = np.tile(np.log(np.where(kappa0 > 0.0, kappa0, np.nan)), (m, 1))
        logk[np.isnan(logk)] = -np.inf
        for i0 in np.flatnonzero(kappa0 == 0.0):
            zeta[lo:hi, i0] = grid.t0
            mode[lo:hi, i0] = CONTINUOUS_VANISH
        kappa = np.tile(kappa0, (m, 1))
        kappa_out[lo:hi, 0] = kappa0
        step = 0
        while step < grid.n_steps:
            blk = min(_BLOCK_STEPS, grid.n_steps - step)
            if zero_c and inc_out is None:
                dw = None
            else:
                dw = np.stack(
                    [g.standard_normal((blk, d)) for g in gens]
                ) * sqrt_dt
                if inc_out is not None:
                    inc_out[lo:hi, step : step + blk] = dw
            for j in range(blk):
                s = step + j
                t = grid.t0 + s * dt
                t_end = grid.t0 + (s + 1) * dt
                kappa_left = kappa
                # compensator factor from the left state
                lam_t = None if state_intensity else lam_steps[s]
                use_comp = (lam_t is None) or (lam_t > 0.0)
                if use_comp:
                    x_t = atoms_steps[s] if atoms_steps is not None else atoms_const
                    denom = 1.0 + kappa_left @ x_t.T
                    if lam_t is None:
                        lam_rows = np.array(
                            [jump_spec.intensity_at(t, kappa_left[i]) for i in range(m)]
                        )[:, None]
                        bad = (denom <= 0.0).any(axis=1)
                        if np.any(bad & (lam_rows[:, 0] > 0.0)):
                            raise ValueError(
                                "jump size annihilates the whole market"
                            )
                        if bad.any():
                            # rows with zero intensity never use the moment
                            denom[bad] = 1.0
                    else:
                        lam_rows = lam_t
                        if np.any(denom <= 0.0):
                            raise ValueError(
                                "jump size annihilates the whole market"
                            )
                    i1 = lam_rows * ((jump_spec.probs / denom) @ x_t)
                    comp = i1 - np.einsum("ij,ij->i", kappa_left, i1)[:, None]
                    factor = 1.0 - comp * dt
                    if jump_spec.max_jumps is not None:
                        # a truncated point process carries no compensator
                        # once its jump budget is spent
                        factor[jump_count[lo:hi] >= jump_spec.max_jumps] = 1.0
                else:
                    factor = None
                # continuous balanced step (identical arithmetic to the
                # continuous engine, dead coordinates ride along at -inf)
                if zero_c:
                    # no diffusion and no quadratic drift: the weights only
                    # move through the compensator factor and the jumps
                    c = c0
                elif const_c:
                    c, sigma, diag_c = c0, sigma0, diag_c0
                    y = dw[:, j] @ sigma.T
                    ck = kappa @ c
                elif not state_c:
                    c = np.asarray(c_spec(t), dtype=float)
                    sigma = psd_factor(c)
                    y = dw[:, j] @ sigma.T
                    ck = kappa @ c
                    diag_c = np.diag(c)
                else:
                    y = np.empty((m, d))
                    ck = np.empty((m, d))
                    diag_c = np.empty((m, d))
                    for i in range(m):
                        c = np.asarray(c_spec(t, kappa[i]), dtype=float)
                        sigma = psd_factor(c)
                        y[i] = sigma @ dw[i, j]
                        ck[i] = c @ kappa[i]
                        diag_c[i] = np.diag(c)
                if not zero_c:
                    quad = np.einsum("ij,ij->i", kappa, ck)
                    qform = diag_c - 2.0 * ck + quad[:, None]
                    u = y - np.einsum("ij,ij->i", kappa, y)[:, None]
                    logk += (-0.5 * dt) * qform + u
                    kappa = _renormalize_log(logk, diag)
                if factor is not None:
                    knew = kappa * factor
                    # touch only the rows the factor actually moves, so a
                    # path with a spent jump budget stays frozen bit for bit
                    rows = np.flatnonzero((knew != kappa).any(axis=1))
                    if rows.size:
                        ksub = knew[rows]
                        dying = (ksub < DEATH_THRESHOLD) & (kappa[rows] > 0.0)
                        if dying.any():
                            rsub, cols = np.nonzero(dying)
                            for rr, cc in zip(rsub, cols):
                                zeta[lo + rows[rr], cc] = t_end
                                mode[lo + rows[rr], cc] = CONTINUOUS_VANISH
                            ksub[dying] = 0.0
                        with np.errstate(divide="ignore"):
                            lsub = np.where(ksub > 0.0, np.log(ksub), -np.inf)
                        ksub = _renormalize_log(lsub, diag)
                        logk[rows] = lsub
                        kappa[rows] = ksub
                # jump events inside (t, t_end]
                while True:
                    due = np.flatnonzero(next_tau <= t_end)
                    if due.size == 0:
                        break
                    for i in due:
                        tau = next_tau[i]
                        kap_i = kappa[i]
                        lam_tau = jump_spec.intensity_at(tau, kap_i)
                        if jgens[i].uniform() <= lam_tau / lam_max:
                            x = jump_spec.sample_jump(tau, kap_i, jgens[i])
                            base = 1.0 + kap_i @ x
                            if base <= 0.0:
                                raise ValueError(
                                    "jump size annihilates the whole market"
                                )
                            knew_i = kap_i * (1.0 + x) / base
                            newly_dead = (knew_i < DEATH_THRESHOLD) & (kap_i > 0.0)
                            knew_i[newly_dead] = 0.0
                            for cc in np.flatnonzero(newly_dead):
                                zeta[lo + i, cc] = tau
                                mode[lo + i, cc] = JUMP_TO_ZERO
                            knew_i = knew_i / knew_i.sum()
                            kappa[i] = knew_i
                            with np.errstate(divide="ignore"):
                                logk[i] = np.where(
                                    knew_i > 0.0, np.log(knew_i), -np.inf
                                )
                            jump_count[lo + i] += 1
                            if np.isnan(first_jump[lo + i]):
                                first_jump[lo + i] = tau
                            if (
                                jump_spec.max_jumps is not None
                                and jump_count[lo + i] >= jump_spec.max_jumps
                            ):
                                next_tau[i] = np.inf
                                budget_out[lo + i] = tau
                                continue
                        next_tau[i] = tau + jgens[i].exponential(1.0 / lam_max)
                idx = stored_pos.get(s + 1)
                if idx is not None:
                    kappa_out[lo:hi, idx] = kappa
            step += blk
        return diag

    diag = _run_chunked(worker, n_paths, n_threads)
    ps = PathSet(
        grid=grid,
        n_paths=n_paths,
        seed=seed,
        kappa=kappa_out,
        stored_steps=stored,
        brownian_increments=inc_out,
        c_spec=c_spec,
        diagnostics=diag,
    )
    rec = LifetimeRecord(
        zeta=zeta,
        death_mode=mode,
        jump_count=jump_count,
        first_jump_time=first_jump,
        budget_exhausted_time=budget_out,
    )
    return ps, rec


# ---------------------------------------------------------------------------
# rates of return and growth optimality under jumps


def drift_from_balance_jump(
    kappa_minus, c, jump_spec: JumpSpec, r: float, t: float = 0.0
) -> np.ndarray:
    """Capitalization drift that makes the weight process a martingale.

    ``b = c kappa + r 1 - I1(kappa) + I2``, coordinatewise, for the living
    companies.
    """
    kappa_minus = np.asarray(kappa_minus, dtype=float)
    c = np.asarray(c, dtype=float)
    return (
        c @ kappa_minus
        + r
        - jump_spec.i1(t, kappa_minus)
        + jump_spec.i2(t, kappa_minus)
    )


def rel_rate_of_return(
    pi, rho, b, c, jump_spec: JumpSpec | None, r: float, t: float = 0.0,
    kappa_state=None,
) -> float:
    """First-order growth advantage of ``pi`` over ``rho``.

    ``<pi - rho, b - r1 - c rho> + integral of [<pi-rho, x>/(1+<rho, x>) -
    <pi-rho, x> 1{|x|<=1}] dnu``.  Nonpositive for every feasible ``pi``
    exactly when ``rho`` is growth-optimal.  ``kappa_state`` feeds
    state-dependent intensities; it defaults to ``rho``.
    """
    pi = np.asarray(pi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    diff = pi - rho
    val = float(diff @ (b - r - c @ rho))
    if jump_spec is not None and jump_spec.lam_max > 0.0:
        x = jump_spec.atoms_at(t)
        lam = jump_spec.intensity_at(t, kappa_state if kappa_state is not None else rho)
        if lam > 0.0:
            den = 1.0 + x @ rho
            if np.any(den <= 0.0):
                raise ValueError("rho leaves the jump domain 1 + <rho, x> > 0")
            small = np.linalg.norm(x, axis=1) <= 1.0
            dx = x @ diff
            val += lam * float(jump_spec.probs @ (dx / den - dx * small))
    return val


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    mask = u - css / idx > 0.0
    k = idx[mask][-1]
    tau = css[k - 1] / k
    return np.maximum(v - tau, 0.0)


def growth_optimal_jump(
    b,
    c,
    r: float,
    jump_spec: JumpSpec | None,
    t: float = 0.0,
    *,
    support: np.ndarray | None = None,
    warm_start: np.ndarray | None = None,
    kappa_state: np.ndarray | None = None,
    tol: float = _PGD_TOL,
    max_iter: int = _PGD_MAX_ITER,
):
    """Maximize the jump-adjusted growth rate over the (sub-)simplex.

    The objective ``<p, b - r1> - 0.5 <p, cp> + integral of [log(1+<p,x>) -
    <p,x>1{|x|<=1}] dnu + r`` is concave on its domain; projected gradient
    ascent with backtracking converges from any feasible start.  With no
    jump activity the exact quadratic solver is used instead.  ``support``
    masks out dead companies; ``kappa_state`` feeds state-dependent
    intensities.  Returns ``(rho, g_star)``.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    d = len(b)
    if support is None:
        support = np.ones(d, dtype=bool)
    sup = np.flatnonzero(support)
    if sup.size == 0:
        raise NoSolution("no living companies to invest in")
    if jump_spec is None:
        lam_active = False
    elif jump_spec.intensity.depends_on_state() and kappa_state is None:
        lam_active = jump_spec.lam_max > 0.0
    else:
        lam_active = (
            jump_spec.lam_max > 0.0
            and jump_spec.intensity_at(t, kappa_state) > 0.0
        )

    if not lam_active:
        bs, cs = b[sup], c[np.ix_(sup, sup)]
        sol = growth_optimal_constrained(
            bs, cs, r, ConstraintSet.closed_simplex()
        )
        rho = np.zeros(d)
        rho[sup] = sol.rho
        return rho, sol.g_star

    x_atoms = jump_spec.atoms_at(t)

    def objective(p: np.ndarray) -> float:
        base = r + p @ (b - r) - 0.5 * p @ c @ p
        state = kappa_state if kappa_state is not None else p
        return base + jump_spec.growth_jump_term(t, p, state)

    def gradient(p: np.ndarray) -> np.ndarray:
        state = kappa_state if kappa_state is not None else p
        return (b - r) - c @ p + jump_spec.growth_jump_gradient(t, p, state)

    def feasible(p: np.ndarray) -> bool:
        return bool(np.all(1.0 + x_atoms @ p > _DOMAIN_FLOOR))

    if warm_start is not None and np.all(warm_start[~support] == 0.0):
        p = np.asarray(warm_start, dtype=float).copy()
        p = np.maximum(p, 0.0)
        p = p / p.sum() if p.sum() > 0 else None
    else:
        p = None
    if p is None or not feasible(p):
        p = np.zeros(d)
        p[sup] = 1.0 / sup.size
        if not feasible(p):
            # retreat toward the least exposed vertex
            k_best = sup[int(np.argmax([np.min(1.0 + x_atoms[:, k]) for k in sup]))]
            p = np.zeros(d)
            p[k_best] = 1.0
            if not feasible(p):
                raise NoSolution("no feasible portfolio keeps 1 + <p, x> > 0")

    def project(v: np.ndarray) -> np.ndarray:
        out = np.zeros(d)
        out[sup] = _project_simplex(v[sup])
        return out

    g_val = objective(p)
    for _ in range(max_iter):
        grad = gradient(p)
        scale = 1.0 + float(np.abs(grad[sup]).max())
        # optimality over the sub-simplex: no vertex offers first-order gain
        gain = grad[sup].max() - float(grad @ p)
        if gain <= tol * scale:
            break
        lam_now = jump_spec.intensity_at(
            t, kappa_state if kappa_state is not None else p
        )
        slack = float(np.min(1.0 + x_atoms @ p))
        lip = (
            np.linalg.norm(c, 2)
            + lam_now * float(
                (jump_spec.probs * np.linalg.norm(x_atoms, axis=1) ** 2).sum()
            ) / max(slack, 1e-6) ** 2
        )
        step = 1.0 / max(lip, 1e-12)
        improved = False
        for _ in range(60):
            cand = project(p + step * grad)
            if feasible(cand):
                g_cand = objective(cand)
                if g_cand > g_val + 1e-18:
                    p, g_val = cand, g_cand
                    improved = True
                    break
                if np.abs(cand - p).max() <= 1e-16:
                    break
            step *= 0.5
        if not improved:
            break
    return p, g_val


# ---------------------------------------------------------------------------
# generalized diagnostics


def _stationary_at(b, c, r, jump_spec, t, p, support, tol=_PGD_TOL) -> bool:
    """First-order optimality of ``p`` over the living sub-simplex.

    Cheap pre-check that skips the iterative solver on balanced states,
    where the current weight vector is already growth optimal (with an
    exactly zero gradient).
    """
    grad = (np.asarray(b, dtype=float) - r) - np.asarray(c, dtype=float) @ p
    if jump_spec is not None:
        grad = grad + jump_spec.growth_jump_gradient(t, p, p)
    sup = np.flatnonzero(support)
    gain = grad[sup].max() - float(grad @ p)
    return gain <= tol * (1.0 + float(np.abs(grad[sup]).max()))


def _batch_balanced_stationary(
    slab: np.ndarray, jump_spec: JumpSpec, t: float, cutoff: np.ndarray,
    tol: float = _PGD_TOL,
) -> np.ndarray:
    """Rows of ``slab`` where the balanced drift is already growth optimal.

    Vectorized mirror of ``_stationary_at`` specialized to ``b_spec=None``,
    where the drift-minus-rate term collapses to the jump moments.  Rows
    whose state leaves the jump domain report ``False`` so the scalar
    fallback can raise the precise error.
    """
    n, d = slab.shape
    past = ~(t < cutoff)
    lam = jump_spec.intensity_at(t)
    if lam == 0.0:
        # balanced drift without jump activity has an exactly zero gradient
        return np.ones(n, dtype=bool)
    x = jump_spec.atoms_at(t)
    denom = 1.0 + slab @ x.T
    bad = (denom <= 0.0).any(axis=1) & ~past
    denom[denom <= 0.0] = 1.0
    small = np.linalg.norm(x, axis=1) <= 1.0
    weights = jump_spec.probs / denom
    i1 = lam * (weights @ x)
    i2 = lam * ((jump_spec.probs * small) @ x)
    gj = lam * ((weights - jump_spec.probs * small) @ x)
    grad = -i1 + i2 + gj
    grad[past] = 0.0
    alive = slab > DEATH_THRESHOLD
    gain = np.where(alive, grad, -np.inf).max(axis=1) - (grad * slab).sum(axis=1)
    scale = np.where(alive, np.abs(grad), 0.0).max(axis=1)
    return (gain <= tol * (1.0 + scale)) & ~bad


def loss_of_balance_jump(
    ps: PathSet,
    jump_spec: JumpSpec,
    *,
    b_spec: ProcessSpec | None = None,
    r_spec: ProcessSpec | None = None,
    lifetimes: LifetimeRecord | None = None,
) -> np.ndarray:
    """Generalized loss-of-balance along jump-market paths.

    Per stored step the growth-optimal ``rho`` over the living companies is
    found by maximizing the jump-adjusted growth rate; the increment is

        (-rel(kappa | rho) + 0.5 <kappa-rho, c (kappa-rho)>) dt
        + integral of 1 ∧ log^2((1+<kappa,x>)/(1+<rho,x>)) dnu dt.

    Without ``b_spec`` the drift is the balanced one (so a path from
    ``simulate_jump_balanced`` accrues exactly zero).  Passing the run's
    ``lifetimes`` switches the jump measure off per path once its jump
    budget ran out, matching the engine.  Returns an (n_paths, n_stored)
    array.
    """
    if ps.c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    times = ps.times()
    n, ns, d = ps.kappa.shape
    r_spec = r_spec if r_spec is not None else ProcessSpec.constant(0.0)
    cutoff = np.full(n, np.inf)
    if lifetimes is not None and lifetimes.budget_exhausted_time is not None:
        cutoff = np.asarray(lifetimes.budget_exhausted_time, dtype=float)
    L = np.zeros((n, ns))

    # Under the balanced drift almost every (path, step) pair is already
    # growth optimal, so check stationarity for a whole time slice at once
    # and fall back to the per-path solver only where the check fails.
    batch_ok = (
        b_spec is None
        and not ps.c_spec.depends_on_state()
        and not r_spec.depends_on_state()
        and not jump_spec.intensity.depends_on_state()
        and jump_spec.has_moments
    )
    if batch_ok:
        acc = np.zeros(n)
        rho_prev: dict[int, np.ndarray] = {}
        for k in range(ns - 1):
            t = float(times[k])
            dt_k = float(times[k + 1] - times[k])
            slab = ps.kappa[:, k]
            need = ~_batch_balanced_stationary(slab, jump_spec, t, cutoff)
            for p in np.flatnonzero(need):
                kap = slab[p]
                alive = kap > DEATH_THRESHOLD
                c = np.asarray(ps.c_spec(t, kap), dtype=float)
                r = float(r_spec(t, kap))
                nu = jump_spec if t < cutoff[p] else None
                if nu is None:
                    b = c @ kap + r
                else:
                    b = drift_from_balance_jump(kap, c, nu, r, t)
                warm = rho_prev.get(p, kap)
                rho, _ = growth_optimal_jump(
                    b, c, r, nu, t,
                    support=alive, warm_start=warm, kappa_state=kap,
                )
                rho_prev[p] = rho
                rel_k = rel_rate_of_return(kap, rho, b, c, nu, r, t, kappa_state=kap)
                quad = float((kap - rho) @ c @ (kap - rho))
                inc = -rel_k + 0.5 * quad
                if nu is not None:
                    inc += nu.loss_jump_integrand(t, kap, rho)
                acc[p] += max(inc, 0.0) * dt_k
            L[:, k + 1] = acc
        return L

    for p in range(n):
        acc = 0.0
        rho_prev = None
        for k in range(ns - 1):
            t = float(times[k])
            kap = ps.kappa[p, k]
            alive = kap > DEATH_THRESHOLD
            c = np.asarray(ps.c_spec(t, kap), dtype=float)
            r = float(r_spec(t, kap))
            nu = jump_spec if t < cutoff[p] else None
            if b_spec is None:
                if nu is None:
                    b = c @ kap + r
                else:
                    b = drift_from_balance_jump(kap, c, nu, r, t)
            else:
                b = np.asarray(b_spec(t, kap), dtype=float)
            if _stationary_at(b, c, r, nu, t, kap, alive):
                rho = kap
            else:
                warm = rho_prev if rho_prev is not None else kap
                rho, _ = growth_optimal_jump(
                    b, c, r, nu, t,
                    support=alive, warm_start=warm, kappa_state=kap,
                )
                rho_prev = rho
            rel_k = rel_rate_of_return(kap, rho, b, c, nu, r, t, kappa_state=kap)
            quad = float((kap - rho) @ c @ (kap - rho))
            inc = -rel_k + 0.5 * quad
            if nu is not None:
                inc += nu.loss_jump_integrand(t, kap, rho)
            dt_k = float(times[k + 1] - times[k])
            acc += max(inc, 0.0) * dt_k
            L[p, k + 1] = acc
    return L


def pairwise_distance_jump(
    ps: PathSet,
    i: int,
    j: int,
    jump_spec: JumpSpec,
    *,
    b_spec: ProcessSpec | None = None,
    r_spec: ProcessSpec | None = None,
    horizon: float | None = None,
    path_index: int = 0,
    lifetimes: LifetimeRecord | None = None,
) -> float:
    """Generalized divergence between companies ``i`` and ``j`` on one path.

    ``integral of (|rel(e_i|rho) - rel(e_j|rho)| + 0.5 c^{i|j}) dt`` plus
    the jump term ``integral of 1 ∧ log^2((1+x_i)/(1+x_j)) dnu dt``, up to
    ``horizon``.  Both companies must be alive throughout.  ``lifetimes``
    switches the jump measure off once the path's jump budget ran out.
    """
    if i == j:
        return 0.0
    if ps.c_spec is None:
        raise ValueError("PathSet does not record its covariance spec")
    times = ps.times()
    if horizon is None:
        horizon = float(times[-1])
    r_spec = r_spec if r_spec is not None else ProcessSpec.constant(0.0)
    e_i = np.zeros(ps.d)
    e_i[i] = 1.0
    e_j = np.zeros(ps.d)
    e_j[j] = 1.0
    cutoff = np.inf
    if lifetimes is not None and lifetimes.budget_exhausted_time is not None:
        cutoff = float(lifetimes.budget_exhausted_time[path_index])
    total = 0.0
    rho_prev = None
    for k in range(len(times) - 1):
        t = float(times[k])
        if t >= horizon:
            break
        kap = ps.kappa[path_index, k]
        if kap[i] <= DEATH_THRESHOLD or kap[j] <= DEATH_THRESHOLD:
            raise ValueError(
                f"company {i if kap[i] <= DEATH_THRESHOLD else j} is dead at "
                f"t={t:.6g}; the distance needs both alive"
            )
        alive = kap > DEATH_THRESHOLD
        c = np.asarray(ps.c_spec(t, kap), dtype=float)
        r = float(r_spec(t, kap))
        nu = jump_spec if t < cutoff else None
        if b_spec is None:
            if nu is None:
                b = c @ kap + r
            else:
                b = drift_from_balance_jump(kap, c, nu, r, t)
        else:
            b = np.asarray(b_spec(t, kap), dtype=float)
        if _stationary_at(b, c, r, nu, t, kap, alive):
            rho = kap
        else:
            warm = rho_prev if rho_prev is not None else kap
            rho, _ = growth_optimal_jump(
                b, c, r, nu, t,
                support=alive, warm_start=warm, kappa_state=kap,
            )
            rho_prev = rho
        rel_i = rel_rate_of_return(e_i, rho, b, c, nu, r, t, kappa_state=kap)
        rel_j = rel_rate_of_return(e_j, rho, b, c, nu, r, t, kappa_state=kap)
        c_pair = c[i, i] + c[j, j] - 2.0 * c[i, j]
        step = min(float(times[k + 1]), horizon) - t
        total += (abs(rel_i - rel_j) + 0.5 * c_pair) * step
        if nu is not None:
            total += nu.pair_jump_integrand(t, i, j, kap) * step
    return total


# ---------------------------------------------------------------------------
# the exact two-company death example


_T_DEATH = 2.0 * np.log(2.0)


def _example_size(t: float) -> np.ndarray:
    level = 1.0 - np.exp(t / 2.0) / 2.0
    level = max(level, 1e-30)
    return np.array([[0.0, 1.0 / level]])


def example_death_of_company(
    grid: PathGrid,
    n_paths: int,
    seed: int,
    *,
    store_every: int = 100,
    n_threads: int = 1,
) -> dict:
    """Two companies, no noise, one compensated upward jump law.

    The second company's weight solves ``dk/dt = -k(1-k) l(t)/(1+k l(t))``
    with ``l(t) = (1 - e^{t/2}/2)^{-1}``, giving the closed form
    ``k(t) = 1 - e^{t/2}/2``: it hits zero at ``t = 2 log 2`` unless a jump
    (unit-rate while the company lives) rescues it first, so exactly
    ``e^{-2 log 2} = 1/4`` of paths lose the company.

    Before its first jump every path rides the same deterministic flow, so
    the analytic comparison runs over the whole ensemble: ``sup_error`` is
    the worst deviation of any stored pre-jump weight from the closed form,
    and ``death_time_err`` the worst |zeta - 2 log 2| over dying paths.
    """
    if grid.dt > 1e-3:
        raise ValueError("the analytic comparison needs dt <= 1e-3")
    # unit rate while the drift can still be outrun, zero afterwards; the
    # 1e-9-wide ramp keeps the knots strictly increasing and never contains
    # a grid point, so every step sees exactly 0 or 1
    intensity = ProcessSpec.time_table(
        [0.0, _T_DEATH - 1e-9, _T_DEATH, _T_DEATH + 1.0],
        [1.0, 1.0, 0.0, 0.0],
    )
    spec = JumpSpec.finite_atoms(
        intensity, lam_max=1.0, atoms=_example_size, probs=[1.0], max_jumps=1
    )
    c_zero = ProcessSpec.constant(np.zeros((2, 2)))
    k0 = np.array([0.5, 0.5])

    ps, rec = simulate_jump_balanced(
        c_zero, spec, k0, grid, n_paths, seed,
        store_every=store_every, n_threads=n_threads,
    )
    times = ps.times()
    analytic = np.where(
        times < _T_DEATH, 1.0 - np.exp(times / 2.0) / 2.0, 0.0
    )
    # per-path comparison window: strictly before the first accepted jump
    # (nan = never jumped = compare everywhere)
    tau = np.where(np.isnan(rec.first_jump_time), np.inf, rec.first_jump_time)
    pre_jump = times[None, :] < tau[:, None]
    err = np.abs(ps.kappa[:, :, 1] - analytic[None, :])
    sup_error = float(np.where(pre_jump, err, 0.0).max())

    died = rec.died(1)
    frac = float(died.mean())
    se = float(np.sqrt(0.25 * 0.75 / n_paths))
    death_times = rec.zeta[died, 1]
    death_time_err = (
        float(np.abs(death_times - _T_DEATH).max()) if died.any() else 0.0
    )
    return {
        "path_set": ps,
        "lifetimes": rec,
        "jump_spec": spec,
        "analytic_weight": analytic,
        "sup_error": sup_error,
        "death_time": float(death_times.mean()) if died.any() else np.nan,
        "death_time_err": death_time_err,
        "expected_death_time": float(_T_DEATH),
        "dying_fraction": frac,
        "expected_dying_fraction": 0.25,
        "dying_fraction_se": se,
        "death_time_spread": float(np.ptp(death_times)) if died.any() else 0.0,
        "n_paths": n_paths,
    }


# ---------------------------------------------------------------------------
# serialization


def jump_pathset_to_csv(ps: PathSet, rec: LifetimeRecord, path) -> str:
    """CSV rows ``path,step,t,kappa_*,zeta_*,death_mode_*``; sha256 digest."""
    import hashlib

    n, ns, d = ps.kappa.shape
    times = ps.times()
    digest = hashlib.sha256()
    with open(path, "w") as fh:
        kap_cols = ",".join(f"kappa_{i + 1}" for i in range(d))
        z_cols = ",".join(f"zeta_{i + 1}" for i in range(d))
        m_cols = ",".join(f"death_mode_{i + 1}" for i in range(d))
        fh.write(f"path,step,t,{kap_cols},{z_cols},{m_cols}\n")
        for p in range(n):
            z_txt = ",".join(f"{z:.17g}" for z in rec.zeta[p])
            m_txt = ",".join(rec.death_mode[p])
            for k in range(ns):
                kap_txt = ",".join(f"{x:.17g}" for x in ps.kappa[p, k])
                fh.write(
                    f"{p},{ps.stored_steps[k]},{times[k]:.17g},"
                    f"{kap_txt},{z_txt},{m_txt}\n"
                )
    with open(path, "rb") as fh:
        for buf in iter(lambda: fh.read(1 << 20), b""):
            digest.update(buf)
    return digest.hexdigest()
