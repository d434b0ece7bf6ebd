"""Path simulation engines for capitalizations and relative-cap weights.

Two generators live here.  ``simulate_capitalizations`` integrates company
capitalizations ``S`` under drift/covariance coefficients and derives the
weight vector ``kappa = S / sum(S)``.  ``simulate_relative_caps_balanced``
integrates the driftless weight dynamics

    d kappa_i = kappa_i <e_i - kappa, sigma dW>

directly on the simplex (each weight is a martingale), and
``lift_to_capitalizations`` rebuilds a consistent capitalization surface on
top of such a weight path for any prescribed interest rate.

Both engines walk log-coordinates with an Euler step, so states stay
positive by construction, and both draw their noise from per-path
counter-based streams keyed by ``(seed, stream, path_index)``.  Results are
therefore bit-identical no matter how paths are partitioned across worker
threads.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InconsistentInitialState,
    NumericalOverflow,
    ZeroTotalCapital,
)
from .market_model import (
    MarketParams,
    PathGrid,
    ProcessSpec,
    psd_factor,
    validate_params,
)

__all__ = [
    "PathSet",
    "simulate_capitalizations",
    "simulate_relative_caps_balanced",
    "lift_to_capitalizations",
    "relative_caps_from_caps",
    "pathset_to_csv",
    "pathset_summary",
]

# Sub-stream labels; the jump engine reuses BROWNIAN so that a jump market
# with intensity zero reproduces the continuous engine path-for-path.
STREAM_BROWNIAN = 0
STREAM_JUMP = 1

_CHUNK_PATHS = 1024
_BLOCK_STEPS = 4096
_LOG_FLOOR = np.log(1e-300)
_LOG_CAP = 700.0


def path_generator(seed: int, stream: int, path_index: int) -> np.random.Generator:
    """Counter-based generator for one path's draws in one stream."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(stream), int(path_index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class EngineDiagnostics:
    """Online health counters accumulated during a simulation."""

    max_simplex_defect: float = 0.0
    max_prerenorm_defect: float = 0.0
    sum_prerenorm_defect: float = 0.0
    n_prerenorm_samples: int = 0
    n_clamped: int = 0

    @property
    def mean_prerenorm_defect(self) -> float:
        if self.n_prerenorm_samples == 0:
            return 0.0
        return self.sum_prerenorm_defect / self.n_prerenorm_samples

    def merge(self, other: "EngineDiagnostics") -> None:
        self.max_simplex_defect = max(self.max_simplex_defect, other.max_simplex_defect)
        self.max_prerenorm_defect = max(
            self.max_prerenorm_defect, other.max_prerenorm_defect
        )
        self.sum_prerenorm_defect += other.sum_prerenorm_defect
        self.n_prerenorm_samples += other.n_prerenorm_samples
        self.n_clamped += other.n_clamped


@dataclass
class PathSet:
    """Simulated ensemble on a uniform grid, possibly thinned for storage.

    ``kappa`` has shape (n_paths, n_stored, d) where ``stored_steps`` maps
    the storage axis back to grid steps.  ``caps`` and
    ``brownian_increments`` are optional; increments are the raw
    ``N(0, dt I)`` draws (shape (n_paths, n_steps, d)) and are only kept at
    full storage resolution, since a thinned increment sequence cannot be
    replayed.
    """

    grid: PathGrid
    n_paths: int
    seed: int
    kappa: np.ndarray
    stored_steps: np.ndarray
    caps: np.ndarray | None = None
    brownian_increments: np.ndarray | None = None
    a_spec: ProcessSpec | None = None
    c_spec: ProcessSpec | None = None
    r_spec: ProcessSpec | None = None
    diagnostics: EngineDiagnostics = field(default_factory=EngineDiagnostics)

    @property
    def d(self) -> int:
        return self.kappa.shape[-1]

    @property
    def n_stored(self) -> int:
        return len(self.stored_steps)

    def times(self) -> np.ndarray:
        return self.grid.t0 + self.grid.dt * self.stored_steps

    @property
    def stored_dt(self) -> float:
        """Grid spacing of the storage axis (uniform only when thinned evenly)."""
        return float(self.grid.dt * (self.stored_steps[1] - self.stored_steps[0]))

    def validate(self, tol: float = 1e-9) -> None:
        defect = np.abs(self.kappa.sum(axis=-1) - 1.0).max()
        if defect > tol or self.kappa.min() < -tol:
            raise ValueError(f"stored weights leave the simplex by {defect:.3e}")
        if self.caps is not None:
            total = self.caps.sum(axis=-1, keepdims=True)
            recon = np.abs(self.caps / total - self.kappa).max()
            if recon > tol:
                raise ValueError(f"caps and weights disagree by {recon:.3e}")


def _stored_steps(n_steps: int, store_every: int) -> np.ndarray:
    steps = list(range(0, n_steps + 1, store_every))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.asarray(steps, dtype=np.int64)


def _chunks(n_paths: int):
    return [
        (lo, min(lo + _CHUNK_PATHS, n_paths))
        for lo in range(0, n_paths, _CHUNK_PATHS)
    ]


def _run_chunked(worker, n_paths: int, n_threads: int) -> EngineDiagnostics:
    """Run ``worker(lo, hi) -> EngineDiagnostics`` over fixed path chunks.

    Chunk boundaries never depend on the thread count, and each worker
    writes only to its own slice of the output arrays, so results are
    identical for any ``n_threads``.
    """
    diag = EngineDiagnostics()
    spans = _chunks(n_paths)
    if n_threads <= 1 or len(spans) == 1:
        for lo, hi in spans:
            diag.merge(worker(lo, hi))
        return diag
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        for part in pool.map(lambda span: worker(*span), spans):
            diag.merge(part)
    return diag


class _CoeffCache:
    """Per-step coefficient evaluation with a constant-spec fast path."""

    def __init__(self, params: MarketParams):
        self.params = params
        self.constant = (
            params.a_spec.is_constant()
            and params.c_spec.is_constant()
            and params.r_spec.is_constant()
        )
        self.state_dependent = (
            params.a_spec.depends_on_state()
            or params.c_spec.depends_on_state()
            or params.r_spec.depends_on_state()
        )
        if self.constant:
            self.a = np.asarray(params.a_spec(0.0), dtype=float)
            self.c = np.asarray(params.c_spec(0.0), dtype=float)
            self.r = float(params.r_spec(0.0))
            self.sigma = psd_factor(self.c)

    def at(self, t: float, kappa_row: np.ndarray):
        """Coefficients for one path state (used on the state-dependent path)."""
        p = self.params
        a = np.asarray(p.a_spec(t, kappa_row), dtype=float)
        c = np.asarray(p.c_spec(t, kappa_row), dtype=float)
        r = float(p.r_spec(t, kappa_row))
        return a, c, r


def _renormalize_log(logk: np.ndarray, diag: EngineDiagnostics) -> np.ndarray:
    """Project log-weights back onto the simplex; returns the weights.

    Tracks the pre-renormalization defect |sum(exp(logk)) - 1|, which must
    shrink linearly in dt for the scheme to be consistent.  A -inf entry
    marks a coordinate pinned at weight zero and passes through untouched.
    """
    clip_mask = (logk < _LOG_FLOOR) & (logk > -np.inf)
    if clip_mask.any():
        diag.n_clamped += int(clip_mask.sum())
        np.copyto(logk, _LOG_FLOOR, where=clip_mask)
    mx = logk.max(axis=1, keepdims=True)
    w = np.exp(logk - mx)
    s = w.sum(axis=1, keepdims=True)
    pre = np.abs(np.exp(mx[:, 0]) * s[:, 0] - 1.0)
    diag.max_prerenorm_defect = max(diag.max_prerenorm_defect, float(pre.max()))
    diag.sum_prerenorm_defect += float(pre.sum())
    diag.n_prerenorm_samples += pre.size
    logk -= mx + np.log(s)
    kappa = np.exp(logk)
    defect = float(np.abs(kappa.sum(axis=1) - 1.0).max())
    diag.max_simplex_defect = max(diag.max_simplex_defect, defect)
    return kappa


def simulate_relative_caps_balanced(
    c_spec: ProcessSpec,
    kappa0,
    grid: PathGrid,
    n_paths: int,
    seed: int,
    *,
    store_every: int = 1,
    store_increments: bool = False,
    n_threads: int = 1,
) -> PathSet:
    """Simulate the driftless weight dynamics on the simplex.

    Walks ``log kappa_i`` with drift ``-0.5 <e_i - kappa, c (e_i - kappa)>``
    and noise ``<e_i - kappa, sigma dW>``, renormalizing each step so every
    state lies exactly on the simplex.  Each weight coordinate is a
    martingale up to O(dt) discretization bias.
    """
    kappa0 = np.asarray(kappa0, dtype=float)
    d = len(kappa0)
    if np.any(kappa0 <= 0.0) or abs(float(kappa0.sum()) - 1.0) > 1e-9:
        raise InconsistentInitialState(
            f"kappa0 must lie in the open simplex, got {kappa0}"
        )
    kappa0 = kappa0 / kappa0.sum()
    if store_increments and store_every != 1:
        raise ValueError("increments can only be stored at full resolution")

    stored = _stored_steps(grid.n_steps, store_every)
    stored_pos = {int(s): i for i, s in enumerate(stored)}
    kappa_out = np.empty((n_paths, len(stored), d))
    inc_out = (
        np.empty((n_paths, grid.n_steps, d)) if store_increments else None
    )

    const_c = c_spec.is_constant()
    state_c = c_spec.depends_on_state()
    if const_c:
        c0 = np.asarray(c_spec(0.0), dtype=float)
        sigma0 = psd_factor(c0)
        diag_c0 = np.diag(c0).copy()

    sqrt_dt = np.sqrt(grid.dt)
    dt = grid.dt

    def worker(lo: int, hi: int) -> EngineDiagnostics:
        m = hi - lo
        diag = EngineDiagnostics()
        gens = [path_generator(seed, STREAM_BROWNIAN, p) for p in range(lo, hi)]
        logk = np.tile(np.log(kappa0), (m, 1))
        kappa = np.tile(kappa0, (m, 1))
        kappa_out[lo:hi, 0] = kappa0
        step = 0
        while step < grid.n_steps:
            blk = min(_BLOCK_STEPS, grid.n_steps - step)
            dw = np.stack([g.standard_normal((blk, d)) for g in gens]) * sqrt_dt
            if inc_out is not None:
                inc_out[lo:hi, step : step + blk] = dw
            for j in range(blk):
                t = grid.t0 + (step + j) * dt
                if const_c:
                    c, sigma, diag_c = c0, sigma0, diag_c0
                    y = dw[:, j] @ sigma.T
                    ck = kappa @ c
                else:
                    y = np.empty((m, d))
                    ck = np.empty((m, d))
                    diag_c = np.empty((m, d))
                    if not state_c:
                        c = np.asarray(c_spec(t), dtype=float)
                        sigma = psd_factor(c)
                        y[:] = dw[:, j] @ sigma.T
                        ck[:] = kappa @ c
                        diag_c[:] = np.diag(c)
                    else:
                        for i in range(m):
                            c = np.asarray(c_spec(t, kappa[i]), dtype=float)
                            sigma = psd_factor(c)
                            y[i] = sigma @ dw[i, j]
                            ck[i] = c @ kappa[i]
                            diag_c[i] = np.diag(c)
                quad = np.einsum("ij,ij->i", kappa, ck)
                qform = diag_c - 2.0 * ck + quad[:, None]
                u = y - np.einsum("ij,ij->i", kappa, y)[:, None]
                logk += (-0.5 * dt) * qform + u
                kappa = _renormalize_log(logk, diag)
                idx = stored_pos.get(step + j + 1)
                if idx is not None:
                    kappa_out[lo:hi, idx] = kappa
            step += blk
        return diag

    diag = _run_chunked(worker, n_paths, n_threads)
    return PathSet(
        grid=grid,
        n_paths=n_paths,
        seed=seed,
        kappa=kappa_out,
        stored_steps=stored,
        brownian_increments=inc_out,
        c_spec=c_spec,
        diagnostics=diag,
    )


def simulate_capitalizations(
    params: MarketParams,
    grid: PathGrid,
    n_paths: int,
    seed: int,
    *,
    store_every: int = 1,
    store_increments: bool = False,
    n_threads: int = 1,
) -> PathSet:
    """Simulate company capitalizations under general coefficients.

    Log-Euler per company: ``log S_i`` gains ``(a_i - c_ii / 2) dt`` plus the
    correlated Gaussian increment.  Raises :class:`NumericalOverflow` when a
    log-capitalization leaves [-700, 700], which would denormalize ``exp``.
    """
    validate_params(params)
    d = params.d
    if store_increments and store_every != 1:
        raise ValueError("increments can only be stored at full resolution")

    stored = _stored_steps(grid.n_steps, store_every)
    stored_pos = {int(s): i for i, s in enumerate(stored)}
    kappa_out = np.empty((n_paths, len(stored), d))
    caps_out = np.empty((n_paths, len(stored), d))
    inc_out = (
        np.empty((n_paths, grid.n_steps, d)) if store_increments else None
    )
    cache = _CoeffCache(params)
    log_s0 = np.log(params.s0)
    sqrt_dt = np.sqrt(grid.dt)
    dt = grid.dt

    def worker(lo: int, hi: int) -> EngineDiagnostics:
        m = hi - lo
        diag = EngineDiagnostics()
        gens = [path_generator(seed, STREAM_BROWNIAN, p) for p in range(lo, hi)]
        logs = np.tile(log_s0, (m, 1))
        caps = np.exp(logs)
        kappa = caps / caps.sum(axis=1, keepdims=True)
        caps_out[lo:hi, 0] = caps
        kappa_out[lo:hi, 0] = kappa
        step = 0
        while step < grid.n_steps:
            blk = min(_BLOCK_STEPS, grid.n_steps - step)
            dw = np.stack([g.standard_normal((blk, d)) for g in gens]) * sqrt_dt
            if inc_out is not None:
                inc_out[lo:hi, step : step + blk] = dw
            for j in range(blk):
                t = grid.t0 + (step + j) * dt
                if cache.constant:
                    drift = (cache.a - 0.5 * np.diag(cache.c)) * dt
                    logs += drift + dw[:, j] @ cache.sigma.T
                elif not cache.state_dependent:
                    a = np.asarray(params.a_spec(t), dtype=float)
                    c = np.asarray(params.c_spec(t), dtype=float)
                    sigma = psd_factor(c)
                    logs += (a - 0.5 * np.diag(c)) * dt + dw[:, j] @ sigma.T
                else:
                    for i in range(m):
                        a, c, _ = cache.at(t, kappa[i])
                        sigma = psd_factor(c)
                        logs[i] += (a - 0.5 * np.diag(c)) * dt + sigma @ dw[i, j]
                worst = float(np.abs(logs).max())
                if worst > _LOG_CAP:
                    raise NumericalOverflow(
                        f"|log S| reached {worst:.1f} at step {step + j + 1}; "
                        "shorten the horizon or rescale the coefficients"
                    )
                mx = logs.max(axis=1, keepdims=True)
                w = np.exp(logs - mx)
                kappa = w / w.sum(axis=1, keepdims=True)
                idx = stored_pos.get(step + j + 1)
                if idx is not None:
                    caps_out[lo:hi, idx] = np.exp(logs)
                    kappa_out[lo:hi, idx] = kappa
            step += blk
        defect = float(np.abs(kappa_out[lo:hi].sum(axis=-1) - 1.0).max())
        diag.max_simplex_defect = max(diag.max_simplex_defect, defect)
        return diag

    diag = _run_chunked(worker, n_paths, n_threads)
    return PathSet(
        grid=grid,
        n_paths=n_paths,
        seed=seed,
        kappa=kappa_out,
        stored_steps=stored,
        caps=caps_out,
        brownian_increments=inc_out,
        a_spec=params.a_spec,
        c_spec=params.c_spec,
        r_spec=params.r_spec,
        diagnostics=diag,
    )


def lift_to_capitalizations(
    kappa_paths: PathSet,
    r_spec: ProcessSpec,
    s0,
) -> PathSet:
    """Rebuild capitalizations over a balanced weight path.

    Total capital follows the market-portfolio wealth equation with drift
    ``a = c kappa + r 1``; each company's capitalization is its weight times
    the total.  Requires full-resolution weights and stored increments so
    the diffusion term can be replayed.
    """
    ps = kappa_paths
    if ps.brownian_increments is None or len(ps.stored_steps) != ps.grid.n_steps + 1:
        raise ValueError(
            "lift needs a PathSet with store_every=1 and store_increments=True"
        )
    if ps.c_spec is None:
        raise ValueError("source PathSet does not record its covariance spec")
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (ps.d,):
        raise DimensionMismatch(f"s0 has shape {s0.shape}, expected ({ps.d},)")
    total0 = float(s0.sum())
    if total0 <= 0.0 or np.any(s0 <= 0.0):
        raise InconsistentInitialState("s0 must be strictly positive")
    if np.abs(s0 / total0 - ps.kappa[:, 0]).max() > 1e-9:
        raise InconsistentInitialState(
            "s0 / sum(s0) disagrees with the initial weights beyond 1e-9"
        )

    n, n_steps, d = ps.n_paths, ps.grid.n_steps, ps.d
    dt = ps.grid.dt
    const_c = ps.c_spec.is_constant()
    state_c = ps.c_spec.depends_on_state()
    if const_c:
        c0 = np.asarray(ps.c_spec(0.0), dtype=float)
        sigma0 = psd_factor(c0)

    log_total = np.full(n, np.log(total0))
    caps = np.empty_like(ps.kappa)
    caps[:, 0] = s0
    times = ps.grid.t0 + dt * np.arange(n_steps + 1)
    for k in range(n_steps):
        kap = ps.kappa[:, k]
        t = float(times[k])
        r = float(r_spec(t)) if not r_spec.depends_on_state() else None
        if const_c:
            c, sigma = c0, sigma0
            y = ps.brownian_increments[:, k] @ sigma.T
            ck = kap @ c
            quad = np.einsum("ij,ij->i", kap, ck)
            rr = r if r is not None else np.array(
                [float(r_spec(t, kap[i])) for i in range(n)]
            )
        else:
            y = np.empty((n, d))
            quad = np.empty(n)
            rr = np.empty(n)
            if not state_c and r is not None:
                c = np.asarray(ps.c_spec(t), dtype=float)
                sigma = psd_factor(c)
                y[:] = ps.brownian_increments[:, k] @ sigma.T
                ck = kap @ c
                quad[:] = np.einsum("ij,ij->i", kap, ck)
                rr = r
            else:
                for i in range(n):
                    c = np.asarray(ps.c_spec(t, kap[i]), dtype=float)
                    sigma = psd_factor(c)
                    y[i] = sigma @ ps.brownian_increments[i, k]
                    quad[i] = kap[i] @ c @ kap[i]
                    rr[i] = float(r_spec(t, kap[i]))
        log_total += (rr + 0.5 * quad) * dt + np.einsum("ij,ij->i", kap, y)
        caps[:, k + 1] = ps.kappa[:, k + 1] * np.exp(log_total)[:, None]

    return PathSet(
        grid=ps.grid,
        n_paths=n,
        seed=ps.seed,
        kappa=ps.kappa,
        stored_steps=ps.stored_steps,
        caps=caps,
        brownian_increments=ps.brownian_increments,
        a_spec=None,
        c_spec=ps.c_spec,
        r_spec=r_spec,
        diagnostics=ps.diagnostics,
    )


def relative_caps_from_caps(caps: np.ndarray) -> np.ndarray:
    """Weights ``S_i / sum(S)`` for capitalization arrays of any batch shape.

    Dead companies (zero capitalization) get weight zero; a state whose
    total capital is not strictly positive raises
    :class:`ZeroTotalCapital`.
    """
    caps = np.asarray(caps, dtype=float)
    total = caps.sum(axis=-1, keepdims=True)
    if np.any(~np.isfinite(total)) or np.any(total <= 0.0):
        raise ZeroTotalCapital("total capital must be strictly positive")
    return caps / total


# ---------------------------------------------------------------------------
# serialization


def pathset_to_csv(ps: PathSet, path) -> str:
    """Write stored states as CSV; returns the file's sha256 hex digest.

    Columns: ``path,step,t,kappa_1..d`` plus ``S_1..d`` when caps are
    present.  Floats are printed with 17 significant digits so a replayed
    run reproduces the file byte-for-byte.
    """
    n, ns, d = ps.kappa.shape
    cols = [f"kappa_{i + 1}" for i in range(d)]
    blocks = [
        np.repeat(np.arange(n, dtype=float), ns),
        np.tile(ps.stored_steps.astype(float), n),
        np.tile(ps.times(), n),
        ps.kappa.reshape(n * ns, d),
    ]
    if ps.caps is not None:
        cols += [f"S_{i + 1}" for i in range(d)]
        blocks.append(ps.caps.reshape(n * ns, d))
    data = np.column_stack([np.asarray(b).reshape(n * ns, -1) for b in blocks])
    header = "path,step,t," + ",".join(cols)
    fmt = "%d,%d," + ",".join(["%.17g"] * (data.shape[1] - 2))
    np.savetxt(path, data, fmt=fmt, header=header, comments="")
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for buf in iter(lambda: fh.read(1 << 20), b""):
            digest.update(buf)
    return digest.hexdigest()


def pathset_summary(ps: PathSet, checkpoint_times=None) -> dict:
    """Ensemble summary (means, standard errors, covariances) at checkpoints.

    Defaults to quarter points ``T/4, T/2, 3T/4, T`` of the simulated
    horizon, snapped to stored steps.
    """
    times = ps.times()
    horizon = times[-1]
    if checkpoint_times is None:
        checkpoint_times = [horizon / 4, horizon / 2, 3 * horizon / 4, horizon]
    out = []
    for tc in checkpoint_times:
        idx = int(np.argmin(np.abs(times - tc)))
        snap = ps.kappa[:, idx]
        out.append(
            {
                "t": float(times[idx]),
                "step": int(ps.stored_steps[idx]),
                "kappa_mean": snap.mean(axis=0).tolist(),
                "kappa_se": (snap.std(axis=0, ddof=1) / np.sqrt(ps.n_paths)).tolist()
                if ps.n_paths > 1
                else [0.0] * ps.d,
                "kappa_cov": np.atleast_2d(np.cov(snap.T)).tolist(),
            }
        )
    return {
        "n_paths": ps.n_paths,
        "seed": ps.seed,
        "dt": ps.grid.dt,
        "n_steps": ps.grid.n_steps,
        "checkpoints": out,
        "diagnostics": {
            "max_simplex_defect": ps.diagnostics.max_simplex_defect,
            "max_prerenorm_defect": ps.diagnostics.max_prerenorm_defect,
            "mean_prerenorm_defect": ps.diagnostics.mean_prerenorm_defect,
            "n_clamped": ps.diagnostics.n_clamped,
        },
    }
