"""Reflecting random walks in convex domains via the projected Euler scheme.

One step from x over a time increment dt draws a standard Gaussian vector Z,
forms the free move y = x + sqrt(dt) Z, and returns

    x' = project(y),        dl = |y - x'|,

so the walk never leaves the domain and dl accumulates into a boundary local
time proxy (dl is zero strictly inside).  Because the metric projection onto
a convex set is nonexpansive, two walks driven by the same Gaussian
increments can only move closer together; that pathwise contraction is the
backbone of the coupling checks in `verify`.

Randomness is a counter-based generator (SplitMix64-style mixing) with one
independent stream per path index, derived from a single master seed.  All
estimates built on these paths are bit-reproducible for a fixed master seed
regardless of how paths are chunked across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import ConvexDomain, GeometryError

# -- counter-based RNG -------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_INV53 = float(2.0 ** -53)
_ONE = np.uint64(1)


def mix64(z: np.uint64) -> np.uint64:
    """Finalizer of SplitMix64; a bijective avalanche on 64-bit words."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def derive_seed(master_seed: int, *tags: int) -> int:
    """Stable sub-seed derivation so independent runs never share streams."""
    s = np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for t in tags:
            s = mix64(s ^ mix64(np.uint64(t & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + _ONE))
    return int(s)


def _path_states(master_seed: int, lo: int, hi: int) -> np.ndarray:
    """Initial stream state for path indices lo..hi-1 (vectorized)."""
    idx = np.arange(lo, hi, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(master_seed & 0xFFFFFFFFFFFFFFFF) ^ mix64((idx + _ONE) * _GOLDEN))


def _draw_u01(states: np.ndarray) -> np.ndarray:
    """Advance every stream one draw; return uniforms in (0, 1)."""
    with np.errstate(over="ignore"):
        states += _GOLDEN          # in place: the stream position moves on
        z = mix64(states)          # mix64 allocates; states stay untouched
    return ((z >> _S11).astype(np.float64) + 0.5) * _INV53


def gaussian_increments(states: np.ndarray, d: int) -> np.ndarray:
    """One step's standard-normal vector per stream, shape (n, d).

    Each step consumes exactly ceil(d/2) Box-Muller pairs (two uniform draws
    per pair); the trailing component of the last pair is dropped when d is
    odd.  The draw count per step is therefore fixed by d alone, which keeps
    streams aligned across different recording schedules.
    """
    n = states.shape[0]
    out = np.empty((n, d))
    for j in range(0, d, 2):
        u1 = _draw_u01(states)
        u2 = _draw_u01(states)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out[:, j] = r * np.cos(theta)
        if j + 1 < d:
            out[:, j + 1] = r * np.sin(theta)
    return out


# -- parameters and path records ---------------------------------------------


@dataclass(frozen=True)
class PathParams:
    """Scheme parameters: step size, horizon, path count, master seed.

    `horizon_T` is the process-time horizon used by `simulate` and
    `simulate_coupled`; when set it must be an integer number of steps.
    Estimators that determine their own horizons ignore it.
    """

    step_h: float
    horizon_T: float | None = None
    n_paths: int = 10_000
    master_seed: int = 0

    def __post_init__(self):
        if not self.step_h > 0:
            raise ValueError("step_h must be positive")
        if self.horizon_T is not None:
            if not self.horizon_T >= self.step_h:
                raise ValueError("horizon_T must be at least step_h")
            n = self.horizon_T / self.step_h
            if abs(n - round(n)) > 1e-9:
                raise ValueError("horizon_T must be an integer multiple of step_h")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")

    def n_steps(self) -> int:
        if self.horizon_T is None:
            raise ValueError("horizon_T is not set")
        return int(round(self.horizon_T / self.step_h))


@dataclass(frozen=True)
class RbmState:
    position: np.ndarray
    local_time: float
    time: float


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray          # (k+1,) uniform grid including time 0
    positions: np.ndarray      # (k+1, d)
    local_times: np.ndarray    # (k+1,) cumulative
    path_index: int = 0

    def state(self, k: int) -> RbmState:
        return RbmState(
            position=self.positions[k],
            local_time=float(self.local_times[k]),
            time=float(self.times[k]),
        )


@dataclass(frozen=True)
class CoupledTrajectory:
    times: np.ndarray
    positions_x: np.ndarray
    positions_y: np.ndarray
    local_times_x: np.ndarray
    local_times_y: np.ndarray
    initial_separation: float
    path_index: int = 0

    def separations(self) -> np.ndarray:
        return np.linalg.norm(self.positions_x - self.positions_y, axis=-1)


# -- stepping -----------------------------------------------------------------


def step(domain: ConvexDomain, state: RbmState, dW: np.ndarray, step_h: float) -> RbmState:
    """One projected-Euler step driven by the increment dW ~ N(0, step_h I)."""
    y = state.position + np.asarray(dW, dtype=np.float64)
    x_new = domain.project(y)
    dl = float(np.linalg.norm(y - x_new))
    return RbmState(
        position=x_new, local_time=state.local_time + dl, time=state.time + step_h
    )


def _segments(query_times: np.ndarray, h: float):
    """Split [0, max(query_times)] into steps of h (plus remainders) hitting
    every query time exactly.  Returns (dts, record_after) where record_after
    maps each query time to the step count after which it is reached."""
    qt = np.asarray(query_times, dtype=np.float64)
    if qt.ndim != 1 or qt.size == 0:
        raise ValueError("query_times must be a nonempty 1-d sequence")
    if np.any(qt < 0) or np.any(np.diff(qt) <= 0):
        raise ValueError("query_times must be strictly increasing and nonnegative")
    dts: list[float] = []
    record_after = []
    prev = 0.0
    for t in qt:
        gap = t - prev
        n_full = int(np.floor(gap / h + 1e-9))
        rem = gap - n_full * h
        dts.extend([h] * n_full)
        if rem > 1e-12 * max(1.0, gap):
            dts.append(rem)
        record_after.append(len(dts))
        prev = t
    return np.asarray(dts), record_after


def _run_block(domain, starts, dts, record_after, states, want_local_time):
    """Advance one block of paths; starts has shape (c, d) for c coupled
    chains sharing each path's increments.  Returns positions with shape
    (n, c, q, d) and, optionally, cumulative local times (n, c, q)."""
    n = states.shape[0]
    c, d = starts.shape
    q = len(record_after)
    x = np.broadcast_to(starts, (n, c, d)).copy()
    lt = np.zeros((n, c)) if want_local_time else None
    pos_rec = np.empty((n, c, q, d))
    lt_rec = np.empty((n, c, q)) if want_local_time else None
    rec_set = {}
    for qi, k in enumerate(record_after):
        rec_set.setdefault(k, []).append(qi)
    for qi in rec_set.get(0, []):          # query time 0: the start itself
        pos_rec[:, :, qi, :] = x
        if want_local_time:
            lt_rec[:, :, qi] = 0.0
    for k, dt in enumerate(dts, start=1):
        z = gaussian_increments(states, d)
        y = x + np.sqrt(dt) * z[:, None, :]
        flat = domain.project_many(y.reshape(n * c, d))
        x_new = flat.reshape(n, c, d)
        if want_local_time:
            lt += np.linalg.norm(y - x_new, axis=-1)
        x = x_new
        for qi in rec_set.get(k, []):
            pos_rec[:, :, qi, :] = x
            if want_local_time:
                lt_rec[:, :, qi] = lt
    return pos_rec, lt_rec


_CHUNK = 32768


def sample_paths(
    domain: ConvexDomain,
    starts,
    query_times,
    params: PathParams,
    *,
    n_paths: int | None = None,
    seed: int | None = None,
    path_offset: int = 0,
    record_local_time: bool = False,
    workers: int = 1,
):
    """Simulate many independent paths; the workhorse behind every estimator.

    starts: (c, d) start points for c chains coupled through shared
    increments (c = 1 for plain sampling).  Returns positions of shape
    (n_paths, c, len(query_times), d) and, when record_local_time is set,
    cumulative local times (n_paths, c, len(query_times)).  Results are
    bit-identical for any `workers` value: each path's stream depends only on
    (seed, path index), and per-path results are assembled in index order.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    for s in starts:
        if not domain.contains(s):
            raise GeometryError(f"start point {s} lies outside the domain")
    m = params.n_paths if n_paths is None else int(n_paths)
    master = params.master_seed if seed is None else int(seed)
    qt = np.asarray(query_times, dtype=np.float64)
    dts, record_after = _segments(qt, params.step_h)
    c, d = starts.shape
    q = qt.size
    pos = np.empty((m, c, q, d))
    lt = np.empty((m, c, q)) if record_local_time else None

    def run(lo, hi):
        states = _path_states(master, path_offset + lo, path_offset + hi)
        p, l = _run_block(domain, starts, dts, record_after, states, record_local_time)
        pos[lo:hi] = p
        if record_local_time:
            lt[lo:hi] = l

    chunks = [(lo, min(lo + _CHUNK, m)) for lo in range(0, m, _CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(lambda ab: run(*ab), chunks))
    else:
        for lo, hi in chunks:
            run(lo, hi)
    if record_local_time:
        return pos, lt
    return pos


def simulate(
    domain: ConvexDomain, x0, params: PathParams, path_index: int = 0
) -> Trajectory:
    """One full path on the uniform step grid [0, h, 2h, ..., horizon_T]."""
    qt = params.step_h * np.arange(1, params.n_steps() + 1)
    pos, lt = sample_paths(
        domain,
        np.asarray(x0, dtype=np.float64)[None, :],
        qt,
        params,
        n_paths=1,
        path_offset=path_index,
        record_local_time=True,
    )
    times = np.concatenate([[0.0], qt])
    positions = np.concatenate([np.atleast_2d(x0).astype(float), pos[0, 0]])
    local_times = np.concatenate([[0.0], lt[0, 0]])
    return Trajectory(
        times=times, positions=positions, local_times=local_times, path_index=path_index
    )


def simulate_coupled(
    domain: ConvexDomain, x0, y0, params: PathParams, path_index: int = 0
) -> CoupledTrajectory:
    """Two paths from x0 and y0 driven by identical increments."""
    qt = params.step_h * np.arange(1, params.n_steps() + 1)
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    pos, lt = sample_paths(
        domain,
        np.stack([x0, y0]),
        qt,
        params,
        n_paths=1,
        path_offset=path_index,
        record_local_time=True,
    )
    times = np.concatenate([[0.0], qt])
    return CoupledTrajectory(
        times=times,
        positions_x=np.concatenate([x0[None, :], pos[0, 0]]),
        positions_y=np.concatenate([y0[None, :], pos[0, 1]]),
        local_times_x=np.concatenate([[0.0], lt[0, 0]]),
        local_times_y=np.concatenate([[0.0], lt[0, 1]]),
        initial_separation=float(np.linalg.norm(x0 - y0)),
        path_index=path_index,
    )


def coupled_expansion_scan(
    domain: ConvexDomain,
    start_pairs,
    n_steps: int,
    params: PathParams,
    *,
    seed: int | None = None,
    tolerance: float = 1e-12,
):
    """Drive one synchronously coupled pair per path and watch separations.

    start_pairs has shape (n, 2, d); pair i uses the stream of path index i.
    Nothing is stored per step; the scan returns per-pair summaries:

        max_expansion : largest single-step separation increase per pair
        violations    : total (pair, step) events with increase > tolerance
        final_separation, initial_separation
    """
    start_pairs = np.asarray(start_pairs, dtype=np.float64)
    if start_pairs.ndim != 3 or start_pairs.shape[1] != 2:
        raise ValueError("start_pairs must have shape (n, 2, d)")
    n, _, d = start_pairs.shape
    for s in start_pairs.reshape(-1, d):
        if not domain.contains(s):
            raise GeometryError(f"start point {s} lies outside the domain")
    master = params.master_seed if seed is None else int(seed)
    h = params.step_h
    max_exp = np.empty(n)
    final_sep = np.empty(n)
    violations = 0
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        states = _path_states(master, lo, hi)
        x = start_pairs[lo:hi].copy()
        sep = np.linalg.norm(x[:, 0] - x[:, 1], axis=-1)
        worst = np.full(hi - lo, -np.inf)
        viol = np.zeros(hi - lo, dtype=np.int64)
        for _ in range(n_steps):
            z = gaussian_increments(states, d)
            y = x + np.sqrt(h) * z[:, None, :]
            x = domain.project_many(y.reshape(-1, d)).reshape(y.shape)
            new_sep = np.linalg.norm(x[:, 0] - x[:, 1], axis=-1)
            inc = new_sep - sep
            np.maximum(worst, inc, out=worst)
            viol += inc > tolerance
            sep = new_sep
        max_exp[lo:hi] = worst
        final_sep[lo:hi] = sep
        violations += int(viol.sum())
    return {
        "max_expansion": max_exp,
        "violations": violations,
        "initial_separation": np.linalg.norm(
            start_pairs[:, 0] - start_pairs[:, 1], axis=-1
        ),
        "final_separation": final_sep,
    }


# -- exact reflected sampler on boxes -----------------------------------------


def _fold_into_interval(w, lo, hi):
    """Reflect an unconstrained coordinate into [lo, hi] (sawtooth fold)."""
    L = hi - lo
    r = np.mod(w - lo, 2.0 * L)
    return lo + np.minimum(r, 2.0 * L - r)


def sample_exact_box(
    box,
    x0,
    query_times,
    params: PathParams,
    *,
    n_paths: int | None = None,
    seed: int | None = None,
    path_offset: int = 0,
):
    """Exact reflected Brownian positions in a box at the query times.

    Free Brownian coordinates are folded into the box; no time discretization
    error.  Each query gap consumes one step's worth of draws, so the stream
    layout matches `sample_paths` with one step per gap.
    """
    from .geometry import Box

    if not isinstance(box, Box):
        raise GeometryError("exact sampling is only available on boxes")
    x0 = np.asarray(x0, dtype=np.float64)
    if not box.contains(x0):
        raise GeometryError(f"start point {x0} lies outside the domain")
    qt = np.asarray(query_times, dtype=np.float64)
    if np.any(qt < 0) or np.any(np.diff(qt) <= 0):
        raise ValueError("query_times must be strictly increasing and nonnegative")
    m = params.n_paths if n_paths is None else int(n_paths)
    master = params.master_seed if seed is None else int(seed)
    d = box.dim
    out = np.empty((m, qt.size, d))
    for lo_i in range(0, m, _CHUNK):
        hi_i = min(lo_i + _CHUNK, m)
        states = _path_states(master, path_offset + lo_i, path_offset + hi_i)
        w = np.broadcast_to(x0, (hi_i - lo_i, d)).copy()
        prev = 0.0
        for qi, t in enumerate(qt):
            gap = t - prev
            if gap > 0:
                w = w + np.sqrt(gap) * gaussian_increments(states, d)
            out[lo_i:hi_i, qi, :] = _fold_into_interval(w, box.lo, box.hi)
            prev = t
    return out


def exact_box_path(box, x0, query_times, params: PathParams, path_index: int = 0):
    """Single exact reflected path in a box, recorded at the query times."""
    out = sample_exact_box(
        box, x0, query_times, params, n_paths=1, path_offset=path_index
    )
    return out[0]
