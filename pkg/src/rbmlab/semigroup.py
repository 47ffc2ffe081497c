"""Monte Carlo estimators for the Neumann heat semigroup and its kernel.

Time convention: the semigroup P_t generated by the full Laplacian is
represented through the simulated process (generator half the Laplacian) as

    P_t f(x) = E f(X_{2t}),        P0_s f(x) = E f(X_s),

so `estimate_semigroup(t)` delegates to `estimate_semigroup0(2t)` bit-exactly
for equal seeds.  Kernel estimates are plain endpoint histograms over a
uniform grid on a bounding box, normalized by per-cell intersection volumes;
gradients use central finite differences with both evaluations driven by the
same increment stream (the coupling contraction keeps the difference variance
of order fd_step squared).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import Ball, Box, ConvexDomain, GeometryError
from . import rbm

# ---------------------------------------------------------------------------
# test functions


@dataclass(frozen=True)
class TestFunction:
    """Bounded test function with an analytic gradient.

    evaluator/gradient accept arrays of shape (..., d) and return values of
    shape (...) and (..., d).  mean_zero is only set when the quadrature mean
    over the domain vanishes (below 1e-8).
    """

    __test__ = False  # "test function" in the analysis sense, not a pytest item

    name: str
    evaluator: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    mean_zero: bool
    sup_norm: float

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.evaluator(np.asarray(pts, dtype=np.float64))

    def grad(self, pts: np.ndarray) -> np.ndarray:
        return self.gradient(np.asarray(pts, dtype=np.float64))


def _constant_fn() -> TestFunction:
    return TestFunction(
        name="one",
        evaluator=lambda p: np.ones(p.shape[:-1]),
        gradient=lambda p: np.zeros(p.shape),
        mean_zero=False,
        sup_norm=1.0,
    )


def _coordinate_fn(domain: ConvexDomain, k: int) -> TestFunction:
    lo, hi = domain.bounding_box()

    def ev(p):
        return p[..., k]

    def gr(p):
        g = np.zeros(p.shape)
        g[..., k] = 1.0
        return g

    return TestFunction(
        name=f"coord{k}",
        evaluator=ev,
        gradient=gr,
        mean_zero=False,
        sup_norm=float(max(abs(lo[k]), abs(hi[k]))),
    )


def _cosine_fn(domain: ConvexDomain, n: int, k: int) -> TestFunction:
    # cos(n pi (x_k - lo_k) / L_k); a Neumann eigenfunction when the domain
    # is a box, merely a smooth bounded function otherwise
    lo, hi = domain.bounding_box()
    a, L = float(lo[k]), float(hi[k] - lo[k])
    w = n * np.pi / L

    def ev(p):
        return np.cos(w * (p[..., k] - a))

    def gr(p):
        g = np.zeros(p.shape)
        g[..., k] = -w * np.sin(w * (p[..., k] - a))
        return g

    return TestFunction(
        name=f"cos{n}_x{k}",
        evaluator=ev,
        gradient=gr,
        mean_zero=isinstance(domain, Box) and n >= 1,
        sup_norm=1.0,
    )


def _bump_fn(domain: ConvexDomain, subtract_mean: bool) -> TestFunction:
    # C^1 compactly supported radial bump (1 - r^2/R^2)^3 around an interior
    # anchor; "bump0" subtracts the quadrature mean so green/riesz can use it
    lo, hi = domain.bounding_box()
    if isinstance(domain, Ball):
        center = domain.center.copy()
        reach = domain.radius
    elif isinstance(domain, Box):
        center = 0.5 * (lo + hi)
        reach = 0.5 * float(np.min(hi - lo))
    else:
        center = domain.interior_point()
        reach = float(domain.boundary_distance(center))
    R = 0.8 * reach

    def raw(p):
        r2 = np.sum((p - center) ** 2, axis=-1) / R**2
        return np.where(r2 < 1.0, (1.0 - np.minimum(r2, 1.0)) ** 3, 0.0)

    def gr(p):
        r2 = np.sum((p - center) ** 2, axis=-1) / R**2
        coef = np.where(r2 < 1.0, -6.0 / R**2 * (1.0 - np.minimum(r2, 1.0)) ** 2, 0.0)
        return coef[..., None] * (p - center)

    shift = 0.0
    if subtract_mean:
        pts, wts = quadrature_grid(domain, 24 if domain.dim == 1 else 16)
        shift = float(np.sum(raw(pts) * wts) / np.sum(wts))

    def ev(p):
        return raw(p) - shift

    return TestFunction(
        name="bump0" if subtract_mean else "bump",
        evaluator=ev,
        gradient=gr,
        mean_zero=subtract_mean,
        sup_norm=1.0 + abs(shift) if subtract_mean else 1.0,
    )


def builtin_function(domain: ConvexDomain, name: str) -> TestFunction:
    """Resolve a built-in test function by name.

    Names: "one", "coord<k>", "cos<n>_x<k>", "bump", "bump0".
    """
    if name == "one":
        return _constant_fn()
    if name == "bump":
        return _bump_fn(domain, subtract_mean=False)
    if name == "bump0":
        return _bump_fn(domain, subtract_mean=True)
    if name.startswith("coord"):
        k = int(name[len("coord") :])
        if not 0 <= k < domain.dim:
            raise ValueError(f"coordinate index out of range in {name!r}")
        return _coordinate_fn(domain, k)
    if name.startswith("cos"):
        head, _, tail = name.partition("_x")
        if tail:
            n, k = int(head[len("cos") :]), int(tail)
            if n < 1 or not 0 <= k < domain.dim:
                raise ValueError(f"bad mode numbers in {name!r}")
            return _cosine_fn(domain, n, k)
    raise ValueError(f"unknown test function {name!r}")


# ---------------------------------------------------------------------------
# grids, cell volumes, quadrature


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid: cell (i1..id) spans lo + i*width .. lo + (i+1)*width."""

    lo: np.ndarray
    widths: np.ndarray
    shape: tuple

    def edges(self):
        return [
            self.lo[k] + self.widths[k] * np.arange(self.shape[k] + 1)
            for k in range(len(self.shape))
        ]

    def centers(self):
        return [
            self.lo[k] + self.widths[k] * (np.arange(self.shape[k]) + 0.5)
            for k in range(len(self.shape))
        ]

    def cell_volume_full(self) -> float:
        return float(np.prod(self.widths))

    def locate(self, x) -> tuple:
        """Index of the cell containing x (clipped to the grid)."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.floor((x - self.lo) / self.widths).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return tuple(int(i) for i in idx)


def make_grid(domain: ConvexDomain, cells, center_on=None) -> GridSpec:
    """Grid of `cells` per axis over the bounding box.

    With center_on set, the grid is shifted so that point sits at a cell
    center (one extra cell is added per axis to keep the domain covered).
    """
    lo, hi = domain.bounding_box()
    d = domain.dim
    if np.isscalar(cells):
        cells = (int(cells),) * d
    cells = tuple(int(c) for c in cells)
    widths = (hi - lo) / np.asarray(cells, dtype=np.float64)
    if center_on is None:
        return GridSpec(lo=lo, widths=widths, shape=cells)
    c = np.asarray(center_on, dtype=np.float64)
    # shift so that c - lo' is a half-integer multiple of the width
    k = np.floor((c - lo) / widths - 0.5)
    lo_shift = c - (k + 0.5) * widths
    delta = lo_shift - lo
    extra = (delta > 1e-12).astype(int)  # cover the strip below the shifted lo
    new_lo = lo_shift - extra * widths
    shape = tuple(int(cells[k_] + 1) for k_ in range(d))
    return GridSpec(lo=new_lo, widths=widths, shape=shape)


_VOLUME_CACHE: dict = {}
_N_SUB = 10_000  # quasi-random points per partial cell


def cell_volumes(domain: ConvexDomain, grid: GridSpec) -> np.ndarray:
    """Intersection volume of each grid cell with the domain.

    Exact for boxes (axis overlap product); quasi-random subsampling with
    10^4 Halton points per cell otherwise.  Results are cached per
    (domain, grid) since the subsampling pass is the expensive part.
    """
    key = (
        domain.fingerprint(),
        grid.lo.tobytes(),
        grid.widths.tobytes(),
        grid.shape,
    )
    hit = _VOLUME_CACHE.get(key)
    if hit is not None:
        return hit
    d = domain.dim
    if isinstance(domain, Box):
        overlaps = []
        for k in range(d):
            e = grid.lo[k] + grid.widths[k] * np.arange(grid.shape[k] + 1)
            ov = np.minimum(e[1:], domain.hi[k]) - np.maximum(e[:-1], domain.lo[k])
            overlaps.append(np.maximum(ov, 0.0))
        vol = overlaps[0]
        for k in range(1, d):
            vol = np.multiply.outer(vol, overlaps[k])
        vol = vol.reshape(grid.shape)
    else:
        from scipy.stats import qmc

        unit = qmc.Halton(d=d, scramble=False).random(_N_SUB)
        centers = np.meshgrid(*grid.centers(), indexing="ij")
        cell_lo = np.stack([c.ravel() for c in centers], axis=-1) - grid.widths / 2
        full = grid.cell_volume_full()
        vol_flat = np.empty(cell_lo.shape[0])
        # blockwise so the (cells x subsamples) product stays in memory
        blk = max(1, int(2e6) // _N_SUB)
        for i in range(0, cell_lo.shape[0], blk):
            j = min(i + blk, cell_lo.shape[0])
            pts = cell_lo[i:j, None, :] + unit[None, :, :] * grid.widths
            inside = domain.contains_many(pts.reshape(-1, d)).reshape(j - i, _N_SUB)
            vol_flat[i:j] = full * inside.mean(axis=1)
        vol = vol_flat.reshape(grid.shape)
    _VOLUME_CACHE[key] = vol
    return vol


def quadrature_grid(domain: ConvexDomain, cells):
    """Midpoint quadrature: cell centers and intersection-volume weights.

    Cells with zero intersection volume are dropped.  A partial cell on a
    curved boundary can have its center outside the domain; such centers are
    projected back in, so the returned points are always valid simulation
    starts.
    """
    grid = make_grid(domain, cells)
    vol = cell_volumes(domain, grid)
    centers = np.meshgrid(*grid.centers(), indexing="ij")
    pts = np.stack([c.ravel() for c in centers], axis=-1)
    wts = vol.ravel()
    keep = wts > 0
    pts = np.stack([domain.project(p) for p in pts[keep]])
    return pts, wts[keep]


# ---------------------------------------------------------------------------
# estimate records


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int


@dataclass(frozen=True)
class KernelEstimate:
    t: float
    source: np.ndarray
    grid: GridSpec
    density: np.ndarray       # per-cell, shape grid.shape
    cell_volume: np.ndarray   # per-cell intersection volume
    n_paths: int


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    stderr: np.ndarray
    fd_step: float
    one_sided: tuple  # per axis: None, "forward", or "backward"


@dataclass(frozen=True)
class L2Point:
    t: float
    value: float
    stderr: float


def _mc(values: np.ndarray) -> McEstimate:
    m = values.shape[0]
    sd = values.std(ddof=1) if m > 1 else 0.0
    return McEstimate(mean=float(values.mean()), stderr=float(sd / np.sqrt(m)), n_samples=m)


# ---------------------------------------------------------------------------
# semigroup estimators


def estimate_semigroup0(
    domain: ConvexDomain,
    f: TestFunction,
    x,
    s: float,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> McEstimate:
    """P0_s f(x) = E f(X_s): sample mean of f over simulated endpoints."""
    if not s >= 0:
        raise ValueError("s must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if s == 0.0:
        return McEstimate(mean=float(f(x[None, :])[0]), stderr=0.0, n_samples=params.n_paths)
    pos = rbm.sample_paths(domain, x[None, :], [s], params, seed=seed, workers=workers)
    return _mc(f(pos[:, 0, 0, :]))


def estimate_semigroup(
    domain: ConvexDomain,
    f: TestFunction,
    x,
    t: float,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> McEstimate:
    """P_t f(x) = E f(X_{2t}); the factor 2 is the generator convention."""
    return estimate_semigroup0(domain, f, x, 2.0 * t, params, workers=workers, seed=seed)


def estimate_kernel(
    domain: ConvexDomain,
    x,
    t: float,
    grid_spec,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> KernelEstimate:
    """Endpoint histogram estimate of the kernel p_t(x, .).

    grid_spec: cell count per axis (int or tuple) or a prebuilt GridSpec.
    density = count / (M * cell_volume); cells the domain does not meet get
    density 0.  The normalization sum(density * cell_volume) = 1 is a
    counting identity.
    """
    x = np.asarray(x, dtype=np.float64)
    grid = grid_spec if isinstance(grid_spec, GridSpec) else make_grid(domain, grid_spec)
    pos = rbm.sample_paths(domain, x[None, :], [2.0 * t], params, seed=seed, workers=workers)
    return _histogram_density(domain, x, t, grid, pos[:, 0, 0, :])


def _histogram_density(domain, x, t, grid, endpoints) -> KernelEstimate:
    m = endpoints.shape[0]
    counts, _ = np.histogramdd(endpoints, bins=grid.edges())
    vol = cell_volumes(domain, grid).copy()
    # a populated cell whose subsampled volume came out zero still needs a
    # positive volume for the counting identity; assign half a subsample
    # quantum (only possible on curved domains, never on boxes)
    sliver = (counts > 0) & (vol <= 0.0)
    if np.any(sliver):
        vol[sliver] = grid.cell_volume_full() / (2.0 * _N_SUB)
    density = np.zeros(grid.shape)
    ok = vol > 0
    density[ok] = counts[ok] / (m * vol[ok])
    return KernelEstimate(
        t=t, source=x, grid=grid, density=density, cell_volume=vol, n_paths=m
    )


def smoothed_density(est: KernelEstimate) -> np.ndarray:
    """One pass of nearest-neighbor cell averaging (3-cell window per axis,
    truncated at the grid edge)."""
    a = est.density
    for axis in range(a.ndim):
        s = np.swapaxes(a, 0, axis)
        out = np.empty_like(s)
        if s.shape[0] >= 3:
            out[1:-1] = (s[:-2] + s[1:-1] + s[2:]) / 3.0
            out[0] = (s[0] + s[1]) / 2.0
            out[-1] = (s[-2] + s[-1]) / 2.0
        elif s.shape[0] == 2:
            out[:] = s.mean(axis=0, keepdims=True)
        else:
            out[:] = s
        a = np.swapaxes(out, 0, axis)
    return a


def kernel_gradient_field(domain: ConvexDomain, est: KernelEstimate):
    """Central differences of the smoothed density.

    Returns (grad, valid) where grad has shape grid.shape + (d,) and valid
    marks cells whose full difference stencil consists of complete cells
    (partial boundary cells would alias the domain edge into the gradient).
    """
    rho = smoothed_density(est)
    d = rho.ndim
    grad = np.zeros(rho.shape + (d,))
    full = est.cell_volume >= est.grid.cell_volume_full() * (1.0 - 1e-9)
    valid = np.ones(rho.shape, dtype=bool)
    for axis in range(d):
        g = np.zeros_like(rho)
        sl_p = [slice(None)] * d
        sl_m = [slice(None)] * d
        sl_c = [slice(None)] * d
        sl_p[axis] = slice(2, None)
        sl_m[axis] = slice(0, -2)
        sl_c[axis] = slice(1, -1)
        g[tuple(sl_c)] = (rho[tuple(sl_p)] - rho[tuple(sl_m)]) / (2.0 * est.grid.widths[axis])
        grad[..., axis] = g
        ax_valid = np.zeros(rho.shape, dtype=bool)
        ax_valid[tuple(sl_c)] = full[tuple(sl_p)] & full[tuple(sl_m)] & full[tuple(sl_c)]
        valid &= ax_valid
    return grad, valid


def _fd_plan(domain: ConvexDomain, x: np.ndarray, fd_step: float):
    """Start points and index plan for a coupled finite difference at x.

    Central stencil per axis when x +- fd_step/2 both lie in the domain;
    otherwise a one-sided stencil through x with the same total width.
    Returns (starts, plan); starts[0] = x, plan entries are
    (idx_plus, idx_minus, denom, flavor) with flavor None/"forward"/"backward".
    """
    d = x.size
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    starts = [x]
    plan = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = fd_step / 2.0
        xp, xm = x + e, x - e
        p_in, m_in = domain.contains(xp), domain.contains(xm)
        if p_in and m_in:
            starts += [xp, xm]
            plan.append((len(starts) - 2, len(starts) - 1, fd_step, None))
        elif m_in:
            xm2 = x - 2.0 * e
            if not domain.contains(xm2):
                raise GeometryError(
                    f"fd_step {fd_step} too wide at {x} along axis {k}"
                )
            starts.append(xm2)
            plan.append((0, len(starts) - 1, fd_step, "backward"))
        elif p_in:
            xp2 = x + 2.0 * e
            if not domain.contains(xp2):
                raise GeometryError(
                    f"fd_step {fd_step} too wide at {x} along axis {k}"
                )
            starts.append(xp2)
            plan.append((len(starts) - 1, 0, fd_step, "forward"))
        else:
            raise GeometryError(f"fd_step {fd_step} too wide at {x} along axis {k}")
    return starts, plan


def estimate_gradient0(
    domain: ConvexDomain,
    f: TestFunction,
    x,
    s: float,
    fd_step: float,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> GradientEstimate:
    """Coupled-difference estimate of grad P0_s f(x).

    Every finite-difference evaluation point is simulated with the same
    per-path increments, so the per-path difference has spread O(fd_step)
    instead of O(1); this is what makes the estimator usable.
    """
    x = np.asarray(x, dtype=np.float64)
    d = domain.dim
    starts, plan = _fd_plan(domain, x, fd_step)
    if s == 0.0:
        g = f.grad(x[None, :])[0]
        return GradientEstimate(
            vector=g, stderr=np.zeros(d), fd_step=fd_step, one_sided=tuple(p[3] for p in plan)
        )
    pos = rbm.sample_paths(
        domain, np.stack(starts), [s], params, seed=seed, workers=workers
    )
    vals = f(pos[:, :, 0, :])  # (M, n_starts)
    vec = np.empty(d)
    se = np.empty(d)
    for k, (ip, im, denom, _) in enumerate(plan):
        diff = (vals[:, ip] - vals[:, im]) / denom
        est = _mc(diff)
        vec[k], se[k] = est.mean, est.stderr
    return GradientEstimate(
        vector=vec, stderr=se, fd_step=fd_step, one_sided=tuple(p[3] for p in plan)
    )


def estimate_gradient(
    domain: ConvexDomain,
    f: TestFunction,
    x,
    t: float,
    fd_step: float,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> GradientEstimate:
    """grad P_t f(x) in semigroup time (process horizon 2t)."""
    return estimate_gradient0(
        domain, f, x, 2.0 * t, fd_step, params, workers=workers, seed=seed
    )


def default_fd_step(domain: ConvexDomain) -> float:
    return 0.02 * domain.diameter()


def kernel_gradient_sup(
    domain: ConvexDomain,
    t: float,
    probe_sources,
    grid_spec,
    params: rbm.PathParams,
    *,
    workers: int = 1,
) -> float:
    """max over probe sources y and cells x of |grad_x p_t(x, y)| (smoothed).

    Each source gets an independently derived sub-seed so the max does not
    ride a single shared noise realization.
    """
    best = 0.0
    for i, y in enumerate(np.atleast_2d(np.asarray(probe_sources, dtype=np.float64))):
        est = estimate_kernel(
            domain,
            y,
            t,
            grid_spec,
            params,
            workers=workers,
            seed=rbm.derive_seed(params.master_seed, 811, i),
        )
        grad, valid = kernel_gradient_field(domain, est)
        if np.any(valid):
            mag = np.linalg.norm(grad[valid], axis=-1)
            best = max(best, float(mag.max()))
    return best


def l2_norm_curve(
    domain: ConvexDomain,
    f: TestFunction,
    t_list,
    quadrature_cells,
    params: rbm.PathParams,
    *,
    workers: int = 1,
    seed: int | None = None,
) -> list:
    """Quadrature estimate of ||P_t f||_2 at each t in t_list.

    All quadrature points ride the same increment stream and all t values are
    read off one simulation pass.  For mean-zero f the synchronous coupling
    makes the late-time noise nearly common across points, and the common
    mode cancels in the norm; the stderr is propagated from the full
    point-covariance for exactly that reason.
    """
    if not f.mean_zero:
        raise ValueError("l2_norm_curve requires a mean-zero test function")
    t_arr = np.asarray(t_list, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(np.diff(t_arr) <= 0):
        raise ValueError("t_list must be nonnegative and strictly increasing")
    pts, wts = quadrature_grid(domain, quadrature_cells)
    pos_times = 2.0 * t_arr[t_arr > 0]
    if pos_times.size:
        pos = rbm.sample_paths(
            domain, pts, pos_times, params, seed=seed, workers=workers
        )  # (M, n_pts, n_t, d)
        vals = f(pos)  # (M, n_pts, n_t)
    out = []
    j = 0
    for t in t_arr:
        if t == 0.0:
            g = f(pts)
            q = float(np.sum(wts * g**2))
            out.append(L2Point(t=0.0, value=float(np.sqrt(q)), stderr=0.0))
            continue
        fv = vals[:, :, j]
        j += 1
        m = fv.shape[0]
        g = fv.mean(axis=0)
        q = float(np.sum(wts * g**2))
        # delta method through the square, with the full covariance of the
        # coupled point estimates
        centered = fv - g
        a = wts * g  # sensitivity of q/2 wrt each point mean
        proj = centered @ a  # (M,)
        var_q = 4.0 * proj.var(ddof=1) / m
        value = np.sqrt(max(q, 0.0))
        se = 0.5 * np.sqrt(var_q) / value if value > 0 else np.sqrt(np.sqrt(var_q))
        out.append(L2Point(t=float(t), value=float(value), stderr=float(se)))
    return out


def l2_norm_exact(domain: ConvexDomain, f: TestFunction, quadrature_cells) -> float:
    """||f||_2 by the same quadrature rule (no simulation)."""
    return lq_norm_exact(domain, f, quadrature_cells, 2.0)


def lq_norm_exact(domain: ConvexDomain, f: TestFunction, quadrature_cells, q: float) -> float:
    if not q >= 1:
        raise ValueError("q must be >= 1")
    pts, wts = quadrature_grid(domain, quadrature_cells)
    return float(np.sum(wts * np.abs(f(pts)) ** q) ** (1.0 / q))
