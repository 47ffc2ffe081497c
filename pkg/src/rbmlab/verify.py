"""Numerical experiments for the semigroup inequalities.

Each check turns one inequality into either an exact pathwise test (the
coupling contraction, tolerance 1e-12, no statistics) or a Monte Carlo
comparison under the 2-sigma rule:

    pass  <=>  lhs <= rhs + 2*(lhs_stderr + rhs_stderr) + tolerance

with tolerance 0 for statistical checks.  Rate statements (on-diagonal decay,
gradient decay, Gaussian tails) become log-log regressions; only exponents
and shapes are checked, since the constants in the bounds are existential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, ConvexDomain, sample_interior
from . import rbm, semigroup as sg


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    log_constant: float
    r_squared: float
    t_range: tuple
    n_points: int

    def __post_init__(self):
        if self.n_points < 4:
            raise ValueError("a power-law fit needs at least 4 points")


@dataclass(frozen=True)
class CheckPoint:
    inputs: dict
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    passed: bool


@dataclass(frozen=True)
class InequalityReport:
    test_name: str
    test_points: list
    violation_count: int
    worst_margin: float
    tolerance: float = 0.0

    @property
    def all_passed(self) -> bool:
        return self.violation_count == 0


def _make_point(inputs, lhs, rhs, lhs_se=0.0, rhs_se=0.0, tol=0.0) -> CheckPoint:
    margin = lhs - rhs - 2.0 * (lhs_se + rhs_se) - tol
    return CheckPoint(
        inputs=inputs,
        lhs=float(lhs),
        rhs=float(rhs),
        lhs_stderr=float(lhs_se),
        rhs_stderr=float(rhs_se),
        passed=bool(margin <= 0.0),
    )


def _make_report(name, points, tolerance=0.0, extra_violations=0) -> InequalityReport:
    margins = [
        p.lhs - p.rhs - 2.0 * (p.lhs_stderr + p.rhs_stderr) - tolerance for p in points
    ]
    return InequalityReport(
        test_name=name,
        test_points=list(points),
        violation_count=sum(not p.passed for p in points) + extra_violations,
        worst_margin=float(max(margins)) if margins else float("-inf"),
        tolerance=tolerance,
    )


def _fit_loglog(t_vals, y_vals) -> tuple:
    lt = np.log(np.asarray(t_vals, dtype=np.float64))
    ly = np.log(np.asarray(y_vals, dtype=np.float64))
    slope, intercept = np.polyfit(lt, ly, 1)
    resid = ly - (slope * lt + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def analytic_lambda1(box: Box) -> float:
    """First nonzero Neumann eigenvalue of the full Laplacian on a box:
    pi^2 over the squared longest edge."""
    L = float(np.max(box.hi - box.lo))
    return np.pi**2 / L**2


# ---------------------------------------------------------------------------
# pathwise contraction


def check_contraction(
    domain: ConvexDomain, n_pairs: int, params: rbm.PathParams
) -> InequalityReport:
    """Exact per-step nonexpansion of coupled separations; tolerance 1e-12."""
    rng = np.random.default_rng(rbm.derive_seed(params.master_seed, 17))
    starts = sample_interior(domain, 2 * n_pairs, rng).reshape(n_pairs, 2, -1)
    scan = rbm.coupled_expansion_scan(domain, starts, params.n_steps(), params)
    points = [
        _make_point(
            {"pair": i, "initial_separation": float(scan["initial_separation"][i])},
            lhs=scan["max_expansion"][i],
            rhs=0.0,
            tol=1e-12,
        )
        for i in range(n_pairs)
    ]
    # violation_count counts (pair, step) events, which is finer than the
    # per-pair flags; both are zero together
    return _make_report(
        "contraction",
        points,
        tolerance=1e-12,
        extra_violations=scan["violations"] - sum(not p.passed for p in points),
    )


# ---------------------------------------------------------------------------
# gradient commutation and variance bounds


def _norm_and_stderr(vec, se) -> tuple:
    nrm = float(np.linalg.norm(vec))
    if nrm == 0.0:
        return 0.0, float(np.linalg.norm(se))
    return nrm, float(np.sqrt(np.sum((vec / nrm) ** 2 * se**2)))


def check_gradient_commutation(
    domain: ConvexDomain, f_list, x_list, t_list, params: rbm.PathParams
) -> InequalityReport:
    """|grad P0_t f| <= P0_t |grad f| at each sampled triple (2-sigma rule)."""
    points = []
    for i, (f, x, t) in enumerate(zip(f_list, x_list, t_list)):
        seed = rbm.derive_seed(params.master_seed, 23, i)
        fd = sg.default_fd_step(domain)
        ge = sg.estimate_gradient0(domain, f, x, t, fd, params, seed=seed)
        lhs, lhs_se = _norm_and_stderr(ge.vector, ge.stderr)
        pos = rbm.sample_paths(
            domain, np.asarray(x, dtype=np.float64)[None, :], [t], params, seed=seed
        )
        gnorm = np.linalg.norm(f.grad(pos[:, 0, 0, :]), axis=-1)
        rhs = sg._mc(gnorm)
        points.append(
            _make_point(
                {"f": f.name, "x": tuple(np.atleast_1d(x)), "t": t},
                lhs,
                rhs.mean,
                lhs_se,
                rhs.stderr,
            )
        )
    return _make_report("gradient_commutation", points)


def check_variance_bound(
    domain: ConvexDomain, f_list, x_list, t_list, params: rbm.PathParams
) -> InequalityReport:
    """t |grad P0_t f|^2 <= P0_t f^2 - (P0_t f)^2 at each triple."""
    points = []
    for i, (f, x, t) in enumerate(zip(f_list, x_list, t_list)):
        seed = rbm.derive_seed(params.master_seed, 29, i)
        fd = sg.default_fd_step(domain)
        ge = sg.estimate_gradient0(domain, f, x, t, fd, params, seed=seed)
        gn, gn_se = _norm_and_stderr(ge.vector, ge.stderr)
        lhs = t * gn**2
        lhs_se = t * 2.0 * gn * gn_se
        pos = rbm.sample_paths(
            domain, np.asarray(x, dtype=np.float64)[None, :], [t], params, seed=seed
        )
        fv = f(pos[:, 0, 0, :])
        m = fv.shape[0]
        mean = fv.mean()
        var = fv.var(ddof=1)
        # stderr of the sample variance via the fourth central moment
        m4 = np.mean((fv - mean) ** 4)
        var_se = np.sqrt(max(m4 - var**2, 0.0) / m)
        points.append(
            _make_point(
                {"f": f.name, "x": tuple(np.atleast_1d(x)), "t": t},
                lhs,
                var,
                lhs_se,
                var_se,
            )
        )
    return _make_report("variance_bound", points)


# ---------------------------------------------------------------------------
# power-law fits


def _probe_points(domain: ConvexDomain):
    lo, hi = domain.bounding_box()
    center = 0.5 * (lo + hi)
    span = hi - lo
    cands = [center, center - 0.15 * span, center + 0.21 * span]
    return [c for c in cands if domain.contains(c)]


def _fit_window_check(domain, t_list):
    t = np.asarray(t_list, dtype=np.float64)
    if t.size < 5:
        raise ValueError("need at least 5 fit points")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_list must be increasing")
    if t[-1] > 0.1 * domain.diameter() ** 2:
        raise ValueError("fit window reaches past the short-time regime")
    return t


def _kernel_cells(domain: ConvexDomain, t: float, scale: float = 0.35):
    lo, hi = domain.bounding_box()
    w = scale * np.sqrt(2.0 * t)
    return tuple(int(np.ceil((hi[k] - lo[k]) / w)) for k in range(domain.dim))


def fit_ondiagonal_exponent(
    domain: ConvexDomain, t_list, params: rbm.PathParams, *, workers: int = 1
) -> PowerLawFit:
    """Regress log max-over-probes p_t(x,x) on log t; slope -> -d/2.

    The histogram grid is re-centered on each probe and its cell width scales
    with sqrt(t), so the relative binning bias is the same at every t and
    drops out of the slope.
    """
    t = _fit_window_check(domain, t_list)
    probes = _probe_points(domain)
    vals = []
    for i, ti in enumerate(t):
        best = 0.0
        for j, x in enumerate(probes):
            grid = sg.make_grid(domain, _kernel_cells(domain, ti), center_on=x)
            ke = sg.estimate_kernel(
                domain,
                x,
                ti,
                grid,
                params,
                workers=workers,
                seed=rbm.derive_seed(params.master_seed, 31, i, j),
            )
            best = max(best, float(ke.density[ke.grid.locate(x)]))
        vals.append(best)
    slope, intercept, r2 = _fit_loglog(t, vals)
    return PowerLawFit(
        exponent=slope,
        log_constant=intercept,
        r_squared=r2,
        t_range=(float(t[0]), float(t[-1])),
        n_points=len(t),
    )


def fit_gradient_exponent(
    domain: ConvexDomain, t_list, params: rbm.PathParams, *, workers: int = 1
) -> PowerLawFit:
    """Regress log kernel_gradient_sup on log t; slope -> -(d+1)/2."""
    t = _fit_window_check(domain, t_list)
    probes = _probe_points(domain)
    vals = []
    for i, ti in enumerate(t):
        sup = sg.kernel_gradient_sup(
            domain,
            ti,
            probes,
            _kernel_cells(domain, ti),
            rbm.PathParams(
                step_h=params.step_h,
                n_paths=params.n_paths,
                master_seed=rbm.derive_seed(params.master_seed, 37, i),
            ),
            workers=workers,
        )
        vals.append(sup)
    slope, intercept, r2 = _fit_loglog(t, vals)
    return PowerLawFit(
        exponent=slope,
        log_constant=intercept,
        r_squared=r2,
        t_range=(float(t[0]), float(t[-1])),
        n_points=len(t),
    )


# ---------------------------------------------------------------------------
# Gaussian tail of the kernel gradient


@dataclass(frozen=True)
class TailFit:
    fitted_c: float
    fitted_log_C: float
    residuals: list
    window: tuple = (1.0, 10.0)
    q_values: list = field(default_factory=list)  # rho^2/t per residual
    noise: list = field(default_factory=list)
    n_dropped: int = 0  # in-window pairs with no resolvable gradient
    passed: bool = False


def check_gaussian_tail(
    domain: ConvexDomain,
    t: float,
    pair_list,
    params: rbm.PathParams,
    *,
    window=(1.0, 10.0),
    cell_scale: float = 0.2,
    workers: int = 1,
) -> TailFit:
    """Fit log|grad p_t(x,y)| + (d+1)/2 log t against rho^2/t in the window.

    The fitted slope is -1/c; pass means every residual sits below the fitted
    line plus twice its count-based noise.  Pairs outside the window are
    dropped; pairs whose gradient estimate is zero (beyond Monte Carlo
    resolution) are counted in n_dropped and excluded from the fit.

    cell_scale sets the histogram cell width as a multiple of sqrt(2t);
    the finite-difference attenuation of the log-gradient varies with
    rho^2/t at second order in this scale, so it is kept finer here than in
    the exponent fits, where only a uniform power of t matters.
    """
    d = domain.dim
    pairs = [(np.asarray(x, float), np.asarray(y, float)) for x, y in pair_list]
    by_source: dict = {}
    for x, y in pairs:
        by_source.setdefault(tuple(y), []).append(x)
    qs, zs, noises = [], [], []
    n_dropped = 0
    for si, (ysrc, xs) in enumerate(sorted(by_source.items())):
        y = np.asarray(ysrc)
        grid = sg.make_grid(domain, _kernel_cells(domain, t, cell_scale), center_on=y)
        ke = sg.estimate_kernel(
            domain,
            y,
            t,
            grid,
            params,
            workers=workers,
            seed=rbm.derive_seed(params.master_seed, 41, si),
        )
        grad, valid = sg.kernel_gradient_field(domain, ke)
        se_grad = _gradient_noise(ke)
        for x in xs:
            rho = float(np.linalg.norm(x - y))
            q = rho**2 / t
            if not window[0] <= q <= window[1]:
                continue
            idx = ke.grid.locate(x)
            mag = float(np.linalg.norm(grad[idx])) if valid[idx] else 0.0
            if mag <= 0.0:
                n_dropped += 1
                continue
            qs.append(q)
            zs.append(np.log(mag) + 0.5 * (d + 1) * np.log(t))
            noises.append(float(np.linalg.norm(se_grad[idx])) / mag)
    if len(qs) < 4:
        raise ValueError("too few informative pairs inside the fit window")
    slope, intercept = np.polyfit(qs, zs, 1)
    if slope >= 0:
        raise ValueError("tail fit slope is nonnegative; widen the window or add paths")
    resid = [z - (slope * q + intercept) for q, z in zip(qs, zs)]
    passed = all(r <= 2.0 * n for r, n in zip(resid, noises))
    return TailFit(
        fitted_c=float(-1.0 / slope),
        fitted_log_C=float(intercept),
        residuals=resid,
        window=tuple(window),
        q_values=qs,
        noise=noises,
        n_dropped=n_dropped,
        passed=bool(passed),
    )


def _sq_smooth_axis(v: np.ndarray, axis: int) -> np.ndarray:
    # variance version of the 3-cell smoothing window: squared weights
    s = np.swapaxes(v, 0, axis)
    out = np.empty_like(s)
    if s.shape[0] >= 3:
        out[1:-1] = (s[:-2] + s[1:-1] + s[2:]) / 9.0
        out[0] = (s[0] + s[1]) / 4.0
        out[-1] = (s[-2] + s[-1]) / 4.0
    elif s.shape[0] == 2:
        out[:] = (s[0] + s[1]) / 4.0
    else:
        out[:] = s
    return np.swapaxes(out, 0, axis)


def _diff_var_axis(v: np.ndarray, axis: int, width: float) -> np.ndarray:
    # var of (smooth-then-central-difference) along one axis.  The shared
    # center cell of the two 3-cell windows cancels in the difference, so the
    # effective weights are 1/3 on offsets {-2,-1,+1,+2} (clamped at edges)
    s = np.swapaxes(v, 0, axis)
    out = np.zeros_like(s)
    n = s.shape[0]
    if n >= 3:
        idx = np.arange(1, n - 1)
        om2 = np.clip(idx - 2, 0, n - 1)
        op2 = np.clip(idx + 2, 0, n - 1)
        out[1:-1] = (s[om2] + s[idx - 1] + s[idx + 1] + s[op2]) / 9.0
    out /= (2.0 * width) ** 2
    return np.swapaxes(out, 0, axis)


def _gradient_noise(ke: sg.KernelEstimate) -> np.ndarray:
    """Count-based stderr of each smoothed central-difference component.

    Per-cell counts are modeled as Poisson, var(density) = density/(M*vol);
    smoothing and differencing propagate with squared weights.  Cross-axis
    window overlap in d >= 2 is ignored (exact in d = 1).
    """
    var0 = np.zeros_like(ke.density)
    ok = ke.cell_volume > 0
    var0[ok] = ke.density[ok] / (ke.n_paths * ke.cell_volume[ok])
    d = ke.density.ndim
    se = np.zeros(ke.density.shape + (d,))
    for k in range(d):
        v = var0
        for j in range(d):
            if j != k:
                v = _sq_smooth_axis(v, j)
        se[..., k] = np.sqrt(_diff_var_axis(v, k, ke.grid.widths[k]))
    return se


# ---------------------------------------------------------------------------
# local-time exponential moment


def check_local_time_moment(
    domain: ConvexDomain, sigma_list, s_list, params: rbm.PathParams, *, workers: int = 1
):
    """Estimate E exp(sigma * l_s) on a (sigma, s) grid from one path ensemble.

    Returns (InequalityReport, c_fit) where c_fit is the smallest c making
    every estimate <= exp(c (s + sqrt(s))).  The report carries the bound
    points plus monotonicity diagnostics in s and in sigma; a point whose
    relative stderr exceeds 20% is marked unreliable in its inputs.
    """
    sigmas = [float(s) for s in sigma_list]
    ss = [float(s) for s in s_list]
    if any(sig < 0 for sig in sigmas):
        raise ValueError("sigma must be nonnegative")
    if any(not 0.0 < s <= 1.0 for s in ss) or ss != sorted(ss):
        raise ValueError("s_list must be increasing with 0 < s <= 1")
    lo, hi = domain.bounding_box()
    start = domain.project(0.5 * (lo + hi))
    _, loc = rbm.sample_paths(
        domain,
        start[None, :],
        ss,
        params,
        record_local_time=True,
        workers=workers,
        seed=rbm.derive_seed(params.master_seed, 43),
    )
    est = {}
    for sig in sigmas:
        for j, s in enumerate(ss):
            est[(sig, s)] = sg._mc(np.exp(sig * loc[:, 0, j]))
    c_fit = max(
        np.log(max(e.mean, 1.0)) / (s + np.sqrt(s)) for (sig, s), e in est.items()
    )
    points = []
    for (sig, s), e in sorted(est.items()):
        reliable = e.mean > 0 and e.stderr / e.mean <= 0.2
        points.append(
            _make_point(
                {"sigma": sig, "s": s, "kind": "bound", "reliable": reliable},
                lhs=e.mean,
                rhs=np.exp(c_fit * (s + np.sqrt(s))),
                lhs_se=e.stderr,
            )
        )
    # the grid shares one ensemble, so both monotonicities hold pathwise;
    # the diagnostics stay in the report to catch estimator regressions
    for sig in sigmas:
        for s0, s1 in zip(ss, ss[1:]):
            a, b = est[(sig, s0)], est[(sig, s1)]
            points.append(
                _make_point(
                    {"sigma": sig, "s": (s0, s1), "kind": "monotone_s"},
                    lhs=a.mean, rhs=b.mean, lhs_se=a.stderr, rhs_se=b.stderr,
                )
            )
    for g0, g1 in zip(sigmas, sigmas[1:]):
        for s in ss:
            a, b = est[(g0, s)], est[(g1, s)]
            points.append(
                _make_point(
                    {"sigma": (g0, g1), "s": s, "kind": "monotone_sigma"},
                    lhs=a.mean, rhs=b.mean, lhs_se=a.stderr, rhs_se=b.stderr,
                )
            )
    return _make_report("local_time_moment", points), float(c_fit)


# ---------------------------------------------------------------------------
# spectral decay


def fit_lambda1(
    domain: ConvexDomain,
    f: sg.TestFunction,
    params: rbm.PathParams,
    *,
    window=(0.06, 0.15),
    n_points: int = 5,
    quadrature_cells: int = 24,
    workers: int = 1,
) -> float:
    """Fit the decay rate of log ||P_t f||_2 over t in window * diam^2.

    The window sits well before equilibrium: beyond ~0.2 diam^2 the norm of a
    mean-zero f is already down by e^{-6} or more and Monte Carlo noise
    swamps the slope.  f should be mean-zero with a dominant first mode.
    """
    if not f.mean_zero:
        raise ValueError("lambda1 fit needs a mean-zero test function")
    d2 = domain.diameter() ** 2
    t_list = np.geomspace(window[0] * d2, window[1] * d2, n_points)
    curve = sg.l2_norm_curve(
        domain, f, t_list, quadrature_cells, params, workers=workers,
        seed=rbm.derive_seed(params.master_seed, 47),
    )
    vals = np.array([max(p.value, 1e-300) for p in curve])
    slope = np.polyfit(t_list, np.log(vals), 1)[0]
    return float(-slope)


def check_spectral_decay(
    domain: ConvexDomain,
    f: sg.TestFunction,
    t_list,
    params: rbm.PathParams,
    *,
    lambda1: float | None = None,
    quadrature_cells: int = 24,
    workers: int = 1,
) -> InequalityReport:
    """||P_t f||_2 <= exp(-lambda1 t) ||f||_2 for mean-zero f.

    lambda1 comes from the box formula when omitted; non-box domains must
    pass a value (use fit_lambda1 or a known eigenvalue).
    """
    if not f.mean_zero:
        raise ValueError("spectral decay applies to mean-zero f only")
    if lambda1 is None:
        if isinstance(domain, Box):
            lambda1 = analytic_lambda1(domain)
        else:
            raise ValueError("supply lambda1 for non-box domains")
    norm_f = sg.l2_norm_exact(domain, f, quadrature_cells)
    curve = sg.l2_norm_curve(
        domain, f, t_list, quadrature_cells, params, workers=workers,
        seed=rbm.derive_seed(params.master_seed, 53),
    )
    points = [
        _make_point(
            {"t": p.t, "lambda1": lambda1},
            lhs=p.value,
            rhs=np.exp(-lambda1 * p.t) * norm_f,
            lhs_se=p.stderr,
        )
        for p in curve
    ]
    return _make_report("spectral_decay", points)
