"""Reflecting Brownian motion laboratory for convex domains.

Simulates normally reflected Brownian motion by the projected Euler scheme,
estimates the Neumann heat semigroup, its kernel and gradients from paths,
and runs numerical experiments for the gradient and decay inequalities the
scheme preserves (pathwise coupling contraction, variance and commutation
bounds, power-law kernel decay, Green-operator and Riesz-transform probes).
"""

__version__ = "0.1.0"

from .geometry import (
    Ball,
    Box,
    ConvexDomain,
    GeometryError,
    Polytope,
    ProjectionConvergenceError,
    Tolerances,
    contains,
    inward_normal,
    monotonicity_check,
    project,
    sample_boundary,
    sample_interior,
)
from .rbm import (
    CoupledTrajectory,
    PathParams,
    RbmState,
    Trajectory,
    coupled_expansion_scan,
    derive_seed,
    exact_box_path,
    sample_exact_box,
    sample_paths,
    simulate,
    simulate_coupled,
    step,
)
from .semigroup import (
    GradientEstimate,
    GridSpec,
    KernelEstimate,
    L2Point,
    McEstimate,
    TestFunction,
    builtin_function,
    default_fd_step,
    estimate_gradient,
    estimate_gradient0,
    estimate_kernel,
    estimate_semigroup,
    estimate_semigroup0,
    kernel_gradient_field,
    kernel_gradient_sup,
    l2_norm_curve,
    l2_norm_exact,
    lq_norm_exact,
    make_grid,
    quadrature_grid,
    smoothed_density,
)
from .verify import (
    CheckPoint,
    InequalityReport,
    PowerLawFit,
    TailFit,
    analytic_lambda1,
    check_contraction,
    check_gaussian_tail,
    check_gradient_commutation,
    check_local_time_moment,
    check_spectral_decay,
    check_variance_bound,
    fit_gradient_exponent,
    fit_lambda1,
    fit_ondiagonal_exponent,
)
from .green import (
    GreenEstimate,
    GreenParams,
    RieszEstimate,
    check_green_gradient_bound,
    default_green_params,
    green_apply,
    green_gradient,
    green_kernel_gradient_probe,
    riesz_apply,
)

__all__ = [name for name in dir() if not name.startswith("_")]
