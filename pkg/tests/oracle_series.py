"""Closed-form references used by the tests.

Everything here is independent of the package under test: Neumann
eigenfunction expansions on [0,1] (and products for the square), the explicit
Green solution of u'' = cos(pi x) with Neumann data and zero mean, the
Gamma-integral value of the Riesz transform on eigenfunctions, and the disk's
first nonzero Neumann eigenvalue from the Bessel derivative zero.

Series are truncated at N_TERMS; `_tail_bound` asserts the dropped tail is
below 1e-10 for every (t, query) the tests use, so oracle truncation error
never enters a tolerance budget.
"""

import numpy as np
from scipy.special import jnp_zeros

N_TERMS = 50


def _tail_bound(t: float) -> float:
    # |2 sum_{n>N} e^{-n^2 pi^2 t} (n pi)| bounds kernel and gradient tails
    n = N_TERMS + 1
    tail = 2 * np.exp(-(n**2) * np.pi**2 * t) * n * np.pi / (1 - np.exp(-np.pi**2 * t))
    assert tail < 1e-10, f"series truncation too coarse at t={t}"
    return tail


def semigroup_cos(n: int, x, t: float):
    """P_t cos(n pi x) on [0,1] (full-Laplacian semigroup)."""
    return np.exp(-(n**2) * np.pi**2 * t) * np.cos(n * np.pi * np.asarray(x))


def kernel_1d(x, y, t: float):
    """Neumann heat kernel p_t(x, y) on [0,1]."""
    _tail_bound(t)
    x = np.asarray(x, dtype=np.float64)[..., None]
    ns = np.arange(1, N_TERMS + 1)
    terms = np.exp(-(ns**2) * np.pi**2 * t) * np.cos(ns * np.pi * x) * np.cos(ns * np.pi * y)
    return 1.0 + 2.0 * terms.sum(axis=-1)


def kernel_1d_dx(x, y, t: float):
    """d/dx of the kernel above."""
    _tail_bound(t)
    x = np.asarray(x, dtype=np.float64)[..., None]
    ns = np.arange(1, N_TERMS + 1)
    terms = (
        np.exp(-(ns**2) * np.pi**2 * t)
        * ns * np.pi
        * np.sin(ns * np.pi * x)
        * np.cos(ns * np.pi * y)
    )
    return -2.0 * terms.sum(axis=-1)


def kernel_square(x, y, t: float):
    """Product kernel on the unit square; x, y are 2-vectors."""
    return kernel_1d(x[0], y[0], t) * kernel_1d(x[1], y[1], t)


def kernel_gradient_sup_1d(t: float, sources, n_grid: int = 2001) -> float:
    """max over given sources y and a fine x grid of |d/dx p_t(x, y)|."""
    xs = np.linspace(0.0, 1.0, n_grid)
    return float(
        max(np.max(np.abs(kernel_1d_dx(xs, float(np.atleast_1d(y)[0]), t))) for y in sources)
    )


def green_u(x):
    """u with u'' = cos(pi x), u'(0) = u'(1) = 0, integral u = 0."""
    return -np.cos(np.pi * np.asarray(x)) / np.pi**2


def green_du(x):
    return np.sin(np.pi * np.asarray(x)) / np.pi


MAZYA_RATIO = np.sqrt(2.0) / np.pi  # (1/pi) / ||cos(pi x)||_2 on [0,1]


def riesz_cos(n: int, x):
    """T cos(n pi x) = -2 sin(n pi x) from int_0^inf e^{-ls} s^{-1/2} ds = sqrt(pi/l)."""
    return -2.0 * np.sin(n * np.pi * np.asarray(x))


def disk_lambda1(radius: float = 1.0) -> float:
    """First nonzero Neumann eigenvalue of the full Laplacian on a disk."""
    return float(jnp_zeros(1, 1)[0] ** 2) / radius**2
