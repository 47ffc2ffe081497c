"""Compact convex domains with metric projection and inward-normal oracles.

Three domain variants are supported: balls, axis-aligned boxes, and bounded
polytopes given as intersections of half-spaces ``a_i . x <= b_i``.  Every
variant provides

* ``contains``          -- closed-set membership up to a tolerance,
* ``project``           -- the (unique) nearest-point map onto the domain,
* ``inward_normal``     -- the inward unit normal at a boundary point,
* ``boundary_distance`` -- distance to the boundary.

The projection map is nonexpansive and idempotent; those two facts are what
the reflecting-walk scheme and the coupling contraction rest on, so they are
worth exact treatment: ball and box projections are closed-form, and the
polytope projection runs Dykstra's alternating projections followed by an
active-set polish that restores machine accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class GeometryError(ValueError):
    pass


class ProjectionConvergenceError(RuntimeError):
    """Dykstra sweep limit hit; the half-space set is ill-conditioned."""


@dataclass(frozen=True)
class Tolerances:
    """Central tolerance record shared by all geometry operations."""

    membership: float = 1e-12       # closed-set membership slack
    boundary: float = 1e-9          # "on the boundary" slack for normals
    active_facet: float = 1e-9      # facet activity slack for corner normals
    dykstra_tol: float = 1e-10      # successive-iterate distance
    dykstra_max_sweeps: int = 10000


TOL = Tolerances()


def _as_points(x):
    """Return (points (n,d) float array, had_batch_shape flag)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], False
    if arr.ndim == 2:
        return arr, True
    raise GeometryError(f"expected a point or an (n, d) array, got shape {arr.shape}")


class ConvexDomain:
    """Base class; concrete variants are Ball, Box, Polytope."""

    dim: int

    # -- membership / projection -------------------------------------------

    def contains_many(self, x, tol: Tolerances = TOL):
        raise NotImplementedError

    def project_many(self, x, tol: Tolerances = TOL):
        raise NotImplementedError

    def boundary_distance_many(self, x):
        raise NotImplementedError

    def contains(self, x, tol: Tolerances = TOL) -> bool:
        pts, _ = _as_points(x)
        self._check_dim(pts)
        return bool(self.contains_many(pts, tol)[0])

    def project(self, x, tol: Tolerances = TOL) -> np.ndarray:
        pts, _ = _as_points(x)
        self._check_dim(pts)
        return self.project_many(pts, tol)[0]

    def boundary_distance(self, x) -> float:
        pts, _ = _as_points(x)
        self._check_dim(pts)
        return float(self.boundary_distance_many(pts)[0])

    def inward_normal(self, y, tol: Tolerances = TOL) -> np.ndarray:
        pts, _ = _as_points(y)
        self._check_dim(pts)
        if self.boundary_distance_many(pts)[0] > tol.boundary:
            raise GeometryError(
                f"point {pts[0]} is not within {tol.boundary} of the boundary"
            )
        return self._normal_at(pts[0], tol)

    def _normal_at(self, y, tol: Tolerances) -> np.ndarray:
        raise NotImplementedError

    # -- descriptive geometry ----------------------------------------------

    def bounding_box(self):
        """(lo, hi) arrays of an axis-aligned box containing the domain."""
        raise NotImplementedError

    def volume(self) -> float:
        raise NotImplementedError

    def diameter(self) -> float:
        """Diameter proxy: the bounding-box diagonal (exact for balls/boxes)."""
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))

    def fingerprint(self) -> tuple:
        """Hashable identity used for caching grid volumes."""
        raise NotImplementedError

    def _check_dim(self, pts):
        if pts.shape[1] != self.dim:
            raise GeometryError(
                f"dimension mismatch: point has d={pts.shape[1]}, domain has d={self.dim}"
            )


@dataclass(frozen=True, eq=False)
class Ball(ConvexDomain):
    center: np.ndarray
    radius: float
    dim: int = field(init=False)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dim", c.shape[0])
        if not self.radius > 0:
            raise GeometryError("ball radius must be positive")

    def contains_many(self, x, tol: Tolerances = TOL):
        r = np.linalg.norm(x - self.center, axis=-1)
        return r <= self.radius + tol.membership

    def project_many(self, x, tol: Tolerances = TOL):
        v = x - self.center
        r = np.linalg.norm(v, axis=-1)
        outside = r > self.radius
        if not np.any(outside):
            return np.array(x, dtype=np.float64, copy=True)
        out = np.array(x, dtype=np.float64, copy=True)
        scale = self.radius / r[outside]
        out[outside] = self.center + v[outside] * scale[:, None]
        return out

    def boundary_distance_many(self, x):
        r = np.linalg.norm(x - self.center, axis=-1)
        return np.abs(self.radius - r)

    def _normal_at(self, y, tol: Tolerances):
        v = self.center - y
        n = np.linalg.norm(v)
        if n == 0.0:
            raise GeometryError("normal undefined at the ball center")
        return v / n

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def volume(self) -> float:
        # unit-ball volume pi^{d/2} / Gamma(d/2 + 1)
        from math import gamma, pi

        d = self.dim
        return pi ** (d / 2.0) / gamma(d / 2.0 + 1.0) * self.radius ** d

    def fingerprint(self):
        return ("ball", self.center.tobytes(), float(self.radius))


@dataclass(frozen=True, eq=False)
class Box(ConvexDomain):
    lo: np.ndarray
    hi: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "dim", lo.shape[0])
        if lo.shape != hi.shape:
            raise GeometryError("box lo/hi dimension mismatch")
        if not np.all(lo < hi):
            raise GeometryError("box requires lo[k] < hi[k] for every coordinate")

    def contains_many(self, x, tol: Tolerances = TOL):
        return np.all(
            (x >= self.lo - tol.membership) & (x <= self.hi + tol.membership), axis=-1
        )

    def project_many(self, x, tol: Tolerances = TOL):
        return np.clip(x, self.lo, self.hi)

    def boundary_distance_many(self, x):
        inside = np.minimum(x - self.lo, self.hi - x)          # per-axis face gap
        d_in = np.min(inside, axis=-1)
        proj = np.clip(x, self.lo, self.hi)
        d_out = np.linalg.norm(x - proj, axis=-1)
        return np.where(d_out > 0.0, d_out, np.abs(d_in))

    def _normal_at(self, y, tol: Tolerances):
        n = np.zeros(self.dim)
        active_lo = np.abs(y - self.lo) <= tol.active_facet
        active_hi = np.abs(y - self.hi) <= tol.active_facet
        n[active_lo] += 1.0
        n[active_hi] -= 1.0
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise GeometryError("no active facet found at the given boundary point")
        return n / norm

    def bounding_box(self):
        return self.lo.copy(), self.hi.copy()

    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def fingerprint(self):
        return ("box", self.lo.tobytes(), self.hi.tobytes())


@dataclass(frozen=True, eq=False)
class Polytope(ConvexDomain):
    """Bounded intersection of half-spaces {x : a_i . x <= b_i}.

    Normals are renormalized to unit length at construction (offsets rescaled
    accordingly).  Construction probes for a strictly interior point (Chebyshev
    center LP) and for boundedness along every +/- coordinate direction; both
    probes raise GeometryError on failure.
    """

    normals: np.ndarray          # (m, d), unit rows after construction
    offsets: np.ndarray          # (m,)
    dim: int = field(init=False)

    def __post_init__(self):
        A = np.asarray(self.normals, dtype=np.float64)
        b = np.asarray(self.offsets, dtype=np.float64)
        if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
            raise GeometryError("polytope requires normals (m,d) and offsets (m,)")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0.0):
            raise GeometryError("zero normal vector in polytope description")
        A = A / norms[:, None]
        b = b / norms
        object.__setattr__(self, "normals", A)
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "dim", A.shape[1])
        self._probe_interior()
        self._probe_bounded()

    def _probe_interior(self):
        # Chebyshev center: max r s.t. a_i.x + r <= b_i
        m, d = self.normals.shape
        c = np.zeros(d + 1)
        c[-1] = -1.0
        A_ub = np.hstack([self.normals, np.ones((m, 1))])
        res = linprog(c, A_ub=A_ub, b_ub=self.offsets, bounds=[(None, None)] * (d + 1))
        if not res.success or res.x[-1] <= 1e-9:
            raise GeometryError("polytope has empty interior")
        object.__setattr__(self, "_interior_point", res.x[:d].copy())

    def _probe_bounded(self):
        d = self.dim
        for k in range(d):
            for sign in (1.0, -1.0):
                c = np.zeros(d)
                c[k] = -sign  # maximize sign * x_k
                res = linprog(
                    c, A_ub=self.normals, b_ub=self.offsets, bounds=[(None, None)] * d
                )
                if res.status == 3:
                    raise GeometryError(
                        f"polytope unbounded along {'+' if sign > 0 else '-'}e_{k}"
                    )

    def interior_point(self) -> np.ndarray:
        return self._interior_point.copy()

    def contains_many(self, x, tol: Tolerances = TOL):
        slack = x @ self.normals.T - self.offsets
        return np.all(slack <= tol.membership, axis=-1)

    def boundary_distance_many(self, x):
        slack = self.offsets - x @ self.normals.T    # >= 0 inside, per facet
        inside = np.all(slack >= 0.0, axis=-1)
        d_in = np.min(slack, axis=-1)
        out = np.empty(x.shape[0])
        out[inside] = d_in[inside]
        if np.any(~inside):
            proj = self.project_many(x[~inside])
            out[~inside] = np.linalg.norm(x[~inside] - proj, axis=-1)
        return np.abs(out)

    def project_many(self, x, tol: Tolerances = TOL):
        out = np.array(x, dtype=np.float64, copy=True)
        slack = x @ self.normals.T - self.offsets
        bad = np.any(slack > 0.0, axis=-1)
        if not np.any(bad):
            return out
        out[bad] = self._dykstra(out[bad], tol)
        return out

    def _dykstra(self, x, tol: Tolerances):
        A, b = self.normals, self.offsets
        m = A.shape[0]
        p = x.copy()
        corr = np.zeros((m,) + x.shape)
        for _ in range(tol.dykstra_max_sweeps):
            p_prev = p.copy()
            for i in range(m):
                y = p + corr[i]
                viol = np.maximum(y @ A[i] - b[i], 0.0)
                p = y - viol[:, None] * A[i]
                corr[i] = y - p
            if np.max(np.abs(p - p_prev)) <= tol.dykstra_tol:
                break
        else:
            raise ProjectionConvergenceError(
                f"Dykstra did not converge in {tol.dykstra_max_sweeps} sweeps"
            )
        return self._polish(x, p, tol)

    def _polish(self, x, p, tol: Tolerances):
        """Active-set KKT solve; restores the projection to machine accuracy.

        Dykstra lands within ~dykstra_tol of the true projection; the polish
        re-solves the equality-constrained problem on the facets Dykstra found
        active and keeps the result only when it is feasible with nonnegative
        multipliers.
        """
        A, b = self.normals, self.offsets
        active = (p @ A.T) >= (b - 1e-8)
        out = p.copy()
        patterns = {}
        for row, pat in enumerate(map(tuple, active)):
            patterns.setdefault(pat, []).append(row)
        for pat, rows in patterns.items():
            idx = [i for i, a in enumerate(pat) if a]
            if not idx:
                continue
            Aa, ba = A[idx], b[idx]
            G = Aa @ Aa.T
            rows = np.asarray(rows)
            rhs = Aa @ x[rows].T - ba[:, None]
            try:
                lam = np.linalg.solve(G, rhs)
            except np.linalg.LinAlgError:
                continue  # degenerate facet set: keep the Dykstra iterate
            z = x[rows] - (Aa.T @ lam).T
            ok = np.all(lam >= -1e-9, axis=0)
            ok &= np.all(z @ A.T <= b + tol.membership, axis=-1)
            out[rows[ok]] = z[ok]
        return out

    def _normal_at(self, y, tol: Tolerances):
        slack = np.abs(y @ self.normals.T - self.offsets)
        active = slack <= tol.active_facet
        if not np.any(active):
            raise GeometryError("no active facet found at the given boundary point")
        n = -np.sum(self.normals[active], axis=0)   # inward = -outward, averaged
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise GeometryError("active facet normals cancel; normal cone degenerate")
        return n / norm

    def bounding_box(self):
        d = self.dim
        lo = np.empty(d)
        hi = np.empty(d)
        for k in range(d):
            for sign, dest in ((1.0, hi), (-1.0, lo)):
                c = np.zeros(d)
                c[k] = -sign
                res = linprog(
                    c, A_ub=self.normals, b_ub=self.offsets, bounds=[(None, None)] * d
                )
                if not res.success:
                    raise GeometryError("bounding-box LP failed")
                dest[k] = res.x[k]
        return lo, hi

    def volume(self) -> float:
        # quasi-random estimate over the bounding box; adequate for ratio
        # normalizations (boxes/balls use exact formulas instead)
        from scipy.stats import qmc

        lo, hi = self.bounding_box()
        n = 1 << 16
        pts = qmc.Halton(d=self.dim, scramble=False).random(n)
        pts = lo + pts * (hi - lo)
        frac = np.mean(self.contains_many(pts))
        return float(np.prod(hi - lo) * frac)

    def fingerprint(self):
        return ("polytope", self.normals.tobytes(), self.offsets.tobytes())


# -- free functions mirroring the operation names ---------------------------


def contains(domain: ConvexDomain, x, tol: Tolerances = TOL) -> bool:
    return domain.contains(x, tol)


def project(domain: ConvexDomain, x, tol: Tolerances = TOL) -> np.ndarray:
    return domain.project(x, tol)


def inward_normal(domain: ConvexDomain, y, tol: Tolerances = TOL) -> np.ndarray:
    return domain.inward_normal(y, tol)


def monotonicity_check(domain: ConvexDomain, y, z, tol: Tolerances = TOL) -> float:
    """<y - z, N(y)> for boundary y and interior z; convexity makes it <= 0."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not domain.contains(z, tol):
        raise GeometryError("z must lie in the domain")
    n = domain.inward_normal(y, tol)  # validates y is on the boundary
    return float(np.dot(y - z, n))


def sample_interior(domain: ConvexDomain, n: int, rng: np.random.Generator):
    """Rejection-sample n points uniformly from the domain interior."""
    lo, hi = domain.bounding_box()
    out = np.empty((n, domain.dim))
    have = 0
    while have < n:
        cand = rng.uniform(lo, hi, size=(max(2 * (n - have), 64), domain.dim))
        keep = cand[domain.contains_many(cand)]
        take = min(n - have, keep.shape[0])
        out[have : have + take] = keep[:take]
        have += take
    return out


def sample_boundary(domain: ConvexDomain, n: int, rng: np.random.Generator):
    """n points on the boundary, by projecting exterior rays outward."""
    lo, hi = domain.bounding_box()
    center = 0.5 * (lo + hi)
    scale = 2.0 * np.linalg.norm(hi - lo)
    dirs = rng.normal(size=(n, domain.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    far = center + scale * dirs
    return domain.project_many(far)
