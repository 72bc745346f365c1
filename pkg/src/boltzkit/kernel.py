"""Collision kernel specification and sphere quadrature.

The binary collision kernel treated throughout is

    B(v - v*, sigma) = |v - v*|^gamma * b(n . sigma),   n = (v - v*)/|v - v*|,

with a hard-potential exponent gamma in (0, 2] and a nonnegative angular law
b subject to the finite angular-mass (cutoff) condition

    a0 = |S^{dim-2}| * int_0^pi b(cos x) sin^{dim-2} x dx  in (0, inf).

The companion constant a2 replaces sin^{dim-2} by sin^dim and controls how
much kinetic energy a collision moves between partners on average.

Post-collision velocities use the sigma-parametrization

    v'  = (v + v*)/2 + (|v - v*|/2) sigma,
    v*' = (v + v*)/2 - (|v - v*|/2) sigma,

which conserves momentum and kinetic energy identically in exact arithmetic.

Sphere quadrature follows the polar factorization of S^{dim-1} around an
axis n: the polar cosine t carries the surface-measure density
zeta(t) = (1 - t^2)^((dim-3)/2), integrated by Gauss-Jacobi rules whose
weight absorbs zeta exactly, while the azimuthal factor is a recursively
built rule on S^{dim-2} bottoming out at uniform angles on the circle and
the two-point sphere S^0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi

from .errors import NonPositiveA0

ANGULAR_FORMS = ("constant", "polynomial-in-t", "tabulated")

# Dense symmetric grid for positivity / extremum scans of the angular law.
# Chebyshev clustering catches endpoint dips that a uniform grid misses.
_SCAN_T = np.cos(np.pi * np.arange(2049) / 2048.0)


def sphere_area(k: int) -> float:
    """Surface measure of the unit sphere S^{k-1} embedded in R^k."""
    if k < 1:
        raise ValueError(f"ambient dimension must be >= 1, got {k}")
    return 2.0 * math.pi ** (k / 2.0) / math.gamma(k / 2.0)


@dataclass(frozen=True)
class AngularLaw:
    """Angular factor b of the collision kernel as a function of t = n.sigma.

    Parameters
    ----------
    form : str
        One of ``"constant"`` (params ``(c,)``), ``"polynomial-in-t"``
        (params are coefficients ``(c0, c1, ...)`` of ``sum c_k t^k``) or
        ``"tabulated"`` (params are knot pairs ``((t0, b0), ..., (tm, bm))``
        with t0 = -1 and tm = 1; evaluation is linear interpolation).

    Notes
    -----
    The law must be nonnegative on [-1, 1]; this is checked on a dense
    Chebyshev grid at construction.
    """

    form: str
    params: tuple

    def __post_init__(self) -> None:
        if self.form not in ANGULAR_FORMS:
            raise ValueError(f"unknown angular form {self.form!r}, expected one of {ANGULAR_FORMS}")
        if self.form == "tabulated":
            knots = tuple((float(t), float(b)) for t, b in self.params)
            if len(knots) < 2:
                raise ValueError("tabulated angular law needs at least two knots")
            ts = [t for t, _ in knots]
            if any(b - a <= 0 for a, b in zip(ts, ts[1:])):
                raise ValueError("tabulated knots must be strictly increasing in t")
            if abs(ts[0] + 1.0) > 1e-12 or abs(ts[-1] - 1.0) > 1e-12:
                raise ValueError("tabulated knots must span [-1, 1]")
            object.__setattr__(self, "params", knots)
        else:
            vals = tuple(float(p) for p in np.atleast_1d(np.asarray(self.params, dtype=float)))
            if not vals:
                raise ValueError("angular law needs at least one coefficient")
            object.__setattr__(self, "params", vals)
        lo = float(np.min(self(_SCAN_T)))
        if lo < -1e-12:
            raise ValueError(f"angular law is negative on [-1, 1] (min {lo:.3e})")

    def __call__(self, t: np.ndarray | float) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.form == "constant":
            return np.full_like(t, self.params[0])
        if self.form == "polynomial-in-t":
            return np.polynomial.polynomial.polyval(t, np.asarray(self.params))
        knots = np.asarray(self.params)
        return np.interp(t, knots[:, 0], knots[:, 1])

    def scaled(self, factor: float) -> "AngularLaw":
        """Return the law multiplied pointwise by ``factor`` (> 0)."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        if self.form == "tabulated":
            return AngularLaw(self.form, tuple((t, b * factor) for t, b in self.params))
        return AngularLaw(self.form, tuple(p * factor for p in self.params))

    def sup_inf(self) -> tuple[float, float]:
        """Numeric (sup, inf) of the law over [-1, 1].

        Exact for constant and tabulated (linear pieces attain extremes at
        knots); dense-grid approximation for polynomials.
        """
        if self.form == "constant":
            c = self.params[0]
            return c, c
        if self.form == "tabulated":
            vals = [b for _, b in self.params]
            return max(vals), min(vals)
        vals = self(_SCAN_T)
        return float(np.max(vals)), float(np.min(vals))


def _angular_moment(angular: AngularLaw, nu: float) -> float:
    """Compute int_{-1}^{1} b(t) (1 - t^2)^nu dt to near machine precision.

    Constant and polynomial forms are integrated exactly by Gauss-Jacobi
    rules whose weight absorbs (1 - t^2)^nu; tabulated (piecewise linear)
    forms are integrated per knot interval with one-sided Jacobi weights on
    the intervals touching t = +-1 so the algebraic endpoint factor never
    degrades the rule.
    """
    if angular.form == "constant":
        c = angular.params[0]
        return c * math.sqrt(math.pi) * math.gamma(nu + 1.0) / math.gamma(nu + 1.5)
    if angular.form == "polynomial-in-t":
        deg = len(angular.params) - 1
        n = deg // 2 + 2
        t, w = roots_jacobi(n, nu, nu)
        return float(w @ angular(t))
    total = 0.0
    knots = np.asarray(angular.params)
    n = 48
    for (ta, ba), (tb, bb) in zip(knots[:-1], knots[1:]):
        mid, half = 0.5 * (ta + tb), 0.5 * (tb - ta)
        at_left, at_right = ta <= -1.0 + 1e-14, tb >= 1.0 - 1e-14
        # Map [-1, 1] -> [ta, tb]; pull singular endpoint factors into the
        # Jacobi weight so the residual integrand is analytic on the interval.
        if at_left and at_right:
            x, w = roots_jacobi(n, nu, nu)
            t = mid + half * x
            vals = _interp_segment(t, ta, ba, tb, bb) * half ** (2 * nu + 1)
        elif at_left:
            x, w = roots_jacobi(n, 0.0, nu)
            t = mid + half * x
            vals = _interp_segment(t, ta, ba, tb, bb) * (1.0 - t) ** nu * half ** (nu + 1)
        elif at_right:
            x, w = roots_jacobi(n, nu, 0.0)
            t = mid + half * x
            vals = _interp_segment(t, ta, ba, tb, bb) * (1.0 + t) ** nu * half ** (nu + 1)
        else:
            x, w = roots_jacobi(n, 0.0, 0.0)
            t = mid + half * x
            vals = _interp_segment(t, ta, ba, tb, bb) * (1.0 - t * t) ** nu * half
        total += float(w @ vals)
    return total


def _interp_segment(t: np.ndarray, ta: float, ba: float, tb: float, bb: float) -> np.ndarray:
    return ba + (bb - ba) * (t - ta) / (tb - ta)


def compute_a0(dim: int, angular: AngularLaw) -> float:
    """Angular mass a0 = |S^{dim-2}| int_0^pi b(cos x) sin^{dim-2} x dx.

    Raises
    ------
    NonPositiveA0
        If the computed mass is not strictly positive.
    """
    val = sphere_area(dim - 1) * _angular_moment(angular, (dim - 3) / 2.0)
    if not val > 0.0:
        raise NonPositiveA0(f"angular mass a0 = {val!r} must be positive")
    return val


def compute_a2(dim: int, angular: AngularLaw) -> float:
    """Energy-transfer constant a2 = |S^{dim-2}| int_0^pi b(cos x) sin^dim x dx."""
    return sphere_area(dim - 1) * _angular_moment(angular, (dim - 1) / 2.0)


@dataclass(frozen=True)
class KernelSpec:
    """Immutable collision kernel description with derived cutoff constants.

    Parameters
    ----------
    dim : int
        Velocity space dimension, at least 2 (solvers additionally
        require at least 3).
    gamma : float
        Relative-speed exponent, in (0, 2].
    angular : AngularLaw
        Angular law b.

    Attributes
    ----------
    a0, a2 : float
        Cutoff constants, recomputed at construction.
    b_sup, b_inf : float
        Pointwise extremes of the angular law on [-1, 1].
    """

    dim: int
    gamma: float
    angular: AngularLaw
    a0: float = field(init=False)
    a2: float = field(init=False)
    b_sup: float = field(init=False)
    b_inf: float = field(init=False)

    def __post_init__(self) -> None:
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"dim must be an integer >= 2, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        if not (0.0 < self.gamma <= 2.0):
            raise ValueError(f"gamma must lie in (0, 2], got {self.gamma}")
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "a0", compute_a0(self.dim, self.angular))
        object.__setattr__(self, "a2", compute_a2(self.dim, self.angular))
        sup, inf = self.angular.sup_inf()
        object.__setattr__(self, "b_sup", sup)
        object.__setattr__(self, "b_inf", inf)

    def to_json_dict(self) -> dict:
        if self.angular.form == "tabulated":
            params: list = [[t, b] for t, b in self.angular.params]
        else:
            params = list(self.angular.params)
        return {"N": self.dim, "gamma": self.gamma, "b": {"form": self.angular.form, "params": params}}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "KernelSpec":
        b = obj["b"]
        raw = b["params"]
        if b["form"] == "tabulated":
            params = tuple((float(t), float(v)) for t, v in raw)
        elif isinstance(raw, (int, float)):
            params = (float(raw),)
        else:
            params = tuple(float(v) for v in raw)
        return cls(dim=int(obj["N"]), gamma=float(obj["gamma"]), angular=AngularLaw(b["form"], params))


def normalize_b(spec: KernelSpec) -> KernelSpec:
    """Rescale the angular law so the angular mass a0 becomes 1.

    Idempotent: applying it to an already-normalized spec changes the
    law by at most one unit in the last place.
    """
    return KernelSpec(spec.dim, spec.gamma, spec.angular.scaled(1.0 / spec.a0))


def dump_kernel(spec: KernelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_json_dict(), indent=2) + "\n")


def load_kernel(path: str | Path) -> KernelSpec:
    return KernelSpec.from_json_dict(json.loads(Path(path).read_text()))


def post_collision(
    v: np.ndarray, vstar: np.ndarray, sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Post-collision pair for the sigma-parametrization.

    All arguments broadcast over leading axes; the last axis is the
    velocity component axis.
    """
    v = np.asarray(v, dtype=float)
    vstar = np.asarray(vstar, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    center = 0.5 * (v + vstar)
    half_rel = 0.5 * np.linalg.norm(v - vstar, axis=-1, keepdims=True)
    return center + half_rel * sigma, center - half_rel * sigma


def zeta(t: np.ndarray | float, dim: int) -> np.ndarray:
    """Polar density zeta(t) = (1 - t^2)^((dim-3)/2), zero outside |t| <= 1.

    For dim = 2 the density diverges at t = +-1; callers handle that range.
    """
    t = np.asarray(t, dtype=float)
    inside = np.clip(1.0 - t * t, 0.0, None)
    with np.errstate(divide="ignore"):
        out = inside ** ((dim - 3) / 2.0)
    return np.where(np.abs(t) <= 1.0, out, 0.0)


def orthonormal_frame(n: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the hyperplane orthogonal to the unit vector n.

    Returns an array of shape (dim-1, dim). Deterministic: the coordinate
    axis with the largest |component| of n is dropped and the remaining
    axes are Gram-Schmidt orthogonalized in index order, which keeps the
    construction stable (the dropped axis is the one nearly parallel to n).
    """
    n = np.asarray(n, dtype=float)
    dim = n.size
    norm = np.linalg.norm(n)
    if norm == 0.0:
        raise ValueError("frame axis must be nonzero")
    n = n / norm
    pivot = int(np.argmax(np.abs(n)))
    rows = []
    for j in range(dim):
        if j == pivot:
            continue
        v = np.zeros(dim)
        v[j] = 1.0
        v -= (v @ n) * n
        for r in rows:
            v -= (v @ r) * r
        v /= np.linalg.norm(v)
        rows.append(v)
    return np.array(rows)


@lru_cache(maxsize=64)
def _canonical_sphere(dim: int, n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature for S^{dim-1} in R^dim with polar axis e_0; weights sum to
    the sphere area. Cached; returned arrays are read-only."""
    if dim < 1:
        raise ValueError(f"ambient dimension must be >= 1, got {dim}")
    if dim == 1:
        pts = np.array([[1.0], [-1.0]])
        w = np.array([1.0, 1.0])
    elif dim == 2:
        # Half-step offset keeps nodes away from the coordinate axes, which
        # downstream use as degenerate-direction sentinels.
        ang = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
        pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        w = np.full(n_azimuth, 2.0 * np.pi / n_azimuth)
    else:
        t, wt = roots_jacobi(n_polar, (dim - 3) / 2.0, (dim - 3) / 2.0)
        sub_pts, sub_w = _canonical_sphere(dim - 1, n_polar, n_azimuth)
        s = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
        pts = np.empty((t.size, sub_pts.shape[0], dim))
        pts[:, :, 0] = t[:, None]
        pts[:, :, 1:] = s[:, None, None] * sub_pts[None, :, :]
        pts = pts.reshape(-1, dim)
        w = np.outer(wt, sub_w).ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


def sphere_nodes(
    dim: int,
    n_polar: int = 24,
    n_azimuth: int = 48,
    axis: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights on S^{dim-1}; weights sum to its area.

    Parameters
    ----------
    n_polar : int
        Gauss-Jacobi nodes per polar level (dims >= 3).
    n_azimuth : int
        Uniform angles on the base circle.
    axis : array or None
        If given, the polar coordinate of the rule is t = sigma . axis;
        nodes are expressed in standard coordinates. None keeps the
        canonical axis e_0.
    """
    pts, w = _canonical_sphere(dim, n_polar, n_azimuth)
    if axis is None:
        return pts.copy(), w.copy()
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    basis = np.vstack([axis[None, :], orthonormal_frame(axis)])
    return pts @ basis, w.copy()


def sphere_integrate(
    psi: Callable[[np.ndarray], np.ndarray],
    dim: int,
    n_polar: int = 24,
    n_azimuth: int = 48,
    axis: np.ndarray | None = None,
) -> float:
    """Integrate a vectorized function over S^{dim-1}.

    ``psi`` receives an (M, dim) array of unit vectors and must return an
    (M,) array of values.
    """
    pts, w = sphere_nodes(dim, n_polar, n_azimuth, axis)
    return float(w @ np.asarray(psi(pts), dtype=float))
