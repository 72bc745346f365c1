"""Nested-gain collision kernel: geometry, pointwise values, and Lp probes.

The gain-of-gain operator admits a triple-integral representation against a
four-point kernel.  This module evaluates that kernel by quadrature over the
circle (or sphere) orthogonal to the relative velocity, exposes the geometric
quantities entering it, estimates its Lp norms by radial-spherical quadrature,
and cross-checks the representation against the nested weak form with a
Monte-Carlo error bar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import (
    CoincidentPair,
    InadmissibleExponent,
    MomentHypothesisViolated,
)
from .kernel import KernelSpec, sphere_nodes
from .measures import ParticleMeasure, moment_norm

__all__ = [
    "GainGeometry",
    "IterationConstants",
    "RepresentationResult",
    "gain_geometry",
    "kb",
    "kb_values",
    "representation_check",
    "lp_scaling_values",
    "lp_scaling_probe",
    "t_ww_apply",
    "iteration_constants",
]

_ALIGNED_TOL = 1e-24


@dataclass(frozen=True)
class GainGeometry:
    """Geometry of one four-point kernel configuration.

    Holds the unit vector along v - v_star, the signed polar coordinate t of
    the pair sphere relative to that axis, and the maps from a unit vector in
    the orthogonal plane to the intermediate velocity and scattering
    directions.
    """

    v: np.ndarray
    v_star: np.ndarray
    w: np.ndarray
    w_star: np.ndarray
    n: np.ndarray
    t: float
    rel_gap: float
    pair_gap: float
    pair_center: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.rel_gap == 0.0 or self.pair_gap == 0.0

    @property
    def dim(self) -> int:
        return self.v.shape[0]

    def zeta(self) -> float:
        """Polar weight (1-t^2)^{(dim-3)/2} on (-1,1), zero outside."""
        if self.degenerate or abs(self.t) >= 1.0:
            return 0.0
        return (1.0 - self.t * self.t) ** ((self.dim - 3) / 2.0)

    def sigma(self, omega: np.ndarray) -> np.ndarray:
        """Scattering direction t*n + sqrt(1-t^2)*omega for omega in n-perp."""
        omega = np.atleast_2d(omega)
        root = math.sqrt(max(1.0 - self.t * self.t, 0.0))
        return self.t * self.n[None, :] + root * omega

    def w_prime(self, omega: np.ndarray) -> np.ndarray:
        return self.pair_center[None, :] + 0.5 * self.pair_gap * self.sigma(omega)

    def sigma_prime(self, omega: np.ndarray) -> np.ndarray:
        rebound = 2.0 * self.v[None, :] - self.v_star[None, :] - self.w_prime(omega)
        norms = np.linalg.norm(rebound, axis=1, keepdims=True)
        return rebound / norms

    def omega_nodes(self, n_polar: int, n_azimuth: int) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes and weights on the unit sphere orthogonal to n."""
        pts, wts = sphere_nodes(self.dim - 1, n_polar, n_azimuth)
        basis = _perp_basis(self.n[None, :])[0]
        return pts @ basis, wts


def gain_geometry(
    v: np.ndarray, v_star: np.ndarray, w: np.ndarray, w_star: np.ndarray
) -> GainGeometry:
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    w = np.asarray(w, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    rel = v - v_star
    rel_gap = float(np.linalg.norm(rel))
    pair_gap = float(np.linalg.norm(w - w_star))
    center = 0.5 * (w + w_star)
    if rel_gap == 0.0 or pair_gap == 0.0:
        n = np.zeros_like(rel)
        t = 0.0
    else:
        n = rel / rel_gap
        t = float(n @ (2.0 * v - (w + w_star))) / pair_gap
    return GainGeometry(v, v_star, w, w_star, n, t, rel_gap, pair_gap, center)


def _perp_basis(axes: np.ndarray) -> np.ndarray:
    """Orthonormal bases of the hyperplanes orthogonal to each unit row.

    Returns (M, dim-1, dim): the trailing columns of the Householder
    reflection exchanging e0 with the axis; rows aligned with e0 keep the
    canonical basis e1..e_{dim-1}.
    """
    m, dim = axes.shape
    q = axes.copy()
    q[:, 0] -= 1.0
    qn2 = np.einsum("md,md->m", q, q)
    aligned = qn2 <= _ALIGNED_TOL
    qn2 = np.where(aligned, 1.0, qn2)
    eye = np.eye(dim)[1:, :]
    # column j >= 1 of H = I - 2qq^T/|q|^2 is e_j - 2 q q_j / |q|^2
    basis = eye[None, :, :] - (2.0 / qn2)[:, None, None] * q[:, 1:, None] * q[:, None, :]
    basis[aligned] = eye
    return basis


def kb_values(
    vs: np.ndarray,
    v_stars: np.ndarray,
    ws: np.ndarray,
    w_stars: np.ndarray,
    spec: KernelSpec,
    resolution: tuple[int, int] = (1, 32),
) -> np.ndarray:
    """Kernel values for a batch of configurations, one per row.

    All four arguments broadcast to a common (M, dim) shape.  The quadrature
    over the unit sphere orthogonal to each relative velocity uses
    `resolution` = (polar nodes, azimuth nodes); for dim = 3 that sphere is a
    circle and only the azimuth count matters.
    """
    dim = spec.dim
    if dim < 3:
        raise ValueError(f"the iterated kernel needs dim >= 3, got {dim}")
    vs, v_stars, ws, w_stars = np.broadcast_arrays(
        np.atleast_2d(np.asarray(vs, dtype=float)),
        np.atleast_2d(np.asarray(v_stars, dtype=float)),
        np.atleast_2d(np.asarray(ws, dtype=float)),
        np.atleast_2d(np.asarray(w_stars, dtype=float)),
    )
    m = vs.shape[0]
    out = np.zeros(m)

    rel = vs - v_stars
    rel_gap = np.linalg.norm(rel, axis=1)
    pair = ws - w_stars
    pair_gap = np.linalg.norm(pair, axis=1)
    live = (rel_gap > 0.0) & (pair_gap > 0.0)
    if not np.any(live):
        return out

    n_hat = rel[live] / rel_gap[live, None]
    t = np.einsum(
        "md,md->m", n_hat, 2.0 * vs[live] - (ws[live] + w_stars[live])
    ) / pair_gap[live]
    open_disk = np.abs(t) < 1.0
    if not np.any(open_disk):
        return out

    keep = np.flatnonzero(live)[open_disk]
    n_hat = n_hat[open_disk]
    t = t[open_disk]
    gap = pair_gap[keep]
    d_hat = pair[keep] / gap[:, None]
    center = 0.5 * (ws[keep] + w_stars[keep])
    zeta = (1.0 - t * t) ** ((dim - 3) / 2.0)

    circle, circle_w = sphere_nodes(dim - 1, *resolution)
    basis = _perp_basis(n_hat)
    omega = np.einsum("kc,mcd->mkd", circle, basis)
    sigma = t[:, None, None] * n_hat[:, None, :] + np.sqrt(1.0 - t * t)[
        :, None, None
    ] * omega

    w_prime = center[:, None, :] + 0.5 * gap[:, None, None] * sigma
    u = w_prime - v_stars[keep][:, None, :]
    u_norm = np.linalg.norm(u, axis=2)
    rebound = 2.0 * vs[keep][:, None, :] - v_stars[keep][:, None, :] - w_prime
    rebound_norm = np.linalg.norm(rebound, axis=2)

    b_pair = spec.angular(np.einsum("md,mkd->mk", d_hat, sigma))
    cos_prime = np.einsum("mkd,mkd->mk", u, rebound) / (u_norm * rebound_norm)
    b_prime = spec.angular(np.clip(cos_prime, -1.0, 1.0))
    # a quadrature node can land exactly on the sphere point nearest v_star;
    # the singularity is integrable, so the offending node is dropped
    with np.errstate(divide="ignore", invalid="ignore"):
        integrand = b_pair * b_prime * u_norm ** (spec.gamma + 2.0 - dim)
    integrand[~np.isfinite(integrand)] = 0.0

    ring = integrand @ circle_w
    out[keep] = (
        2.0**dim / (gap ** (1.0 - spec.gamma) * rel_gap[keep]) * zeta * ring
    )
    return out


def kb(
    v: np.ndarray,
    v_star: np.ndarray,
    w: np.ndarray,
    w_star: np.ndarray,
    spec: KernelSpec,
    resolution: tuple[int, int] = (1, 32),
) -> float:
    """Pointwise four-point kernel value; zero on the degenerate branches."""
    return float(
        kb_values(
            np.asarray(v, dtype=float)[None, :],
            np.asarray(v_star, dtype=float)[None, :],
            np.asarray(w, dtype=float)[None, :],
            np.asarray(w_star, dtype=float)[None, :],
            spec,
            resolution,
        )[0]
    )


class RepresentationResult(NamedTuple):
    lhs: float
    rhs: float
    z_score: float


def _nested_weak_form(
    f: ParticleMeasure,
    g: ParticleMeasure,
    h: ParticleMeasure,
    psi: Callable[[np.ndarray], np.ndarray],
    spec: KernelSpec,
    resolution: tuple[int, int],
) -> float:
    """Integral of psi against the nested gain via two sphere quadratures."""
    pts, wts = sphere_nodes(spec.dim, *resolution)
    n_nodes = pts.shape[0]
    x, fa = f.velocities, f.weights
    y, gb = g.velocities, g.weights
    z, hc = h.velocities, h.weights

    jj, kk = np.meshgrid(np.arange(y.shape[0]), np.arange(z.shape[0]), indexing="ij")
    jj, kk = jj.ravel(), kk.ravel()
    total = 0.0
    chunk = max(1, int(2_000_000 // max(1, n_nodes * x.shape[0] * n_nodes)))
    for start in range(0, jj.size, chunk):
        j = jj[start : start + chunk]
        k = kk[start : start + chunk]
        d = y[j] - z[k]
        gap = np.linalg.norm(d, axis=1)
        live = gap > 0.0
        if not np.any(live):
            continue
        j, k, d, gap = j[live], k[live], d[live], gap[live]
        center = 0.5 * (y[j] + z[k])
        # outer sphere: intermediate velocities on the (y_j, z_k) pair sphere
        w_prime = center[:, None, :] + 0.5 * gap[:, None, None] * pts[None, :, :]
        b_outer = spec.angular(np.einsum("pd,sd->ps", d / gap[:, None], pts))
        outer_w = gap[:, None] ** spec.gamma * b_outer * wts[None, :]

        # inner sphere: post-collision velocities of (w_prime, x_i) pairs
        u = w_prime[:, :, None, :] - x[None, None, :, :]
        u_norm = np.linalg.norm(u, axis=3)
        mid = 0.5 * (w_prime[:, :, None, :] + x[None, None, :, :])
        vpp = (
            mid[:, :, :, None, :]
            + 0.5 * u_norm[:, :, :, None, None] * pts[None, None, None, :, :]
        )
        psi_vals = psi(vpp.reshape(-1, spec.dim)).reshape(vpp.shape[:4])
        # grazing pairs (u = 0) contribute nothing for hard potentials
        cosines = np.einsum("psid,td->psit", u, pts) / np.where(u_norm, u_norm, 1.0)[
            ..., None
        ]
        b_inner = spec.angular(np.clip(cosines, -1.0, 1.0))
        inner = np.einsum(
            "psit,psit,t->psi", u_norm[..., None] ** spec.gamma * b_inner, psi_vals, wts
        )
        total += float(
            np.einsum("ps,psi,i,p->", outer_w, inner, fa, gb[j] * hc[k])
        )
    return total


def _stratified_indices(
    weights: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Weight-proportional atom indices via antithetic stratified uniforms."""
    half = (count + 1) // 2
    u = (rng.permutation(half) + rng.uniform(size=half)) / half
    u = np.concatenate([u, 1.0 - u])[:count]
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, u, side="left").clip(0, weights.size - 1)


def _kernel_ball_integrals(
    v_stars: np.ndarray,
    ws: np.ndarray,
    w_stars: np.ndarray,
    psi: Callable[[np.ndarray], np.ndarray],
    spec: KernelSpec,
    n_radial: int,
    sphere_resolution: tuple[int, int],
    omega_resolution: tuple[int, int],
) -> np.ndarray:
    """Integral of K_B(., v*, w, w*) psi over velocity space per triple.

    The kernel vanishes outside the ball around v* whose radius is the
    largest distance from v* to the (w, w*) pair sphere, so the integral is
    a radial-spherical quadrature over that ball with the 1/|v - v*| factor
    absorbed by the volume element.
    """
    m = v_stars.shape[0]
    center = 0.5 * (ws + w_stars)
    radius = np.linalg.norm(center - v_stars, axis=1) + 0.5 * np.linalg.norm(
        ws - w_stars, axis=1
    )
    nodes, node_w = np.polynomial.legendre.leggauss(n_radial)
    r_frac = 0.5 * (nodes + 1.0)
    dirs, dir_w = sphere_nodes(spec.dim, *sphere_resolution)

    r = radius[:, None] * r_frac[None, :]
    vs = (
        v_stars[:, None, None, :]
        + r[:, :, None, None] * dirs[None, None, :, :]
    )
    flat_vs = vs.reshape(-1, spec.dim)
    repeat = n_radial * dirs.shape[0]
    kb_flat = kb_values(
        flat_vs,
        np.repeat(v_stars, repeat, axis=0),
        np.repeat(ws, repeat, axis=0),
        np.repeat(w_stars, repeat, axis=0),
        spec,
        omega_resolution,
    )
    psi_flat = psi(flat_vs)
    vals = (kb_flat * psi_flat).reshape(m, n_radial, dirs.shape[0])
    shell = vals @ dir_w
    jacobian = r ** (spec.dim - 1) * (0.5 * radius[:, None] * node_w[None, :])
    return np.einsum("mr,mr->m", shell, jacobian)


def representation_check(
    f: ParticleMeasure,
    g: ParticleMeasure,
    h: ParticleMeasure,
    psi: Callable[[np.ndarray], np.ndarray],
    spec: KernelSpec,
    mc_samples: int = 2048,
    seed: int = 0,
    *,
    psi_order: float = 0.0,
    resolution: tuple[int, int] = (6, 8),
    n_radial: int = 16,
    omega_resolution: tuple[int, int] = (1, 16),
    n_batches: int = 16,
) -> RepresentationResult:
    """Two independent evaluations of psi against the nested gain.

    lhs runs the nested weak form (two sphere quadratures over all atom
    triples); rhs Monte-Carlo samples atom triples proportionally to their
    weights and integrates the four-point kernel over velocity space for
    each draw.  The returned z-score is |lhs - rhs| over the batch-means
    standard error of the rhs estimator.
    """
    gamma2 = 2.0 * spec.gamma
    if psi_order > gamma2:
        raise MomentHypothesisViolated(
            f"test function growth order {psi_order} exceeds 2*gamma = {gamma2}"
        )
    for name, measure, order in (("f", f, spec.gamma), ("g", g, gamma2), ("h", h, gamma2)):
        if measure.dim != spec.dim:
            raise ValueError(f"measure {name} lives in dim {measure.dim}, spec has {spec.dim}")
        if not math.isfinite(moment_norm(measure, order)):
            raise MomentHypothesisViolated(f"measure {name} lacks a finite order-{order} moment")

    lhs = _nested_weak_form(f, g, h, psi, spec, resolution)

    rng = np.random.default_rng(seed)
    scale = f.mass() * g.mass() * h.mass()
    per_batch = max(2, mc_samples // n_batches)
    batch_means = np.empty(n_batches)
    for b in range(n_batches):
        i = _stratified_indices(f.weights, per_batch, rng)
        j = _stratified_indices(g.weights, per_batch, rng)
        k = _stratified_indices(h.weights, per_batch, rng)
        integrals = _kernel_ball_integrals(
            f.velocities[i],
            g.velocities[j],
            h.velocities[k],
            psi,
            spec,
            n_radial,
            resolution,
            omega_resolution,
        )
        batch_means[b] = float(np.mean(integrals))
    rhs = scale * float(np.mean(batch_means))
    sigma = scale * float(np.std(batch_means, ddof=1)) / math.sqrt(n_batches)
    diff = abs(lhs - rhs)
    if sigma == 0.0:
        z = 0.0 if diff <= 1e-12 * max(abs(lhs), 1.0) else math.inf
    else:
        z = diff / sigma
    return RepresentationResult(lhs, rhs, z)


def _check_exponent(p: float, spec: KernelSpec) -> None:
    n, gamma = spec.dim, spec.gamma
    if gamma < n - 2.0:
        lo = (n - 1.0) / (n - 1.0 - gamma)
        hi = n / (n - 1.0 - gamma)
        if not lo <= p < hi:
            raise InadmissibleExponent(
                f"p = {p} outside [{lo}, {hi}) for gamma = {gamma} < dim-2"
            )
    elif not 1.0 <= p < n:
        raise InadmissibleExponent(f"p = {p} outside [1, {n}) for gamma = {gamma} >= dim-2")


def lp_scaling_values(
    v_star: np.ndarray,
    w_dir: np.ndarray,
    p: float,
    spec: KernelSpec,
    radii: np.ndarray,
    resolution: tuple[int, int, int, int] = (24, 6, 8, 32),
) -> np.ndarray:
    """Lp norm in v of the kernel at each pair separation in `radii`.

    The pair (w, w*) is centred at v_star and separated along w_dir, which
    makes the norm an exact power of the separation; `resolution` is
    (radial, polar, azimuth, omega-azimuth) quadrature sizes.
    """
    _check_exponent(p, spec)
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0.0):
        raise ValueError("pair separations must be strictly positive")
    v_star = np.asarray(v_star, dtype=float)
    w_dir = np.asarray(w_dir, dtype=float)
    w_dir = w_dir / np.linalg.norm(w_dir)

    n_radial, n_polar, n_azimuth, n_omega = resolution
    # the kernel carries an exact 1/|v - v*| factor: absorb it into a
    # Gauss-Jacobi radial rule with weight r^(dim-1-p)
    from scipy.special import roots_jacobi

    jnodes, jweights = roots_jacobi(n_radial, 0.0, spec.dim - 1.0 - p)
    dirs, dir_w = sphere_nodes(spec.dim, n_polar, n_azimuth)

    out = np.empty(radii.size)
    for idx, sep in enumerate(radii):
        w = v_star + 0.5 * sep * w_dir
        w_st = v_star - 0.5 * sep * w_dir
        support = 0.5 * sep
        r = support * 0.5 * (jnodes + 1.0)
        vs = v_star[None, None, :] + r[:, None, None] * dirs[None, :, :]
        flat = vs.reshape(-1, spec.dim)
        kb_flat = kb_values(
            flat,
            np.broadcast_to(v_star, flat.shape),
            np.broadcast_to(w, flat.shape),
            np.broadcast_to(w_st, flat.shape),
            spec,
            (1, n_omega),
        )
        smooth = (kb_flat.reshape(r.size, dirs.shape[0]) * r[:, None]) ** p
        radial_w = (0.5 * support) ** (spec.dim - p) * jweights
        out[idx] = float(np.einsum("rd,d,r->", smooth, dir_w, radial_w)) ** (1.0 / p)
    return out


def lp_scaling_probe(
    v_star: np.ndarray,
    w_dir: np.ndarray,
    p: float,
    spec: KernelSpec,
    radii: np.ndarray,
    resolution: tuple[int, int, int, int] = (24, 6, 8, 32),
) -> float:
    """Log-log slope of the kernel Lp norm against the pair separation."""
    radii = np.asarray(radii, dtype=float)
    if radii.size < 2:
        raise ValueError("need at least two separations to fit a slope")
    values = lp_scaling_values(v_star, w_dir, p, spec, radii, resolution)
    slope, _ = np.polyfit(np.log(radii), np.log(values), 1)
    return float(slope)


def t_ww_apply(
    f,
    w: np.ndarray,
    w_star: np.ndarray,
    v_grid,
    spec: KernelSpec,
    resolution: tuple[int, int] = (1, 32),
):
    """Kernel transform of a grid state at fixed pair (w, w*).

    Returns a grid state on v_grid's lattice holding the values of
    integral K_B(v, ., w, w*) against f at every lattice-ball node.
    """
    from . import dvm

    w = np.asarray(w, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    if float(np.linalg.norm(w - w_star)) == 0.0:
        raise CoincidentPair("the pair velocities coincide; the transform is undefined")

    geom = v_grid.geometry
    side = 2 * v_grid.half + 1
    if not np.any(f.values > 0.0):
        return dvm.GridDensity(np.zeros((side,) * geom.dim), v_grid.spacing)

    atoms = f.to_particle_measure()
    targets = geom.vel[geom.ball]
    m_t, m_a = targets.shape[0], atoms.count

    values = np.zeros(m_t)
    chunk = max(1, int(400_000 // max(1, m_a)))
    for start in range(0, m_t, chunk):
        block = targets[start : start + chunk]
        nb = block.shape[0]
        vs = np.repeat(block, m_a, axis=0)
        stars = np.tile(atoms.velocities, (nb, 1))
        kvals = kb_values(
            vs,
            stars,
            np.broadcast_to(w, vs.shape),
            np.broadcast_to(w_star, vs.shape),
            spec,
            resolution,
        )
        values[start : start + nb] = kvals.reshape(nb, m_a) @ atoms.weights

    full = np.zeros(geom.ball.size)
    full[geom.ball] = values
    return dvm.GridDensity(full.reshape((side,) * geom.dim), v_grid.spacing)


@dataclass(frozen=True)
class IterationConstants:
    """Exponent ladder of the bootstrap from L1 to Linfty.

    n_gamma counts how many gain applications are needed; p_n is the
    integrability reached after n of them, with interpolation exponents
    theta_n and the terminal pair (alpha_1, alpha_2).
    """

    n_gamma: int
    p_n: tuple[float, ...]
    theta_n: tuple[float, ...]
    gamma_1: float
    gamma_star: float
    alpha_1: float
    alpha_2: float


def iteration_constants(spec: KernelSpec) -> IterationConstants:
    n, gamma = spec.dim, spec.gamma
    if n < 3:
        raise ValueError(f"the exponent ladder needs dim >= 3, got {n}")
    if gamma < n - 2.0:
        n_gamma = int(math.floor((n - 1.0) / gamma))
    else:
        n_gamma = 1
    p_n = tuple(
        (n - 1.0) / (n - 1.0 - k * gamma) if n - 1.0 - k * gamma > 0.0 else math.inf
        for k in range(1, n_gamma + 1)
    )
    theta_n = tuple(
        max(1.0 - (n - 2.0) / k, 0.0) / n for k in range(1, n_gamma + 1)
    )
    alpha_1 = ((n - 1.0) / (gamma * n_gamma)) * ((n - 1.0 - gamma) / n)
    alpha_2 = ((n - 1.0) / (gamma * n_gamma)) * (max(1.0 - gamma, 0.0) / n)
    return IterationConstants(
        n_gamma=n_gamma,
        p_n=p_n,
        theta_n=theta_n,
        gamma_1=max(gamma, 1.0),
        gamma_star=max(gamma - 1.0, 0.0),
        alpha_1=alpha_1,
        alpha_2=alpha_2,
    )
