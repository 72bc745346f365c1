"""Atomic velocity measures, moment norms, conserved quantities, Maxwellians.

A measure F = sum_i w_i delta_{v_i} with positive weights w_i is the basic
datum for every solver here. Moment norms use the velocity bracket
<v> = sqrt(1 + |v|^2):

    ||F||_s = sum_i w_i <v_i>^s.

The conserved triple of mass, bulk velocity and temperature,

    rho = sum_i w_i,
    u   = (1/rho) sum_i w_i v_i,
    T   = (1/(dim rho)) sum_i w_i |v_i - u|^2,

determines the normalization map (v, w) -> ((v - u)/sqrt(T), w/rho), which
sends F to unit mass, zero mean and unit temperature; the inverse map
restores the original frame. Measures concentrated at a single point have
T = 0 and are rejected wherever the triple or the map is required.

Distances come in two schemes. The exact scheme is the total-variation-type
norm with weight <v>^s, computed atom-by-atom (two atomic measures) or via
mutual singularity (atomic against a Maxwellian, where the value degenerates
to the sum of the two norms). The binned scheme compares cell masses on a
cubic lattice of spacing ``bin_width`` and is the quantity solvers track
while relaxing toward equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import DiracTemperature, UnsupportedScheme, ZeroMass

_MASS_FLOOR = 1e-300


@dataclass(frozen=True)
class ParticleMeasure:
    """Finite nonnegative atomic measure sum_i w_i delta_{v_i} on R^dim.

    Immutable; the backing arrays are marked read-only at construction.
    """

    weights: np.ndarray
    velocities: np.ndarray

    def __post_init__(self) -> None:
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float).ravel())
        v = np.ascontiguousarray(np.asarray(self.velocities, dtype=float))
        if v.ndim != 2:
            raise ValueError("velocities must be a (count, dim) array")
        if w.shape[0] != v.shape[0]:
            raise ValueError("weights and velocities disagree on atom count")
        if w.size == 0:
            raise ValueError("measure needs at least one atom")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValueError("atoms must be finite")
        if np.any(w <= 0.0):
            raise ValueError("atom weights must be strictly positive")
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "velocities", v)

    @property
    def dim(self) -> int:
        return self.velocities.shape[1]

    @property
    def count(self) -> int:
        return self.weights.size

    def mass(self) -> float:
        return float(np.sum(self.weights))


@dataclass(frozen=True)
class MaxwellianParams:
    """Mass, bulk velocity and temperature of a Maxwellian equilibrium."""

    rho: float
    u: np.ndarray
    T: float

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=float).ravel()
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "T", float(self.T))
        if not self.rho > 0.0:
            raise ZeroMass(f"rho must be positive, got {self.rho}")
        if not self.T > 0.0:
            raise DiracTemperature(f"T must be positive, got {self.T}")

    @property
    def dim(self) -> int:
        return self.u.size


@dataclass(frozen=True)
class NormalizationConstants:
    """Norm-comparison constants attached to one conserved triple.

    c_fwd bounds the s = 2 norm growth under forward normalization,
    c_inv the growth under the inverse map (it is the same function of the
    inverted triple (1/rho, |u|/sqrt(T), 1/T)), and c_time = rho T^(gamma/2)
    is the rate factor relating time units before and after normalization.
    """

    c_fwd: float
    c_inv: float
    c_time: float


def bracket(v: np.ndarray) -> np.ndarray:
    """Velocity bracket <v> = sqrt(1 + |v|^2), rows of v."""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def moment_norm(measure: ParticleMeasure, s: float) -> float:
    """||F||_s = sum_i w_i <v_i>^s, exact (no quadrature)."""
    if s < 0:
        raise ValueError(f"moment order must be >= 0, got {s}")
    return float(np.sum(measure.weights * bracket(measure.velocities) ** s))


def conserved_triple(measure: ParticleMeasure) -> MaxwellianParams:
    """Mass, bulk velocity and temperature carried by the measure.

    Raises
    ------
    ZeroMass
        If the total weight vanishes numerically.
    DiracTemperature
        If all atoms coincide (T = 0): the normalization map is undefined.
    """
    rho = measure.mass()
    if not rho > _MASS_FLOOR:
        raise ZeroMass(f"total mass {rho!r} is not positive")
    u = (measure.weights @ measure.velocities) / rho
    dev = measure.velocities - u
    t_val = float(np.sum(measure.weights * np.sum(dev * dev, axis=1))) / (measure.dim * rho)
    if not t_val > 0.0:
        raise DiracTemperature("measure is concentrated at one point (T = 0)")
    return MaxwellianParams(rho, u, t_val)


def apply_normalization(
    measure: ParticleMeasure, params: MaxwellianParams | None = None
) -> ParticleMeasure:
    """Map F with triple (rho, u, T) to the unit frame (1, 0, 1).

    Atoms map v -> (v - u)/sqrt(T), weights w -> w/rho.
    """
    if params is None:
        params = conserved_triple(measure)
    root_t = math.sqrt(params.T)
    return ParticleMeasure(
        measure.weights / params.rho,
        (measure.velocities - params.u) / root_t,
    )


def apply_inverse_normalization(
    measure: ParticleMeasure, params: MaxwellianParams
) -> ParticleMeasure:
    """Inverse of :func:`apply_normalization`: v -> sqrt(T) v + u, w -> rho w."""
    root_t = math.sqrt(params.T)
    return ParticleMeasure(
        measure.weights * params.rho,
        measure.velocities * root_t + params.u,
    )


def _norm_growth_constant(rho: float, speed: float, t_val: float) -> float:
    # max{1 + (m^2 + m)/T, (1 + m)/T} / rho with m = |u|
    return max(1.0 + (speed * speed + speed) / t_val, (1.0 + speed) / t_val) / rho


def normalization_constants(params: MaxwellianParams, gamma: float) -> NormalizationConstants:
    """Forward/inverse norm-growth constants and the time-rate factor.

    The inverse constant is the forward formula evaluated at the inverted
    triple (1/rho, |u|/sqrt(T), 1/T), so the pair is consistent by
    construction and their product dominates 1.
    """
    speed = float(np.linalg.norm(params.u))
    c_fwd = _norm_growth_constant(params.rho, speed, params.T)
    c_inv = _norm_growth_constant(1.0 / params.rho, speed / math.sqrt(params.T), 1.0 / params.T)
    return NormalizationConstants(c_fwd, c_inv, params.rho * params.T ** (gamma / 2.0))


def maxwellian_density(params: MaxwellianParams, v: np.ndarray) -> np.ndarray:
    """Maxwellian density rho (2 pi T)^(-dim/2) exp(-|v - u|^2 / (2T)).

    ``v`` has shape (..., dim); the result drops the last axis.
    """
    v = np.asarray(v, dtype=float)
    dev = v - params.u
    q = np.sum(dev * dev, axis=-1) / (2.0 * params.T)
    return params.rho * (2.0 * math.pi * params.T) ** (-params.dim / 2.0) * np.exp(-q)


def maxwellian_sample(params: MaxwellianParams, count: int, seed: int) -> ParticleMeasure:
    """Equal-weight iid sample of the Maxwellian: count atoms of weight rho/count."""
    if count < 1:
        raise ValueError("sample count must be positive")
    rng = np.random.default_rng(seed)
    v = params.u + math.sqrt(params.T) * rng.standard_normal((count, params.dim))
    return ParticleMeasure(np.full(count, params.rho / count), v)


def maxwellian_moment_norm(params: MaxwellianParams, s: int) -> float:
    """||M||_s for s in {0, 2}: rho and rho (1 + dim T + |u|^2)."""
    if s == 0:
        return params.rho
    if s == 2:
        return params.rho * (1.0 + params.dim * params.T + float(params.u @ params.u))
    raise UnsupportedScheme(f"Maxwellian moment norm supports s in {{0, 2}}, got {s}")


def psi_f0(measure: ParticleMeasure, r: float) -> float:
    """Concentration modulus r + r^(1/3) + sum_{|v_i| > r^(-1/3)} w_i |v_i|^2.

    Vanishes at r = 0 (the tail threshold is +inf there) and is nondecreasing
    in r. It quantifies how much energy the initial datum carries at large
    velocities, which is what controls stability constants.
    """
    if r < 0:
        raise ValueError(f"radius must be >= 0, got {r}")
    if r == 0.0:
        return 0.0
    threshold = r ** (-1.0 / 3.0)
    speed2 = np.sum(measure.velocities**2, axis=1)
    in_tail = speed2 > threshold * threshold
    tail = float(np.sum(measure.weights[in_tail] * speed2[in_tail]))
    return r + r ** (1.0 / 3.0) + tail


def _merged_atom_difference(f: ParticleMeasure, g: ParticleMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Net signed weights of F - G after merging atoms at identical positions."""
    if f.dim != g.dim:
        raise ValueError("measures live in different dimensions")
    pos = np.vstack([f.velocities, g.velocities])
    sgn = np.concatenate([f.weights, -g.weights])
    order = np.lexsort(pos.T[::-1])
    pos, sgn = pos[order], sgn[order]
    new_group = np.ones(pos.shape[0], dtype=bool)
    new_group[1:] = np.any(pos[1:] != pos[:-1], axis=1)
    group_id = np.cumsum(new_group) - 1
    net = np.zeros(int(group_id[-1]) + 1)
    np.add.at(net, group_id, sgn)
    return net, pos[new_group]


def _bin_atoms(measure: ParticleMeasure, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Cell masses of the measure on the lattice of spacing h centered at 0.

    Returns (unique integer cell indices (m, dim), masses (m,)). Cell k
    covers [k h - h/2, k h + h/2) per coordinate, so centers sit at k h.
    """
    idx = np.floor(measure.velocities / h + 0.5).astype(np.int64)
    uniq, inv = np.unique(idx, axis=0, return_inverse=True)
    masses = np.zeros(uniq.shape[0])
    np.add.at(masses, inv, measure.weights)
    return uniq, masses


def gaussian_cell_masses(mean: float, var: float, centers: np.ndarray, h: float) -> np.ndarray:
    """Exact masses of a unit 1d Gaussian over cells [c - h/2, c + h/2)."""
    sd = math.sqrt(var)
    return ndtr((centers + 0.5 * h - mean) / sd) - ndtr((centers - 0.5 * h - mean) / sd)


def measure_distance(
    f: ParticleMeasure,
    g: ParticleMeasure | MaxwellianParams,
    s: int = 2,
    scheme: str = "exact",
    *,
    bin_width: float = 0.25,
    radius: float = 8.0,
) -> float:
    """Weighted distance between F and G in the order-s bracket norm.

    scheme="exact" is the atomically exact total-variation value: merged
    atom differences for two atomic measures, and the mutually singular
    value ||F||_s + ||G||_s against a Maxwellian. scheme="binned" compares
    cell masses on the cubic lattice of spacing ``bin_width``; against a
    Maxwellian the lattice is truncated to the box of half-width ``radius``
    (choose it so the discarded tail is negligible).

    Raises
    ------
    UnsupportedScheme
        For s outside {0, 2} or an unknown scheme name.
    """
    if s not in (0, 2):
        raise UnsupportedScheme(f"distance supports s in {{0, 2}}, got {s}")
    if scheme not in ("exact", "binned"):
        raise UnsupportedScheme(f"unknown distance scheme {scheme!r}")

    if scheme == "exact":
        if isinstance(g, MaxwellianParams):
            return moment_norm(f, s) + maxwellian_moment_norm(g, s)
        net, pos = _merged_atom_difference(f, g)
        return float(np.sum(np.abs(net) * bracket(pos) ** s))

    h = float(bin_width)
    if isinstance(g, ParticleMeasure):
        # both sparse: lattice is implicit, no truncation involved
        net, pos = _merged_atom_difference(
            ParticleMeasure(f.weights, np.floor(f.velocities / h + 0.5)),
            ParticleMeasure(g.weights, np.floor(g.velocities / h + 0.5)),
        )
        return float(np.sum(np.abs(net) * bracket(pos * h) ** s))

    params = g
    dim = f.dim
    n_half = int(math.floor(radius / h))
    centers_1d = h * np.arange(-n_half, n_half + 1)
    per_axis = [
        params.rho ** (1.0 / dim) * gaussian_cell_masses(params.u[d], params.T, centers_1d, h)
        for d in range(dim)
    ]
    # Box totals of M <c>^s via the product structure: sum_c M_c = prod(sums),
    # sum_c M_c |c|^2 = sum_d (second moment along d) * prod of other sums.
    sums = np.array([float(a.sum()) for a in per_axis])
    total_mass = float(np.prod(sums))
    if s == 0:
        m_total = total_mass
    else:
        sec = np.array([float(a @ centers_1d**2) for a in per_axis])
        m_total = total_mass + sum(
            sec[d] * np.prod(sums[np.arange(dim) != d]) for d in range(dim)
        )

    cells, f_mass = _bin_atoms(f, h)
    inside = np.all(np.abs(cells) <= n_half, axis=1)
    m_at_cells = np.zeros(cells.shape[0])
    if np.any(inside):
        offs = cells[inside] + n_half
        vals = np.ones(int(np.sum(inside)))
        for d in range(dim):
            vals = vals * per_axis[d][offs[:, d]]
        m_at_cells[inside] = vals
    centers = cells * h
    wgt = bracket(centers) ** s
    # |F - M| over F-cells, plus M's own weight everywhere it was counted
    # in m_total but overlaps no F-cell.
    return float(np.sum(np.abs(f_mass - m_at_cells) * wgt) + m_total - np.sum(m_at_cells * wgt))


def save_measure(measure: ParticleMeasure, path: str | Path) -> None:
    """Write atoms as CSV with header ``weight,v1,...,vN``."""
    header = "weight," + ",".join(f"v{i + 1}" for i in range(measure.dim))
    data = np.column_stack([measure.weights, measure.velocities])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def load_measure(path: str | Path) -> ParticleMeasure:
    """Read atoms from the CSV layout written by :func:`save_measure`."""
    with open(path) as fh:
        header = fh.readline().strip()
    cols = header.split(",")
    if cols[0] != "weight" or any(c != f"v{i + 1}" for i, c in enumerate(cols[1:])):
        raise ValueError(f"unexpected measure CSV header: {header!r}")
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    return ParticleMeasure(data[:, 0], data[:, 1:])
