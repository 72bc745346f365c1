"""Kernel spec, cutoff constants, post-collision map, sphere quadrature."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boltzkit.errors import NonPositiveA0
from boltzkit.kernel import (
    AngularLaw,
    KernelSpec,
    compute_a0,
    compute_a2,
    normalize_b,
    orthonormal_frame,
    post_collision,
    sphere_area,
    sphere_integrate,
    sphere_nodes,
    zeta,
)


def test_sphere_area_known_values() -> None:
    assert sphere_area(1) == pytest.approx(2.0, rel=1e-14)
    assert sphere_area(2) == pytest.approx(2.0 * math.pi, rel=1e-14)
    assert sphere_area(3) == pytest.approx(4.0 * math.pi, rel=1e-14)
    assert sphere_area(4) == pytest.approx(2.0 * math.pi**2, rel=1e-14)


def test_a0_constant_closed_forms() -> None:
    # b == 1 integrates the bare surface measure: a0 = |S^{dim-1}|.
    one = AngularLaw("constant", (1.0,))
    for dim in (2, 3, 4, 5):
        assert compute_a0(dim, one) == pytest.approx(sphere_area(dim), rel=1e-12)
    assert compute_a0(3, one) == pytest.approx(4.0 * math.pi, rel=1e-13)


def test_a2_known_values() -> None:
    one = AngularLaw("constant", (1.0,))
    assert compute_a2(3, one) == pytest.approx(8.0 * math.pi / 3.0, rel=1e-13)
    iso = AngularLaw("constant", (1.0 / (4.0 * math.pi),))
    assert compute_a2(3, iso) == pytest.approx(2.0 / 3.0, rel=1e-13)


def test_a0_polynomial_matches_quadrature() -> None:
    # b(t) = 1 + t^2: int_{-1}^1 (1+t^2) dt = 8/3, times |S^1| = 2 pi.
    law = AngularLaw("polynomial-in-t", (1.0, 0.0, 1.0))
    assert compute_a0(3, law) == pytest.approx(2.0 * math.pi * 8.0 / 3.0, rel=1e-13)


def test_a0_tabulated_matches_polynomial() -> None:
    # Piecewise-linear interpolation of a linear function is exact, so the
    # tabulated route must agree with the polynomial route to rounding.
    lin = AngularLaw("polynomial-in-t", (1.0, 0.5))
    tab = AngularLaw("tabulated", ((-1.0, 0.5), (0.25, 1.125), (1.0, 1.5)))
    for dim in (2, 3, 4):
        assert compute_a0(dim, tab) == pytest.approx(compute_a0(dim, lin), rel=1e-12)
        assert compute_a2(dim, tab) == pytest.approx(compute_a2(dim, lin), rel=1e-12)


def test_a0_rejects_zero_law() -> None:
    with pytest.raises(NonPositiveA0):
        compute_a0(3, AngularLaw("constant", (0.0,)))


def test_angular_law_rejects_negative() -> None:
    with pytest.raises(ValueError):
        AngularLaw("polynomial-in-t", (0.0, 1.0))  # b(t) = t < 0 for t < 0


def test_normalize_b_sets_a0_to_one_and_is_idempotent() -> None:
    spec = KernelSpec(3, 1.0, AngularLaw("polynomial-in-t", (0.3, 0.0, 2.0)))
    spec1 = normalize_b(spec)
    assert spec1.a0 == pytest.approx(1.0, abs=1e-12)
    spec2 = normalize_b(spec1)
    assert spec2.a0 == pytest.approx(1.0, abs=1e-12)
    p1 = np.asarray(spec1.angular.params)
    p2 = np.asarray(spec2.angular.params)
    assert np.max(np.abs(p1 - p2)) <= 1e-12 * np.max(np.abs(p1))


def test_kernel_spec_validation() -> None:
    law = AngularLaw("constant", (1.0,))
    with pytest.raises(ValueError):
        KernelSpec(1, 1.0, law)
    with pytest.raises(ValueError):
        KernelSpec(3, 0.0, law)
    with pytest.raises(ValueError):
        KernelSpec(3, 2.5, law)
    spec = KernelSpec(3, 2.0, law)
    assert spec.b_sup == spec.b_inf == 1.0


def test_kernel_json_round_trip(tmp_path) -> None:
    from boltzkit.kernel import dump_kernel, load_kernel

    for law in (
        AngularLaw("constant", (0.25,)),
        AngularLaw("polynomial-in-t", (1.0, 0.0, -0.5)),
        AngularLaw("tabulated", ((-1.0, 1.0), (0.0, 2.0), (1.0, 1.0))),
    ):
        spec = KernelSpec(3, 1.5, law)
        path = tmp_path / "k.json"
        dump_kernel(spec, path)
        back = load_kernel(path)
        assert back.dim == spec.dim and back.gamma == spec.gamma
        assert back.angular == spec.angular
        # derived constants are recomputed, not stored
        assert back.a0 == pytest.approx(spec.a0, rel=1e-14)
        assert back.a2 == pytest.approx(spec.a2, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    v=arrays(np.float64, 3, elements=st.floats(-20, 20)),
    vs=arrays(np.float64, 3, elements=st.floats(-20, 20)),
    raw=arrays(np.float64, 3, elements=st.floats(-1, 1)),
)
def test_post_collision_conserves_momentum_and_energy(v, vs, raw) -> None:
    if np.linalg.norm(raw) < 1e-3:
        raw = np.array([1.0, 0.0, 0.0])
    sigma = raw / np.linalg.norm(raw)
    vp, vsp = post_collision(v, vs, sigma)
    scale = 1.0 + np.linalg.norm(v) ** 2 + np.linalg.norm(vs) ** 2
    assert np.linalg.norm((vp + vsp) - (v + vs)) <= 1e-12 * scale
    assert abs(
        (np.linalg.norm(vp) ** 2 + np.linalg.norm(vsp) ** 2)
        - (np.linalg.norm(v) ** 2 + np.linalg.norm(vs) ** 2)
    ) <= 1e-11 * scale


def test_post_collision_broadcasts() -> None:
    rng = np.random.default_rng(0)
    v = rng.normal(size=(5, 3))
    vs = rng.normal(size=(5, 3))
    sig = rng.normal(size=(5, 3))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    vp, vsp = post_collision(v, vs, sig)
    assert vp.shape == (5, 3)
    np.testing.assert_allclose(vp + vsp, v + vs, atol=1e-12)


def test_orthonormal_frame_properties() -> None:
    rng = np.random.default_rng(1)
    for dim in (2, 3, 4, 6):
        for _ in range(20):
            n = rng.normal(size=dim)
            n /= np.linalg.norm(n)
            fr = orthonormal_frame(n)
            assert fr.shape == (dim - 1, dim)
            np.testing.assert_allclose(fr @ n, 0.0, atol=1e-12)
            np.testing.assert_allclose(fr @ fr.T, np.eye(dim - 1), atol=1e-12)
    # near-axis vectors must not destabilize the construction
    n = np.array([1.0, 1e-14, -1e-14])
    fr = orthonormal_frame(n)
    np.testing.assert_allclose(fr @ fr.T, np.eye(2), atol=1e-12)


def test_sphere_nodes_weights_sum_to_area() -> None:
    for dim in (2, 3, 4, 5):
        _, w = sphere_nodes(dim, n_polar=12, n_azimuth=24)
        assert w.sum() == pytest.approx(sphere_area(dim), rel=1e-12)


def test_sphere_integrate_polynomials() -> None:
    # odd monomials vanish; (n.sigma)^2 integrates to |S^{dim-1}|/dim
    for dim in (3, 4):
        assert sphere_integrate(lambda s: s[:, 0], dim) == pytest.approx(0.0, abs=1e-12)
        val = sphere_integrate(lambda s: s[:, 0] ** 2, dim)
        assert val == pytest.approx(sphere_area(dim) / dim, rel=1e-12)
        mixed = sphere_integrate(lambda s: s[:, 0] * s[:, 1], dim)
        assert mixed == pytest.approx(0.0, abs=1e-12)


def test_sphere_nodes_axis_polar_alignment() -> None:
    # with an explicit axis, the polar cosine of each node is a Gauss node,
    # so integrating g(axis . sigma) must match the 1d reduction exactly
    axis = np.array([1.0, 2.0, -0.5])
    axis /= np.linalg.norm(axis)
    pts, w = sphere_nodes(3, n_polar=16, n_azimuth=8, axis=axis)
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    val = float(w @ (pts @ axis) ** 4)
    # int_{S^2} t^4 dsigma = 2 pi int_{-1}^{1} t^4 dt = 4 pi / 5
    assert val == pytest.approx(4.0 * math.pi / 5.0, rel=1e-12)


def test_sphere_integrate_smooth_function_converges() -> None:
    # e^{s_z} over S^2 has closed form 2 pi (e - 1/e)
    target = 2.0 * math.pi * (math.e - 1.0 / math.e)
    val = sphere_integrate(lambda s: np.exp(s[:, 2]), 3, n_polar=24, n_azimuth=24)
    assert val == pytest.approx(target, rel=1e-12)


def test_zeta_values() -> None:
    t = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    np.testing.assert_allclose(zeta(t, 3), [1.0, 1.0, 1.0, 1.0, 0.0])
    np.testing.assert_allclose(zeta(0.5, 5), 0.75)
    assert zeta(2.0, 5) == 0.0
