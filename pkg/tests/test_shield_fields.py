import numpy as np
import pytest
from scipy import integrate

from geometry import ToroidalPoint, frame_at, shield_distance, to_cartesian, to_toroidal
from shield_fields import (
    FieldProfile,
    in_field_band,
    magnetic_field,
    profile_a,
    profile_tail_integral,
    pure_band_width,
    sample_shell,
    smoothstep,
    smoothstep_prime,
    vector_potential,
    verification_samples,
    verify_curl,
    verify_divergence,
)
from utils import SingularityError


@pytest.fixture
def profile(torus):
    return FieldProfile.for_geometry(torus)


def test_blend_radii(torus):
    assert torus.blend_r1 == pytest.approx(0.6875)
    assert torus.blend_r2 == pytest.approx(0.875)


def test_profile_pure_power(profile):
    a, _ = profile_a(0.6, profile)
    assert a == pytest.approx(1e4, rel=1e-12)


def test_profile_vanishes_beyond_band(profile):
    assert profile_a(0.875, profile) == (0.0, 0.0)
    assert profile_a(1.7, profile) == (0.0, 0.0)


def test_profile_derivative_matches_finite_difference(profile):
    h = 1e-6
    for r in np.linspace(0.69, 0.87, 13):
        _, a_prime = profile_a(r, profile)
        fd = (profile_a(r + h, profile)[0] - profile_a(r - h, profile)[0]) / (2 * h)
        assert a_prime == pytest.approx(fd, rel=1e-6)


def test_profile_positive_and_decreasing(profile):
    r = np.linspace(0.501, 0.8749, 2000)
    a, a_prime = profile_a(r, profile)
    assert np.all(a > 0)
    assert np.all(np.diff(a) < 0)
    assert np.all(a_prime < 0)


def test_profile_singular_inside(profile):
    with pytest.raises(SingularityError):
        profile_a(0.5, profile)
    with pytest.raises(SingularityError):
        profile_a(np.array([0.7, 0.4]), profile)


def test_smoothstep_endpoints():
    assert smoothstep(0.0) == 1.0
    assert smoothstep(1.0) == 0.0
    assert smoothstep_prime(0.0) == 0.0
    assert smoothstep_prime(1.0) == 0.0
    assert smoothstep_prime(0.5) == pytest.approx(-1.875)


def test_tail_integral_matches_quadrature(profile):
    for r in (0.55, 0.65, 0.7, 0.8, 0.87):
        expected, _ = integrate.quad(
            lambda s: profile_a(s, profile)[0], r, profile.blend_r2, points=[profile.blend_r1], limit=200
        )
        assert profile_tail_integral(r, profile) == pytest.approx(expected, rel=1e-9)
    assert profile_tail_integral(0.9, profile) == 0.0


def test_torus_vector_potential_example(torus):
    A = vector_potential(np.array([2.6, 0.0, 0.0]), torus)
    np.testing.assert_allclose(A, [0.0, 1e4 / 2.6, 0.0], rtol=1e-12, atol=1e-9)
    assert A[1] == pytest.approx(3846.1538, rel=1e-7)


def test_torus_magnetic_field_example(torus):
    B = magnetic_field(np.array([2.6, 0.0, 0.0]), torus)
    np.testing.assert_allclose(B, [0.0, 0.0, -4e5 / 2.6], rtol=1e-12, atol=1e-6)
    assert B[2] == pytest.approx(-153846.15, rel=1e-7)


def test_torus_fields_zero_outside_band(torus):
    x = np.array([[3.0, 0.0, 0.0], [0.0, -3.2, 0.1]])
    np.testing.assert_array_equal(vector_potential(x, torus), 0.0)
    np.testing.assert_array_equal(magnetic_field(x, torus), 0.0)


def test_torus_field_directions(torus, rng):
    x = sample_shell(torus, 500, 0.02, 0.4, rng)
    f = frame_at(to_toroidal(x, torus.R))
    A = vector_potential(x, torus)
    B = magnetic_field(x, torus)
    scale_A = np.linalg.norm(A, axis=1) + 1.0
    scale_B = np.linalg.norm(B, axis=1) + 1.0
    assert np.max(np.abs(np.sum(A * f.e_r, axis=1)) / scale_A) < 1e-12
    assert np.max(np.abs(np.sum(A * f.e_alpha, axis=1)) / scale_A) < 1e-12
    assert np.max(np.abs(np.sum(B * f.e_r, axis=1)) / scale_B) < 1e-12
    assert np.max(np.abs(np.sum(B * f.e_theta, axis=1)) / scale_B) < 1e-12


def test_cylinder_field_example(cylinder):
    B = magnetic_field(np.array([0.0, np.sqrt(0.5), 0.0]), cylinder)
    np.testing.assert_allclose(B, [4.0, 0.0, 0.0], rtol=1e-12)


def test_fields_singular_on_or_inside(torus, cylinder, halfspace):
    with pytest.raises(SingularityError):
        magnetic_field(np.array([2.3, 0.0, 0.0]), torus)
    with pytest.raises(SingularityError):
        vector_potential(np.array([2.5, 0.0, 0.0]), torus)
    with pytest.raises(SingularityError):
        magnetic_field(np.array([0.0, 1.0, 0.0]), cylinder)
    with pytest.raises(SingularityError):
        magnetic_field(np.array([0.0, 1.0, 1.0]), halfspace)


def test_verify_curl_torus(torus, rng):
    samples = sample_shell(torus, 1000, 0.05, 0.15, rng)
    assert verify_curl(torus, samples, h=1e-5) < 1e-5


def test_verify_curl_cylinder_interior_band(cylinder, rng):
    n = 1000
    rho = np.sqrt(rng.uniform(0.2, 0.8, n))
    phi = rng.uniform(0, 2 * np.pi, n)
    samples = np.stack((rng.uniform(-1, 1, n), rho * np.cos(phi), rho * np.sin(phi)), axis=-1)
    assert verify_curl(cylinder, samples, h=1e-5) < 1e-6


@pytest.mark.parametrize("kind", ["torus", "cylinder", "halfspace"])
def test_curl_and_divergence_all_geometries(kind, request, rng):
    g = request.getfixturevalue(kind)
    samples = verification_samples(g, 1000, rng)
    assert verify_curl(g, samples) < 1e-5
    assert verify_divergence(g, samples) < 1e-5


def test_verification_samples_avoid_the_blend(torus, cylinder, halfspace, rng):
    assert pure_band_width(torus) == pytest.approx(0.1875)
    assert pure_band_width(halfspace) == pytest.approx(0.5)
    for g in (torus, cylinder, halfspace):
        x = verification_samples(g, 300, rng)
        d = shield_distance(x, g)
        assert d.min() >= 0.25 * pure_band_width(g) - 1e-12
        assert d.max() <= 0.8 * pure_band_width(g) + 1e-12
        B = np.linalg.norm(magnetic_field(x, g), axis=1)
        assert np.all(B > 0)


def test_verify_curl_zero_region(torus):
    samples = np.array([[3.5, 0.0, 0.0], [0.0, 3.4, 0.2]])
    assert verify_curl(torus, samples) == 0.0
    assert verify_curl(torus, np.zeros((0, 3))) == 0.0


def test_field_grows_toward_shield(torus):
    r = np.linspace(0.68, 0.5005, 400)
    x = to_cartesian(ToroidalPoint(r, np.full_like(r, 0.3), np.full_like(r, 1.1)), torus.R)
    B = np.linalg.norm(magnetic_field(x, torus), axis=1)
    assert np.all(np.diff(B) > 0)


def test_field_continuous_across_blend_radii(torus):
    delta = 1e-12
    for r_edge in (torus.blend_r1, torus.blend_r2):
        r = np.array([r_edge - delta, r_edge + delta])
        x = to_cartesian(ToroidalPoint(r, np.zeros(2), np.full(2, 0.4)), torus.R)
        B = magnetic_field(x, torus)
        ref = np.linalg.norm(magnetic_field(to_cartesian(ToroidalPoint(torus.blend_r1, 0.0, 0.4), torus.R), torus))
        assert np.linalg.norm(B[0] - B[1]) <= 1e-8 * ref


def test_sample_shell_respects_band(torus, cylinder, halfspace, rng):
    for g in (torus, cylinder, halfspace):
        x = sample_shell(g, 200, 0.1, 0.3, rng)
        d = shield_distance(x, g)
        assert np.all(d >= 0.1 - 1e-12) and np.all(d <= 0.3 + 1e-12)


def test_in_field_band(torus, halfspace):
    assert in_field_band(np.array([2.6, 0.0, 0.0]), torus)
    assert not in_field_band(np.array([3.0, 0.0, 0.0]), torus)
    assert in_field_band(np.array([-0.5, 0.0, 0.0]), halfspace)
    assert not in_field_band(np.array([-1.5, 0.0, 0.0]), halfspace)
