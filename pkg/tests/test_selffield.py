import math

import numpy as np
import pytest

from ensemble import Ensemble
from selffield import (
    FieldParams,
    efield_all,
    efield_at,
    efield_points,
    fit_quasi_lipschitz,
    kinetic_energy,
    particle_potentials,
    potential_energy,
)


def pair(sigma=(1.0, 1.0), weight=1.0, gap=1.0):
    x = np.array([[0.0, 0.0, 0.0], [gap, 0.0, 0.0]])
    return Ensemble.from_arrays(x, np.zeros((2, 3)), sigma, weight)


def test_coulomb_point_charge():
    e = Ensemble.from_arrays([[0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0]], 1.0, 1.0)
    np.testing.assert_allclose(efield_at([1.0, 0.0, 0.0], e, FieldParams()), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(efield_at([0.0, -2.0, 0.0], e, FieldParams()), [0.0, -0.25, 0.0])
    E = efield_at([1.0, 0.0, 0.0], e, FieldParams(epsilon=1.0))
    assert E[0] == pytest.approx(2.0**-1.5)


def test_self_interaction_excluded():
    e = pair()
    E = efield_all(e, FieldParams())
    np.testing.assert_allclose(E, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    assert np.all(np.isfinite(efield_all(e, FieldParams(epsilon=0.0))))


def test_efield_all_matches_single_target_bitwise(two_sign_ensemble):
    p = FieldParams(epsilon=0.05)
    E = efield_all(two_sign_ensemble, p)
    for k in range(0, len(two_sign_ensemble), 7):
        assert np.array_equal(E[k], efield_at(two_sign_ensemble.x[k], two_sign_ensemble, p, skip=k))


def test_equal_charges_push_apart_symmetrically():
    e = pair(gap=0.7)
    E = efield_all(e, FieldParams(epsilon=0.1))
    np.testing.assert_allclose(E[0], -E[1], rtol=1e-15)
    assert E[1][0] > 0


def test_total_force_vanishes(two_sign_ensemble):
    e = two_sign_ensemble
    E = efield_all(e, FieldParams(epsilon=0.02))
    force = np.sum(e.charge[:, None] * E, axis=0)
    scale = np.sum(np.abs(e.charge)[:, None] * np.abs(E))
    assert np.linalg.norm(force) <= 1e-12 * scale


def test_field_translation_invariant(same_sign_ensemble):
    p = FieldParams(epsilon=0.05)
    shifted = same_sign_ensemble.copy()
    shifted.x = shifted.x + np.array([3.0, -1.0, 2.0])
    np.testing.assert_allclose(
        efield_all(shifted, p), efield_all(same_sign_ensemble, p), rtol=1e-9, atol=1e-12
    )


def test_points_equal_field_without_exclusion():
    e = pair()
    pts = np.array([[0.5, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    E = efield_points(pts, e, FieldParams())
    for k in range(2):
        np.testing.assert_array_equal(E[k], efield_at(pts[k], e, FieldParams()))


def test_potential_energy_examples():
    assert potential_energy(pair(), FieldParams()) == pytest.approx(1.0)
    assert potential_energy(pair(sigma=(1.0, -0.5)), FieldParams()) == pytest.approx(-0.5)
    assert potential_energy(pair(gap=3.0), FieldParams(epsilon=4.0)) == pytest.approx(0.2)
    assert potential_energy(Ensemble.empty(), FieldParams()) == 0.0


def test_potential_energy_positive_for_same_sign(same_sign_ensemble):
    p = FieldParams(epsilon=0.05)
    phi = particle_potentials(same_sign_ensemble, p)
    assert np.all(phi > 0)
    assert potential_energy(same_sign_ensemble, p) > 0


def test_kinetic_energy():
    e = Ensemble.from_arrays([[0.0, 0.0, 0.0]], [[1.0, 2.0, 2.0]], 1.0, 2.0)
    assert kinetic_energy(e) == pytest.approx(9.0)
    assert kinetic_energy(Ensemble.empty()) == 0.0


def test_softening_rejects_negative():
    with pytest.raises(ValueError):
        FieldParams(epsilon=-1.0)
    with pytest.raises(ValueError):
        FieldParams(exclusion=False)


def test_quasi_lipschitz_modulus_finite(same_sign_ensemble, rng):
    K, s, ratio = fit_quasi_lipschitz(same_sign_ensemble, FieldParams(epsilon=0.05), rng, n_pairs=300)
    assert math.isfinite(K) and K > 0
    assert len(s) == len(ratio) == 300
    assert np.all((s >= 1e-4) & (s <= 1e-1))
