import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynamics import (
    FrozenField,
    StepPolicy,
    StepStats,
    advance,
    boris_velocity,
    distance_rate,
    flow_jacobian,
    magnetic_flow,
    push_boris,
    reference_orbit,
    substep_limit,
    turning_point,
)
from ensemble import Ensemble
from geometry import ShieldGeometry, shield_distance
from selffield import FieldParams
from shield_fields import magnetic_field, sample_shell, vector_potential, verification_samples
from utils import PenetrationError, StiffnessError

X0 = np.array([2.8, 0.0, 0.0])
V0 = np.array([-1.0, 0.4, 0.2])


def single(x=X0, v=V0, sigma=1.0):
    return Ensemble.from_arrays([x], [v], sigma, 1.0)


def canonical_z(x, v, sigma, g):
    A = vector_potential(x, g)
    return np.cross(x, v)[..., 2] + sigma * np.cross(x, A)[..., 2]


def test_boris_quarter_turn():
    v = boris_velocity(np.array([1.0, 0.0, 0.0]), 1.0, 0.0, np.array([0.0, 0.0, 1.0]), math.pi / 2)
    np.testing.assert_allclose(v, [0.0, -1.0, 0.0], atol=1e-15)


def test_boris_pure_kick_is_exact():
    v = boris_velocity(np.zeros(3), 1.0, np.array([1.0, -2.0, 0.5]), np.zeros(3), 0.5)
    np.testing.assert_array_equal(v, [0.5, -1.0, 0.25])
    v = boris_velocity(np.zeros(3), -0.5, np.array([1.0, 0.0, 0.0]), np.zeros(3), 0.25)
    np.testing.assert_array_equal(v, [-0.125, 0.0, 0.0])


def test_boris_preserves_speed_without_electric_field(rng):
    v = rng.normal(size=(32, 3))
    speed0 = np.linalg.norm(v, axis=1)
    B = rng.normal(size=(32, 3)) * 50.0
    for _ in range(10_000):
        v = boris_velocity(v, 1.0, 0.0, B, 0.013, speed=speed0)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), speed0, rtol=1e-13)


def test_boris_accepts_one_step_per_particle(rng):
    v = rng.normal(size=(5, 3))
    E = rng.normal(size=(5, 3))
    B = rng.normal(size=(5, 3)) * 20.0
    sigma = np.array([1.0, -1.0, 0.5, 2.0, 1.0])
    dt = np.array([0.01, 0.002, 0.05, 1e-4, 0.0])
    out = boris_velocity(v, sigma, E, B, dt)
    assert out.shape == (5, 3)
    for k in range(5):
        np.testing.assert_allclose(out[k], boris_velocity(v[k], sigma[k], E[k], B[k], dt[k]), rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(out[4], v[4])


components = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
vectors = st.tuples(components, components, components)


@settings(max_examples=200, deadline=None)
@given(v=vectors, B=vectors, sigma=st.sampled_from([-1.0, 0.5, 2.0]), dt=st.floats(min_value=1e-4, max_value=0.5))
def test_boris_rotation_keeps_speed(v, B, sigma, dt):
    out = boris_velocity(np.array(v), sigma, 0.0, np.array(B), dt)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(v), rel=1e-14, abs=1e-12)


def test_push_is_reversible(rng):
    x = rng.normal(size=(8, 3))
    v = rng.normal(size=(8, 3))
    E = rng.normal(size=(8, 3))
    B = rng.normal(size=(8, 3)) * 10.0
    x1, v1 = push_boris(x, v, 0.7, E, B, 0.05)
    x2, v2 = push_boris(x1, v1, 0.7, E, B, -0.05)
    np.testing.assert_allclose(x2, x, atol=1e-14)
    np.testing.assert_allclose(v2, v, atol=1e-13)


def test_substep_limit_respects_rotation_and_distance(torus):
    sp = StepPolicy()
    x = np.array([[2.6, 0.0, 0.0], [3.5, 0.0, 0.0]])
    v = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    h = substep_limit(x, v, np.ones(2), torus, sp, np.full(2, 0.01))
    omega = np.linalg.norm(magnetic_field(x[0], torus))
    assert h[0] == pytest.approx(min(sp.c_rot / omega, sp.c_dist * 0.1))
    assert h[1] == 0.01


def test_free_streaming_without_shield():
    g = ShieldGeometry.none()
    e, records = advance(single(v=[1.0, -2.0, 0.5]), g, FieldParams(), StepPolicy(dt_macro=0.1), 1.0, progress=False)
    np.testing.assert_allclose(e.x[0], X0 + np.array([1.0, -2.0, 0.5]), atol=1e-12)
    assert e.t == pytest.approx(1.0)
    assert records == []


def test_empty_ensemble_is_a_noop(torus):
    e, records = advance(Ensemble.empty(), torus, FieldParams(), StepPolicy(), 1.0, progress=False)
    assert len(e) == 0
    assert records == []


def test_hooks_see_every_macro_step(torus):
    seen = []

    def hook(step, t, e, E):
        seen.append((step, t, E.shape))

    e, _ = advance(single(), torus, FieldParams(), StepPolicy(dt_macro=0.01), 0.095, hooks=(hook,), progress=False)
    assert [s for s, _, _ in seen] == list(range(11))
    assert seen[-1][1] == pytest.approx(0.095)
    assert seen[0][2] == (1, 3)
    assert e.meta["substeps"] >= 10


def test_single_particle_is_deflected_by_shield(torus):
    e0 = single(v=[-5.0, 0.0, 0.0])
    e, _ = advance(e0, torus, FieldParams(), StepPolicy(dt_macro=0.01), 0.5, progress=False)
    assert shield_distance(e.x[0], torus) > 0
    assert np.linalg.norm(e.v[0]) == pytest.approx(5.0, rel=1e-10)
    assert canonical_z(e.x[0], e.v[0], 1.0, torus) == pytest.approx(
        canonical_z(e0.x[0], e0.v[0], 1.0, torus), rel=1e-2
    )


def test_oversized_step_penetrates():
    weak = ShieldGeometry.torus(R=2.0, r0=0.5, tau=0.5)
    sp = StepPolicy(dt_macro=0.02, c_dist=0.0)
    with pytest.raises(PenetrationError) as err:
        advance(single(v=[-40.0, 0.0, 0.0]), weak, FieldParams(), sp, 0.1, progress=False)
    assert err.value.particle_id == 0
    assert shield_distance(err.value.x, weak) <= 0.0


def test_start_inside_shield_penetrates(torus):
    with pytest.raises(PenetrationError):
        advance(single(x=[2.3, 0.0, 0.0]), torus, FieldParams(), StepPolicy(), 0.1, progress=False)


def test_floor_hits_raise_stiffness(torus):
    sp = StepPolicy(dt_macro=0.01, dt_floor=0.5, max_floor_hits=1)
    with pytest.raises(StiffnessError) as err:
        advance(single(), torus, FieldParams(), sp, 0.01, progress=False)
    assert err.value.floor_hits == 1


def test_magnetic_flow_records_stats(torus):
    x = np.array([X0])
    v = np.array([V0])
    stats = StepStats()
    magnetic_flow(x, v, np.ones(1), np.zeros(1, dtype=np.int64), torus, 0.05, StepPolicy(), stats=stats)
    assert stats.substeps == stats.max_substeps >= 1
    assert np.linalg.norm(v[0]) == pytest.approx(np.linalg.norm(V0), rel=1e-12)


def test_magnetic_flow_mixed_substeps_match_single_runs(torus, rng):
    x0 = np.vstack((verification_samples(torus, 3, rng), [[10.0, 0.0, 0.0]]))
    v0 = np.vstack((rng.normal(size=(3, 3)), [[0.0, 1.0, 0.0]]))
    sigma = np.array([1.0, -0.5, 2.0, 1.0])
    ids = np.arange(4, dtype=np.int64)
    sp = StepPolicy()
    x, v = x0.copy(), v0.copy()
    stats = StepStats()
    magnetic_flow(x, v, sigma, ids, torus, 0.02, sp, stats=stats)
    assert 1 < stats.max_substeps
    assert stats.substeps < 4 * stats.max_substeps
    np.testing.assert_allclose(x[3], x0[3] + 0.02 * v0[3], rtol=1e-14)
    for k in range(4):
        xk, vk = x0[k : k + 1].copy(), v0[k : k + 1].copy()
        magnetic_flow(xk, vk, sigma[k : k + 1], ids[k : k + 1], torus, 0.02, sp)
        np.testing.assert_allclose(x[k], xk[0], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(v[k], vk[0], rtol=1e-12, atol=1e-12)


def test_advance_with_mixed_substeps(torus, rng):
    x = np.vstack((verification_samples(torus, 2, rng), [[10.0, 0.0, 0.0]]))
    v = np.vstack((rng.normal(size=(2, 3)), [[0.0, 1.0, 0.0]]))
    e0 = Ensemble.from_arrays(x, v, 1.0, 1e-30)
    e, _ = advance(e0, torus, FieldParams(epsilon=0.1), StepPolicy(dt_macro=0.01), 0.05, progress=False)
    assert e.meta["max_substeps_per_macro"] > 1
    np.testing.assert_allclose(e.x[2], x[2] + 0.05 * v[2], rtol=1e-12)
    for k in range(2):
        ek, _ = advance(e0.subset(np.arange(3) == k), torus, FieldParams(epsilon=0.1), StepPolicy(dt_macro=0.01), 0.05, progress=False)
        np.testing.assert_allclose(e.x[k], ek.x[0], rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(e.v[k]), np.linalg.norm(v[k]), rtol=1e-12)


def test_magnetic_flow_does_no_work(torus, rng):
    x = sample_shell(torus, 32, 0.25, 0.3, rng)
    v = rng.normal(size=(32, 3))
    speed0 = np.linalg.norm(v, axis=1)
    stats = StepStats()
    magnetic_flow(x, v, np.ones(32), np.arange(32, dtype=np.int64), torus, 0.1, StepPolicy(c_rot=0.01), stats=stats)
    assert stats.max_substeps > 5000
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), speed0, rtol=1e-13)


def test_synchronized_mode_runs(two_sign_ensemble, torus):
    sp = StepPolicy(dt_macro=0.005, freeze_E=False)
    e, _ = advance(two_sign_ensemble, torus, FieldParams(epsilon=0.05), sp, 0.01, progress=False)
    assert np.all(np.isfinite(e.x)) and np.all(np.isfinite(e.v))
    assert e.t == pytest.approx(0.01)


def test_flow_preserves_phase_volume(torus, rng):
    x = sample_shell(torus, 100, 0.3, 0.37, rng)
    v = 0.5 * rng.normal(size=(100, 3))
    dets = np.array([flow_jacobian(x[k], v[k], 1.0, torus, None, 0.05) for k in range(100)])
    np.testing.assert_allclose(dets, 1.0, rtol=0.0, atol=1e-6)


def test_flow_with_frozen_field_preserves_phase_volume(torus, two_sign_ensemble, rng):
    field = FrozenField(two_sign_ensemble, FieldParams(epsilon=0.2))
    x = sample_shell(torus, 4, 0.3, 0.37, rng)
    v = 0.5 * rng.normal(size=(4, 3))
    for k in range(4):
        assert flow_jacobian(x[k], v[k], -1.0, torus, field, 0.05) == pytest.approx(1.0, abs=1e-5)


def test_free_flow_jacobian_is_one():
    det = flow_jacobian(X0, V0, 1.0, ShieldGeometry.none(), None, 1.0)
    assert det == pytest.approx(1.0, abs=1e-9)


def test_distance_rate_signs(torus, halfspace):
    assert distance_rate(X0, np.array([-1.0, 0.0, 0.0]), torus) == pytest.approx(-1.0)
    assert distance_rate(X0, np.array([0.0, 1.0, 0.0]), torus) == pytest.approx(0.0)
    assert distance_rate(np.array([-1.0, 0.0, 0.0]), np.array([2.0, 0.0, 0.0]), halfspace) == -2.0


def test_reference_orbit_conserves_canonical_momentum(torus):
    sol = reference_orbit(X0, V0, 1.0, torus, 1.0)
    assert sol.success
    p0 = canonical_z(X0, V0, 1.0, torus)
    for t in np.linspace(0.0, 1.0, 11):
        y = sol.sol(t)
        assert canonical_z(y[:3], y[3:], 1.0, torus) == pytest.approx(p0, rel=1e-7, abs=1e-7)
        assert np.linalg.norm(y[3:]) == pytest.approx(np.linalg.norm(V0), rel=1e-8)


def test_turning_point_stays_outside(torus):
    hit = turning_point(X0, np.array([-3.0, 0.0, 0.0]), 1.0, torus, 1.0)
    assert hit is not None
    t, d = hit
    assert 0.0 < t < 1.0
    assert 0.0 < d < 0.3
    assert turning_point(np.array([3.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 1.0, torus, 0.5) is None


def test_second_order_convergence(torus):
    T = 0.3
    exact = reference_orbit(X0, V0, 1.0, torus, T).sol(T)

    def error(c):
        x = np.array([X0])
        v = np.array([V0])
        sp = StepPolicy(c_rot=c, c_dist=c / 2)
        magnetic_flow(x, v, np.ones(1), np.zeros(1, dtype=np.int64), torus, T, sp)
        return np.linalg.norm(x[0] - exact[:3])

    coarse, fine = error(0.04), error(0.02)
    assert fine < coarse
    assert 2.5 < coarse / fine < 6.0


@pytest.mark.slow
def test_same_sign_plasma_never_reaches_torus(same_sign_ensemble, torus):
    closest = []

    def hook(step, t, e, E):
        closest.append(float(np.min(shield_distance(e.x, torus))))

    advance(same_sign_ensemble, torus, FieldParams(epsilon=0.05), StepPolicy(), 0.5, hooks=(hook,), progress=False)
    assert len(closest) == 51
    assert min(closest) > 0.0


@pytest.mark.slow
def test_two_sign_energy_drift(two_sign_ensemble, torus):
    from selffield import kinetic_energy, potential_energy

    fp = FieldParams(epsilon=0.05)
    totals = []

    def hook(step, t, e, E):
        totals.append(kinetic_energy(e) + potential_energy(e, fp))

    advance(two_sign_ensemble, torus, fp, StepPolicy(dt_macro=0.01), 1.0, hooks=(hook,), progress=False)
    drift = np.abs(np.array(totals) - totals[0]) / abs(totals[0])
    assert drift.max() <= 1e-3


def repelling_pair():
    x = [[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]]
    v = [[0.0, 0.3, 0.0], [0.0, -0.3, 0.0]]
    return Ensemble.from_arrays(x, v, 1.0, 1.0)


def run_pair_history(dt):
    from selffield import kinetic_energy, potential_energy

    fp = FieldParams(epsilon=0.1)
    t, v, E, total = [], [], [], []

    def hook(step, time, e, field):
        t.append(time)
        v.append(e.v.copy())
        E.append(field.copy())
        total.append(kinetic_energy(e) + potential_energy(e, fp))

    advance(repelling_pair(), ShieldGeometry.none(), fp, StepPolicy(dt_macro=dt), 1.0, hooks=(hook,), progress=False)
    return np.array(t), np.array(v), np.array(E), np.array(total)


def test_speed_work_residual_is_second_order():
    from diagnostics import speed_work_residual

    residuals = []
    for dt in (0.02, 0.01):
        t, v, E, _ = run_pair_history(dt)
        residuals.append(speed_work_residual(t, v, E, np.ones(2)).max())
    coarse, fine = residuals
    assert coarse <= 1e-3
    assert 3.5 <= coarse / fine <= 4.5


def test_energy_error_is_second_order():
    errors = []
    for dt in (0.02, 0.01):
        *_, total = run_pair_history(dt)
        errors.append(np.max(np.abs(total - total[0])))
    order = math.log2(errors[0] / errors[1])
    assert errors[0] <= 1e-3
    assert 1.7 <= order <= 2.3
