import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from tqdm import tqdm

from geometry import CYLINDER, HALFSPACE, TORUS, cylindrical_radius, minor_radius, shield_distance
from selffield import efield_all, efield_points
from shield_fields import magnetic_field
from utils import PenetrationError, StiffnessError


@dataclass(frozen=True)
class StepPolicy:
    """Macro step and the sub-step limits used near the singular field.

    Sub-steps satisfy |sigma| |B| dt <= c_rot and |v| dt <= c_dist * shield_distance;
    c_dist = 0 switches the approach limit off (falsification runs only).
    """

    dt_macro: float = 0.01
    c_rot: float = 0.2
    c_dist: float = 0.1
    freeze_E: bool = True
    dt_floor: float = 1e-12
    max_floor_hits: int = 1000


@dataclass
class StepStats:
    substeps: int = 0
    max_substeps: int = 0
    floor_hits: int = 0


def _as_column(sigma, like):
    sigma = np.asarray(sigma, dtype=float)
    return np.broadcast_to(sigma, like.shape[:-1])[..., None]


def boris_velocity(v, sigma, E, B, dt, speed=None):
    """Half electric kick, exact rotation about B by -sigma |B| dt, half electric kick.

    dt may be a scalar or one step per particle. The rotated vector is
    rescaled to the pre-rotation speed, or to `speed` when given; a pure
    magnetic flow passes its starting speeds so rounding cannot accumulate
    over many sub-steps.
    """
    v = np.asarray(v, dtype=float)
    E = np.broadcast_to(np.asarray(E, dtype=float), v.shape)
    B = np.broadcast_to(np.asarray(B, dtype=float), v.shape)
    sig = _as_column(sigma, v)
    dt = _as_column(dt, v)

    kick = 0.5 * dt * sig * E
    vm = v + kick

    bmag = np.linalg.norm(B, axis=-1, keepdims=True)
    has_b = bmag > 0.0
    k = np.where(has_b, B / np.where(has_b, bmag, 1.0), 0.0)
    angle = -sig * bmag * dt
    c = np.cos(angle)
    s = np.sin(angle)

    kv = np.sum(k * vm, axis=-1, keepdims=True)
    vr = vm * c + np.cross(k, vm) * s + k * kv * (1.0 - c)

    norm_m = np.linalg.norm(vm, axis=-1, keepdims=True) if speed is None else _as_column(speed, v)
    norm_r = np.linalg.norm(vr, axis=-1, keepdims=True)
    vr = np.where(has_b & (norm_r > 0.0), vr * (norm_m / np.where(norm_r > 0.0, norm_r, 1.0)), vr)
    return vr + kick


def push_boris(x, v, sigma, E, B, dt):
    """One symmetric step for given fields: half drift, velocity update, half drift.

    The drift is split around the velocity update, x' = x + (v + v') dt / 2
    with the fields taken at x + v dt / 2, so the step is time-reversible and
    second order. The one-sided drift x' = x + v' dt is only first order in x.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x_half = x + 0.5 * dt * v
    v_new = boris_velocity(v, sigma, E, B, dt)
    return x_half + 0.5 * dt * v_new, v_new


def substep_limit(x, v, sigma, g, sp, remaining):
    """Largest admissible sub-step for each particle, before the floor is applied."""
    B = magnetic_field(x, g)
    omega = np.abs(sigma) * np.linalg.norm(B, axis=-1)
    h = np.array(remaining, dtype=float, copy=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(omega > 0.0, np.minimum(h, sp.c_rot / omega), h)
        if sp.c_dist > 0.0:
            speed = np.linalg.norm(v, axis=-1)
            d = shield_distance(x, g)
            h = np.where((speed > 0.0) & np.isfinite(d), np.minimum(h, sp.c_dist * d / speed), h)
    return h


def _penetration(idx, ids, t, x, v):
    j = int(idx[0])
    return PenetrationError(ids[j], t, x[j], v[j])


def magnetic_flow(x, v, sigma, ids, g, dt, sp, t0=0.0, stats=None):
    """Advance x, v in place over dt under the external field only.

    Every particle takes its own adaptive symmetric sub-steps; B is
    re-evaluated at each sub-step midpoint.
    """
    M = len(x)
    remaining = np.full(M, float(dt))
    speed0 = np.linalg.norm(v, axis=-1)
    floor_hits = np.zeros(M, dtype=np.int64)
    nsub = np.zeros(M, dtype=np.int64)
    active = np.arange(M)

    while active.size:
        xa = x[active]
        va = v[active]
        sa = sigma[active]
        rem = remaining[active]

        h = substep_limit(xa, va, sa, g, sp, rem)
        at_floor = h < sp.dt_floor
        h = np.minimum(np.maximum(h, sp.dt_floor), rem)
        floor_hits[active] = np.where(at_floor, floor_hits[active] + 1, 0)
        stuck = floor_hits[active] >= sp.max_floor_hits
        if np.any(stuck):
            j = active[np.flatnonzero(stuck)[0]]
            raise StiffnessError(ids[j], t0 + dt - remaining[j], floor_hits[j])

        x_half = xa + (0.5 * h)[:, None] * va
        bad = shield_distance(x_half, g) <= 0.0
        if np.any(bad):
            sel = np.flatnonzero(bad)
            raise _penetration(active[sel], ids, t0 + dt - rem[sel[0]], x_half[sel], va[sel])

        B = magnetic_field(x_half, g)
        v_new = boris_velocity(va, sa, 0.0, B, h, speed=speed0[active])
        x_new = x_half + (0.5 * h)[:, None] * v_new
        bad = shield_distance(x_new, g) <= 0.0
        if np.any(bad):
            sel = np.flatnonzero(bad)
            raise _penetration(
                active[sel], ids, t0 + dt - rem[sel[0]] + h[sel[0]], x_new[sel], v_new[sel]
            )

        x[active] = x_new
        v[active] = v_new
        remaining[active] = rem - h
        nsub[active] += 1
        active = active[remaining[active] > 0.0]

    if stats is not None:
        stats.substeps += int(nsub.sum())
        stats.max_substeps = max(stats.max_substeps, int(nsub.max()) if M else 0)
        stats.floor_hits += int(floor_hits.sum())


def _synchronized_step(e, g, fp, sp, dt, t0, stats=None):
    """Sub-steps shared by all particles with E recomputed at every sub-step midpoint."""
    done = 0.0
    while done < dt:
        rem = dt - done
        h = float(np.min(substep_limit(e.x, e.v, e.sigma, g, sp, np.full(len(e), rem))))
        h = min(max(h, sp.dt_floor), rem)
        x0 = e.x
        e.x = x0 + 0.5 * h * e.v
        bad = shield_distance(e.x, g) <= 0.0
        if np.any(bad):
            raise _penetration(np.flatnonzero(bad), e.ids, t0 + done, e.x, e.v)
        E = efield_all(e, fp)
        B = magnetic_field(e.x, g)
        e.v = boris_velocity(e.v, e.sigma, E, B, h)
        e.x = e.x + 0.5 * h * e.v
        bad = shield_distance(e.x, g) <= 0.0
        if np.any(bad):
            raise _penetration(np.flatnonzero(bad), e.ids, t0 + done + h, e.x, e.v)
        done = dt if h == rem else done + h
        if stats is not None:
            stats.substeps += len(e)


def advance(e, g, fp, sp, T, hooks=(), progress=True):
    """Evolve the ensemble to time T.

    Each macro step is kick(E/2) - magnetic flow(dt) - kick(E/2) with the
    self field E frozen during the flow. Hooks are called as
    hook(step, t, ensemble, E) after every macro step and once at the start.
    Returns the evolved ensemble and the list of hook results of the last hook.
    """
    e = e.copy()
    records = []
    if len(e) == 0:
        return e, records

    d = shield_distance(e.x, g)
    if np.any(d <= 0.0):
        raise _penetration(np.flatnonzero(d <= 0.0), e.ids, e.t, e.x, e.v)

    span = T - e.t
    n_macro = max(1, int(math.ceil(span / sp.dt_macro - 1e-9))) if span > 0 else 0
    dt = span / n_macro if n_macro else 0.0
    t_start = e.t
    stats = StepStats()

    E = efield_all(e, fp)
    for hook in hooks:
        hook(0, e.t, e, E)

    sig = e.sigma[:, None]
    for step in tqdm(range(1, n_macro + 1), disable=not progress, desc="[SIM]"):
        t0 = e.t
        if sp.freeze_E:
            e.v = e.v + 0.5 * dt * sig * E
            magnetic_flow(e.x, e.v, e.sigma, e.ids, g, dt, sp, t0, stats)
            E = efield_all(e, fp)
            e.v = e.v + 0.5 * dt * sig * E
        else:
            _synchronized_step(e, g, fp, sp, dt, t0, stats)
            E = efield_all(e, fp)
        e.t = t_start + step * dt
        for hook in hooks:
            hook(step, e.t, e, E)

    e.meta["substeps"] = stats.substeps
    e.meta["max_substeps_per_macro"] = stats.max_substeps
    if hooks:
        records = getattr(hooks[-1], "records", [])
    return e, records


class FrozenField:
    """Electric field of a fixed ensemble, evaluated at arbitrary points."""

    def __init__(self, ensemble, params):
        self.ensemble = ensemble
        self.params = params

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return efield_points(x.reshape(-1, 3), self.ensemble, self.params).reshape(x.shape)


def _step_batch(z, sigma, g, efield, dt):
    """One symmetric step for every row (x, v) of z under frozen fields."""
    x = z[:, :3]
    v = z[:, 3:]
    x_half = x + 0.5 * dt * v
    E = efield(x_half) if efield is not None else 0.0
    B = magnetic_field(x_half, g)
    v_new = boris_velocity(v, sigma, E, B, dt)
    return np.concatenate((x_half + 0.5 * dt * v_new, v_new), axis=1)


def flow_jacobian(x, v, sigma, g, efield, dt_total, n_steps=None, h_rel=1e-6):
    """Determinant of the Jacobian of (x, v) -> (X(t), V(t)) under frozen fields.

    The map is a fixed number of symmetric steps, so it is smooth in the
    initial state. Each step's Jacobian comes from central differences with
    step h_rel (relative) and the determinant is the product over steps, which
    stays accurate where the whole-horizon map stretches phase space strongly.
    efield is a frozen field callable or None.
    """
    z = np.concatenate((np.asarray(x, dtype=float), np.asarray(v, dtype=float)))
    if n_steps is None:
        bmag = float(np.linalg.norm(magnetic_field(z[:3], g)))
        n_steps = max(16, int(math.ceil(abs(sigma) * bmag * dt_total / 0.05)))
    dt = dt_total / n_steps

    sign = 1.0
    log_det = 0.0
    for _ in range(n_steps):
        h = h_rel * np.maximum(1.0, np.abs(z))
        out = _step_batch(np.vstack((z, z + np.diag(h), z - np.diag(h))), sigma, g, efield, dt)
        J = ((out[1:7] - out[7:13]) / (2.0 * h)[:, None]).T
        s, logabs = np.linalg.slogdet(J)
        sign *= s
        log_det += logabs
        z = out[0]
    return float(sign * np.exp(log_det))


def distance_rate(x, v, g):
    """Time derivative of the shield distance along velocity v."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if g.kind == TORUS:
        rho = cylindrical_radius(x)
        u = rho - g.R
        r = minor_radius(x, g.R)
        v_rho = (x[..., 0] * v[..., 0] + x[..., 1] * v[..., 1]) / rho
        return (u * v_rho + x[..., 2] * v[..., 2]) / r
    if g.kind == CYLINDER:
        rc = np.hypot(x[..., 1], x[..., 2])
        return (x[..., 1] * v[..., 1] + x[..., 2] * v[..., 2]) / rc
    if g.kind == HALFSPACE:
        return -v[..., 0]
    return np.zeros(x.shape[:-1])


def reference_orbit(x, v, sigma, g, T, efield=None, rtol=1e-11, atol=1e-13, events=None):
    """High-accuracy single-particle orbit (DOP853) for oracle comparisons."""

    def rhs(t, y):
        pos = y[:3]
        vel = y[3:]
        acc = np.cross(vel, magnetic_field(pos, g))
        if efield is not None:
            acc = acc + efield(pos)
        return np.concatenate((vel, sigma * acc))

    y0 = np.concatenate((np.asarray(x, dtype=float), np.asarray(v, dtype=float)))
    return solve_ivp(
        rhs, (0.0, T), y0, method="DOP853", rtol=rtol, atol=atol, dense_output=True, events=events
    )


def turning_point(x, v, sigma, g, T, efield=None):
    """First closest approach to the shield: (t, shield distance) or None.

    Located as the root of the distance rate, which solve_ivp brackets and
    refines by bisection-type root finding.
    """

    def approach(t, y):
        return distance_rate(y[:3], y[3:], g)

    approach.direction = 1.0
    sol = reference_orbit(x, v, sigma, g, T, efield=efield, events=approach)
    if len(sol.t_events[0]) == 0:
        return None
    y = sol.y_events[0][0]
    return float(sol.t_events[0][0]), float(shield_distance(y[:3], g))
