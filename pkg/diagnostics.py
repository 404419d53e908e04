"""
Measured quantities of a run: energies, local energy W / Q(R), the
speed-work and shield-balance identities, field averages along tracers.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numba import njit, prange
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.stats import linregress

from dynamics import magnetic_flow
from geometry import CYLINDER, NONE, TORUS, frame_at, shield_distance, to_toroidal
from selffield import kinetic_energy, particle_potentials
from shield_fields import magnetic_field, vector_potential
from utils import ConfigurationError


@dataclass
class DiagRecord:
    t: float
    kinetic: float
    potential: float
    total: float
    Q_of_R: dict = field(default_factory=dict)
    min_shield_distance: float = math.inf
    max_speed: float = 0.0
    speed_work_residual_max: float = 0.0
    shield_balance_residual_max: float = 0.0
    avg_field_per_tracer: np.ndarray = None
    running_max_speed: float = 0.0
    running_R: float = 1.0

    def to_row(self, radii=(), tracer_ids=()):
        row = {
            "t": self.t,
            "kinetic": self.kinetic,
            "potential": self.potential,
            "total": self.total,
            "min_shield_distance": self.min_shield_distance,
            "max_speed": self.max_speed,
            "running_max_speed": self.running_max_speed,
            "running_R": self.running_R,
            "speed_work_residual": self.speed_work_residual_max,
            "shield_balance_residual": self.shield_balance_residual_max,
        }
        for i, R in enumerate(radii, start=1):
            row[f"Q_R{i}"] = self.Q_of_R.get(R, math.nan)
        for k, tid in enumerate(tracer_ids):
            row[f"E_tracer_{tid}"] = (
                self.avg_field_per_tracer[k] if self.avg_field_per_tracer is not None else math.nan
            )
        return row


# ---------------------------------------------------------------- mollifier


@njit(cache=True)
def _phi_scalar(r):
    if r <= 1.0:
        return 1.0
    if r >= 2.0:
        return 0.0
    s = r - 1.0
    return 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


class MollifierPhi:
    """Radial cut-off: 1 on [0, 1], 0 on [2, inf), quintic smoothstep between.

    Its slope lies in [-1.875, 0].
    """

    def __call__(self, r):
        s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
        return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)

    def derivative(self, r):
        s = np.clip(np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
        return -30.0 * s * s * (1.0 - s) ** 2


phi = MollifierPhi()


# ---------------------------------------------------------------- energies


def _require_same_sign(e):
    if not e.same_sign:
        raise ConfigurationError(
            "local energy is only defined for same-sign plasmas; "
            "use the global energy for mixed-sign runs"
        )


def particle_energy_density(e, fp, potentials=None):
    """Per particle: 1/2 w |v|^2 + 1/2 w sigma phi_j."""
    if potentials is None:
        potentials = particle_potentials(e, fp)
    return 0.5 * e.weight * np.einsum("ij,ij->i", e.v, e.v) + 0.5 * e.charge * potentials


def local_energy(e, mu, R, fp, potentials=None):
    if R <= 0:
        raise ConfigurationError(f"local energy radius must be positive, got {R}")
    if len(e) == 0:
        return 0.0
    _require_same_sign(e)
    dens = particle_energy_density(e, fp, potentials)
    dist = np.linalg.norm(e.x - np.asarray(mu, dtype=float), axis=1)
    return float(np.sum(phi(dist / R) * dens))


@njit(parallel=True, cache=True)
def _windowed_sums(centers, x, dens, R):
    out = np.empty(centers.shape[0])
    for k in prange(centers.shape[0]):
        acc = 0.0
        for j in range(x.shape[0]):
            dx = x[j, 0] - centers[k, 0]
            dy = x[j, 1] - centers[k, 1]
            dz = x[j, 2] - centers[k, 2]
            w = _phi_scalar(math.sqrt(dx * dx + dy * dy + dz * dz) / R)
            if w > 0.0:
                acc += w * dens[j]
        out[k] = acc
    return out


def window_centers(e, R, stride=16):
    """Every stride-th particle plus the centres of occupied cells of side R/2."""
    h = 0.5 * R
    cells = np.unique(np.floor(e.x / h), axis=0)
    lattice = (cells + 0.5) * h
    return np.ascontiguousarray(np.concatenate((e.x[::stride], lattice)))


def q_sup(e, R, fp, centers=None, potentials=None):
    """Max of the local energy over the window centres (a lower bound of the true sup)."""
    if len(e) == 0:
        return 0.0
    _require_same_sign(e)
    if centers is None:
        centers = window_centers(e, R)
    dens = particle_energy_density(e, fp, potentials)
    sums = _windowed_sums(
        np.ascontiguousarray(centers, dtype=np.float64),
        np.ascontiguousarray(e.x, dtype=np.float64),
        np.ascontiguousarray(dens, dtype=np.float64),
        float(R),
    )
    return float(np.max(sums))


def q_profile(e, radii, fp, potentials=None):
    """Q(R) for each radius over one set of window centres shared by all radii.

    Sharing the centres keeps Q non-decreasing in R, since every window grows
    with R and the same-sign energy density is non-negative.
    """
    if len(e) == 0 or len(radii) == 0:
        return np.zeros(len(radii))
    if potentials is None:
        potentials = particle_potentials(e, fp)
    centers = np.unique(np.concatenate([window_centers(e, R) for R in radii]), axis=0)
    return np.array([q_sup(e, R, fp, centers=centers, potentials=potentials) for R in radii])


def q_scaling(e, radii, fp, potentials=None):
    """Q(R) for each radius and the fitted log-log slope."""
    Q = q_profile(e, radii, fp, potentials)
    fit = linregress(np.log(radii), np.log(Q))
    return Q, float(fit.slope)


# ---------------------------------------------------------------- velocities


def toroidal_velocity(x, v, R):
    f = frame_at(to_toroidal(x, R))
    v = np.asarray(v, dtype=float)
    v_r = np.sum(v * f.e_r, axis=-1)
    v_theta = np.sum(v * f.e_theta, axis=-1)
    v_alpha = np.sum(v * f.e_alpha, axis=-1)
    return v_r, v_theta, v_alpha


def magnetic_force_alpha(x, v, g):
    """|(v ^ B) . e_alpha| / (|v| |B|); zero up to rounding in the torus field."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    B = magnetic_field(x, g)
    f = frame_at(to_toroidal(x, g.R))
    num = np.abs(np.sum(np.cross(v, B) * f.e_alpha, axis=-1))
    den = np.linalg.norm(v, axis=-1) * np.linalg.norm(B, axis=-1)
    return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)


def v_alpha_drift(x, v, sigma, g, dt, sp):
    """|change of v_alpha| over a pure magnetic flow of length dt (reported only)."""
    x = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    v = np.atleast_2d(np.asarray(v, dtype=float)).copy()
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(x),)).copy()
    _, _, before = toroidal_velocity(x, v, g.R)
    magnetic_flow(x, v, sigma, np.arange(len(x)), g, dt, sp)
    _, _, after = toroidal_velocity(x, v, g.R)
    return np.abs(after - before)


# ---------------------------------------------------------------- identities


def speed_work_residual(t, v, E, sigma):
    """|V(t)|^2 - |v(0)|^2 - 2 sigma int V.E, normalized by max(1, |V(t)|^2).

    t: (T,), v and E: (T, M, 3) or (T, 3). Returns the residual at the last
    sample for every particle.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    E = np.asarray(E, dtype=float)
    power = np.sum(v * E, axis=-1)
    work = trapezoid(power, t, axis=0) if len(t) > 1 else np.zeros(power.shape[1:])
    v2_end = np.sum(v[-1] ** 2, axis=-1)
    v2_start = np.sum(v[0] ** 2, axis=-1)
    res = v2_end - v2_start - 2.0 * np.asarray(sigma) * work
    return np.abs(res) / np.maximum(1.0, v2_end)


def symmetry_axis(g):
    """Axis of the rotation symmetry the external field shares, if any."""
    if g.kind in (TORUS, NONE):
        return np.array([0.0, 0.0, 1.0])
    if g.kind == CYLINDER:
        return np.array([1.0, 0.0, 0.0])
    return None


def _angular(x, w, axis):
    return np.sum(np.cross(x, w) * axis, axis=-1)


def _flux_term(x, g, axis):
    """(x ^ A) . axis; equals a(r) for the torus."""
    if g.kind == NONE:
        return np.zeros(np.asarray(x).shape[:-1])
    return _angular(x, vector_potential(x, g), axis)


def shield_balance(t, x, v, E, sigma, g):
    """Residual of sigma (a(t) - a(0)) = -[rho v_theta] + sigma int rho E_theta.

    The identity is the balance of canonical angular momentum about the
    symmetry axis; a vanishes outside the field band so all segments
    contribute. Shapes as in speed_work_residual.

    The residual is divided by max(1, |sigma a(t)|): a(t) grows without bound
    as a particle nears the shield, so the terms cancel to a relative
    accuracy there, while far from the band a is zero and the residual stays
    absolute.
    """
    axis = symmetry_axis(g)
    if axis is None:
        raise ConfigurationError(f"no shield-balance identity for geometry {g.kind!r}")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    E = np.asarray(E, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    a_end = sigma * _flux_term(x[-1], g, axis)
    lhs = a_end - sigma * _flux_term(x[0], g, axis)
    boundary = _angular(x[-1], v[-1], axis) - _angular(x[0], v[0], axis)
    torque = _angular(x, E, axis)
    integral = trapezoid(torque, t, axis=0) if len(t) > 1 else np.zeros(torque.shape[1:])
    res = lhs + boundary - sigma * integral
    return np.abs(res) / np.maximum(1.0, np.abs(a_end))


def avg_field_window(t, field_mag, Delta):
    """(1/Delta) int_t^{t+Delta} |E| ds for every sample start t with t + Delta <= t_end.

    field_mag: (T,) or (T, k) for k tracers. Returns (starts, averages).
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(field_mag, dtype=float)
    if Delta <= 0 or Delta > t[-1] - t[0]:
        raise ConfigurationError(f"window {Delta} must lie in (0, {t[-1] - t[0]}]")
    F = cumulative_trapezoid(f, t, axis=0, initial=0.0)
    starts = t[t + Delta <= t[-1] + 1e-12 * max(1.0, abs(t[-1]))]
    cols = F.reshape(len(t), -1)
    ends = np.stack([np.interp(starts + Delta, t, cols[:, k]) for k in range(cols.shape[1])], -1)
    begins = cols[: len(starts)]
    avg = (ends - begins) / Delta
    return starts, avg.reshape((len(starts),) + f.shape[1:])


def field_time_integral(t, field_mag):
    """int_0^t |E(X(s), s)| ds per tracer at every sample."""
    return cumulative_trapezoid(np.asarray(field_mag, dtype=float), np.asarray(t, float), axis=0, initial=0.0)


def running_bound(t, max_speed):
    """Running max speed and R(t) = 1 + int_0^t of it."""
    V = np.maximum.accumulate(np.asarray(max_speed, dtype=float))
    R = 1.0 + cumulative_trapezoid(V, np.asarray(t, dtype=float), initial=0.0)
    return V, R


def corollary_ratios(max_speed, max_field, N):
    return {
        "speed_over_N": float(max_speed) / N,
        "field_over_N2": float(max_field) / (N * N),
    }


# ---------------------------------------------------------------- monitor


class Monitor:
    """Macro-step hook that accumulates the identities and records DiagRecords.

    Time integrals use the trapezoid rule on macro-step samples and are
    accumulated at every step; records are kept every `every` steps.
    """

    def __init__(self, g, fp, radii=(), tracer_ids=(), every=1, log_fn=None):
        self.g = g
        self.fp = fp
        self.radii = tuple(radii)
        self.tracer_ids = np.asarray(tracer_ids, dtype=np.int64)
        self.every = max(1, int(every))
        self.log_fn = log_fn
        self.axis = symmetry_axis(g)
        self.records = []
        self.tracer_field = []
        self.times = []

    def _start(self, e, E):
        self.v2_0 = np.einsum("ij,ij->i", e.v, e.v)
        self.work = np.zeros(len(e))
        self.power_prev = np.einsum("ij,ij->i", e.v, E)
        if self.axis is not None:
            self.flux_0 = e.sigma * _flux_term(e.x, self.g, self.axis)
            self.ang_0 = _angular(e.x, e.v, self.axis)
            self.torque_prev = _angular(e.x, E, self.axis)
            self.torque_int = np.zeros(len(e))
        self.t_prev = e.t
        self.V_run = 0.0
        self.R_run = 1.0
        self.tracer_ids = self.tracer_ids[np.isin(self.tracer_ids, e.ids)]
        self.tracer_rows = np.searchsorted(e.ids, self.tracer_ids)
        self.t_0 = e.t
        self.tracer_int = np.zeros(len(self.tracer_ids))
        self.tracer_prev = np.linalg.norm(E[self.tracer_rows], axis=1)

    def __call__(self, step, t, e, E):
        if step == 0:
            self._start(e, E)
        dt = t - self.t_prev

        power = np.einsum("ij,ij->i", e.v, E)
        self.work += 0.5 * dt * (self.power_prev + power)
        self.power_prev = power
        v2 = np.einsum("ij,ij->i", e.v, e.v)
        sw = np.abs(v2 - self.v2_0 - 2.0 * e.sigma * self.work) / np.maximum(1.0, v2)

        sb = np.zeros(len(e))
        if self.axis is not None:
            torque = _angular(e.x, E, self.axis)
            self.torque_int += 0.5 * dt * (self.torque_prev + torque)
            self.torque_prev = torque
            flux = e.sigma * _flux_term(e.x, self.g, self.axis)
            ang = _angular(e.x, e.v, self.axis)
            res = flux - self.flux_0 + ang - self.ang_0 - e.sigma * self.torque_int
            sb = np.abs(res) / np.maximum(1.0, np.abs(flux))

        speed = float(np.sqrt(v2.max())) if len(e) else 0.0
        V_new = max(self.V_run, speed)
        self.R_run += 0.5 * dt * (self.V_run + V_new) if step else 0.0
        self.V_run = V_new
        self.t_prev = t

        E_tr = np.linalg.norm(E[self.tracer_rows], axis=1)
        self.tracer_int += 0.5 * dt * (self.tracer_prev + E_tr)
        self.tracer_prev = E_tr
        elapsed = t - self.t_0
        avg_tr = self.tracer_int / elapsed if elapsed > 0 else E_tr
        self.times.append(t)
        self.tracer_field.append(E_tr)

        if step % self.every:
            return
        potentials = particle_potentials(e, self.fp)
        kin = kinetic_energy(e)
        pot = 0.5 * float(np.sum(e.charge * potentials)) if len(e) > 1 else 0.0
        Q = {}
        if e.same_sign and len(e):
            Q = dict(zip(self.radii, q_profile(e, self.radii, self.fp, potentials)))
        d = shield_distance(e.x, self.g)
        rec = DiagRecord(
            t=t,
            kinetic=kin,
            potential=pot,
            total=kin + pot,
            Q_of_R=Q,
            min_shield_distance=float(np.min(d)) if len(e) else math.inf,
            max_speed=speed,
            speed_work_residual_max=float(np.max(sw)) if len(e) else 0.0,
            shield_balance_residual_max=float(np.max(sb)) if len(e) else 0.0,
            avg_field_per_tracer=avg_tr,
            running_max_speed=self.V_run,
            running_R=self.R_run,
        )
        self.records.append(rec)
        if self.log_fn is not None:
            self.log_fn(rec.to_row(self.radii, self.tracer_ids))

    def tracer_field_series(self):
        return np.asarray(self.times), np.asarray(self.tracer_field)

    def frame(self):
        return diag_frame(self.records, self.radii, self.tracer_ids)


def diag_frame(records, radii=(), tracer_ids=()):
    return pd.DataFrame([r.to_row(radii, tracer_ids) for r in records])


def write_diag_csv(records, path, radii=(), tracer_ids=()):
    df = diag_frame(records, radii, tracer_ids)
    df.to_csv(path, index=False, float_format="%.17g")
    print(f"[DIAG] wrote {len(df)} rows to {path}")
    return df
