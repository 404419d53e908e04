"""
Singular external fields of the magnetic shield.

Every geometry uses the same radial profile a(u) of a "gap" variable u that
vanishes on the singular surface:

    a(u) = u^-tau                     0 < u <= u1
    a(u) = u^-tau * w((u - u1)/(u2 - u1))   u1 < u < u2
    a(u) = 0                          u >= u2

with w the C2 smoothstep 1 - s^3 (10 - 15 s + 6 s^2).

torus:     u = r - r0,         A = a(r)/(R + r cos alpha) e_theta,  B = a'(r)/(R + r cos alpha) e_alpha
cylinder:  u = |A^2 - x2^2 - x3^2|,  B = (a(u), 0, 0)
halfspace: u = |x1|,           B = (0, 0, a(u))
"""

from dataclasses import dataclass

import numpy as np

from geometry import (
    CYLINDER,
    HALFSPACE,
    NONE,
    TORUS,
    frame_at,
    shield_distance,
    to_cartesian,
    to_toroidal,
    ToroidalPoint,
    TWO_PI,
)
from utils import SingularityError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class FieldProfile:
    tau: float
    r0: float
    blend_r1: float
    blend_r2: float

    @classmethod
    def for_geometry(cls, g):
        if g.kind == TORUS:
            return cls(g.tau, g.r0, g.blend_r1, g.blend_r2)
        if g.kind == CYLINDER:
            A2 = g.A * g.A
            return cls(g.tau, 0.0, (1.0 - 2.0 * g.c_cut) * A2, (1.0 - g.c_cut) * A2)
        if g.kind == HALFSPACE:
            return cls(g.tau, 0.0, 0.5 * g.L_cut, g.L_cut)
        raise ValueError(f"no field profile for geometry kind {g.kind!r}")


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


def smoothstep_prime(s):
    s = np.clip(s, 0.0, 1.0)
    return -30.0 * s * s * (1.0 - s) ** 2


def _pure_and_blend(u, p):
    """a and a' as functions of the gap u = r - r0 > 0 (no singularity check)."""
    u = np.asarray(u, dtype=float)
    u1 = p.blend_r1 - p.r0
    u2 = p.blend_r2 - p.r0
    width = u2 - u1

    inside = u < u2
    us = np.where(inside, u, 1.0)
    power = us ** (-p.tau)
    s = (us - u1) / width
    w = np.where(us <= u1, 1.0, smoothstep(s))
    dw = np.where(us <= u1, 0.0, smoothstep_prime(s) / width)

    a = np.where(inside, power * w, 0.0)
    a_prime = np.where(inside, -p.tau * power / us * w + power * dw, 0.0)
    return a, a_prime


def profile_a(r, p):
    """(a(r), a'(r)) of the shield profile; a' is the exact derivative including the blend."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= p.r0):
        raise SingularityError(
            f"profile evaluated at r <= r0 = {p.r0} (min r = {np.min(r)})"
        )
    a, a_prime = _pure_and_blend(r - p.r0, p)
    if a.ndim == 0:
        return float(a), float(a_prime)
    return a, a_prime


def profile_tail_integral(r, p):
    """I(r) = integral of a from r to blend_r2; zero for r >= blend_r2."""
    u = np.atleast_1d(np.asarray(r, dtype=float) - p.r0)
    u1 = p.blend_r1 - p.r0
    u2 = p.blend_r2 - p.r0

    # Gauss-Legendre over the smooth blend part [max(u, u1), u2]
    lo = np.clip(u, u1, u2)
    half = 0.5 * (u2 - lo)
    nodes = lo[:, None] + half[:, None] * (_GL_NODES[None, :] + 1.0)
    a_nodes, _ = _pure_and_blend(nodes, p)
    blend_part = half * (a_nodes @ _GL_WEIGHTS)

    # closed form over the pure power part [u, u1]
    us = np.minimum(u, u1)
    if p.tau == 1.0:
        pure_part = np.log(u1 / us)
    else:
        pure_part = (us ** (1.0 - p.tau) - u1 ** (1.0 - p.tau)) / (p.tau - 1.0)
    pure_part = np.where(u < u1, pure_part, 0.0)

    out = blend_part + pure_part
    return out if np.ndim(r) else float(out[0])


def _check_gap(u, what):
    if np.any(u <= 0.0):
        raise SingularityError(f"{what} evaluated on the singular surface")


def _torus_point(x, g):
    p = to_toroidal(x, g.R)
    if np.any(np.asarray(p.r) <= g.r0):
        raise SingularityError(f"torus field evaluated inside or on Gamma (r <= {g.r0})")
    return p


def vector_potential(x, g):
    x = np.asarray(x, dtype=float)
    if g.kind == NONE:
        return np.zeros_like(x)
    prof = FieldProfile.for_geometry(g)

    if g.kind == TORUS:
        p = _torus_point(x, g)
        a, _ = _pure_and_blend(np.asarray(p.r) - g.r0, prof)
        rho = g.R + p.r * np.cos(p.alpha)
        rho = np.where(rho > 0.0, rho, 1.0)
        return np.asarray(a / rho)[..., None] * frame_at(p).e_theta

    if g.kind == CYLINDER:
        rho2 = x[..., 1] ** 2 + x[..., 2] ** 2
        A2 = g.A * g.A
        u = np.abs(A2 - rho2)
        _check_gap(u, "cylinder field")
        tail = profile_tail_integral(u, prof)
        K = np.where(rho2 < A2, tail, -tail)
        G = np.where(rho2 > 0.0, K / (2.0 * np.where(rho2 > 0.0, rho2, 1.0)), 0.0)
        zero = np.zeros_like(G)
        return np.stack((zero, -x[..., 2] * G, x[..., 1] * G), axis=-1)

    if g.kind == HALFSPACE:
        u = np.abs(x[..., 0])
        _check_gap(u, "half-space field")
        h, _ = _pure_and_blend(u, prof)
        zero = np.zeros_like(h)
        return np.stack((-x[..., 1] * h, zero, zero), axis=-1)

    raise ValueError(f"unknown geometry kind {g.kind!r}")


def magnetic_field(x, g):
    x = np.asarray(x, dtype=float)
    if g.kind == NONE:
        return np.zeros_like(x)
    prof = FieldProfile.for_geometry(g)

    if g.kind == TORUS:
        p = _torus_point(x, g)
        _, a_prime = _pure_and_blend(np.asarray(p.r) - g.r0, prof)
        rho = g.R + p.r * np.cos(p.alpha)
        rho = np.where(rho > 0.0, rho, 1.0)
        return np.asarray(a_prime / rho)[..., None] * frame_at(p).e_alpha

    if g.kind == CYLINDER:
        u = np.abs(g.A * g.A - x[..., 1] ** 2 - x[..., 2] ** 2)
        _check_gap(u, "cylinder field")
        h, _ = _pure_and_blend(u, prof)
        zero = np.zeros_like(h)
        return np.stack((h, zero, zero), axis=-1)

    if g.kind == HALFSPACE:
        u = np.abs(x[..., 0])
        _check_gap(u, "half-space field")
        h, _ = _pure_and_blend(u, prof)
        zero = np.zeros_like(h)
        return np.stack((zero, zero, h), axis=-1)

    raise ValueError(f"unknown geometry kind {g.kind!r}")


def field_magnitude(x, g):
    return np.linalg.norm(magnetic_field(x, g), axis=-1)


def _fd_jacobian(fn, x, h):
    """4th-order central-difference Jacobian J[..., i, j] = d fn_i / d x_j."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        d = (
            -fn(x + 2.0 * e) + 8.0 * fn(x + e) - 8.0 * fn(x - e) + fn(x - 2.0 * e)
        ) / (12.0 * h)
        cols.append(d)
    return np.stack(cols, axis=-1)


def curl_fd(g, x, h):
    J = _fd_jacobian(lambda y: vector_potential(y, g), x, h)
    return np.stack(
        (
            J[..., 2, 1] - J[..., 1, 2],
            J[..., 0, 2] - J[..., 2, 0],
            J[..., 1, 0] - J[..., 0, 1],
        ),
        axis=-1,
    )


def verify_curl(g, samples, h=1e-5):
    """Max over samples of |curl_fd(A) - B| / |B| (absolute where B vanishes)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) == 0:
        return 0.0
    curl = curl_fd(g, samples, h)
    B = magnetic_field(samples, g)
    err = np.linalg.norm(curl - B, axis=-1)
    norm = np.linalg.norm(B, axis=-1)
    rel = np.where(norm > 0.0, err / np.where(norm > 0.0, norm, 1.0), err)
    return float(np.max(rel))


def verify_divergence(g, samples, h=1e-5):
    """Max over samples of |div_fd B| / |grad_fd B| (0 where B is locally zero)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) == 0:
        return 0.0
    J = _fd_jacobian(lambda y: magnetic_field(y, g), samples, h)
    div = np.abs(J[..., 0, 0] + J[..., 1, 1] + J[..., 2, 2])
    scale = np.linalg.norm(J, axis=(-2, -1))
    rel = np.where(scale > 0.0, div / np.where(scale > 0.0, scale, 1.0), div)
    return float(np.max(rel))


def pure_band_width(g):
    """Largest shield distance at which the field is the pure power law (no blend)."""
    prof = FieldProfile.for_geometry(g)
    if g.kind == TORUS:
        return prof.blend_r1 - prof.r0
    if g.kind == CYLINDER:
        return float(np.sqrt(g.A * g.A + prof.blend_r1)) - g.A
    return prof.blend_r1


def verification_samples(g, n, rng):
    """n points inside the pure power band, well clear of the surface and of the blend."""
    width = pure_band_width(g)
    return sample_shell(g, n, 0.25 * width, 0.8 * width, rng)


def sample_shell(g, n, dmin, dmax, rng):
    """n points whose shield distance lies in [dmin, dmax]."""
    d = rng.uniform(dmin, dmax, size=n)
    if g.kind == TORUS:
        p = ToroidalPoint(
            g.r0 + d, rng.uniform(0.0, TWO_PI, n), rng.uniform(0.0, TWO_PI, n)
        )
        return to_cartesian(p, g.R)
    if g.kind == CYLINDER:
        phi = rng.uniform(0.0, TWO_PI, n)
        rho = g.A + d
        return np.stack(
            (rng.uniform(-1.0, 1.0, n), rho * np.cos(phi), rho * np.sin(phi)), axis=-1
        )
    if g.kind == HALFSPACE:
        return np.stack(
            (-d, rng.uniform(-1.0, 1.0, n), rng.uniform(-1.0, 1.0, n)), axis=-1
        )
    return rng.uniform(-dmax, dmax, size=(n, 3))


def in_field_band(x, g):
    """True where the external field is not identically zero."""
    x = np.asarray(x, dtype=float)
    if g.kind == NONE:
        return np.zeros(x.shape[:-1], dtype=bool)
    prof = FieldProfile.for_geometry(g)
    if g.kind == TORUS:
        d = shield_distance(x, g)
        return d < prof.blend_r2 - prof.r0
    if g.kind == CYLINDER:
        u = np.abs(g.A * g.A - x[..., 1] ** 2 - x[..., 2] ** 2)
    else:
        u = np.abs(x[..., 0])
    return u < prof.blend_r2
