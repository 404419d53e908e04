"""
Self-consistent electric field by regularized direct Coulomb summation.

E(x) = sum_j sigma_j w_j (x - x_j) / (|x - x_j|^2 + eps^2)^(3/2)

Kernels are parallel over targets (prange) and accumulate every target's
sum sequentially in source index order, so results do not depend on the
number of threads.
"""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass(frozen=True)
class FieldParams:
    epsilon: float = 0.0
    exclusion: bool = True

    def __post_init__(self):
        if not self.epsilon >= 0.0:
            raise ValueError(f"softening epsilon must be >= 0, got {self.epsilon}")
        if not self.exclusion:
            raise ValueError("self-interaction is always excluded")


@njit(cache=True)
def _field_on_target(px, py, pz, x, q, eps2, skip):
    ex = 0.0
    ey = 0.0
    ez = 0.0
    for j in range(x.shape[0]):
        if j == skip:
            continue
        dx = px - x[j, 0]
        dy = py - x[j, 1]
        dz = pz - x[j, 2]
        d2 = dx * dx + dy * dy + dz * dz + eps2
        if d2 == 0.0:
            continue
        inv = q[j] / (d2 * math.sqrt(d2))
        ex += dx * inv
        ey += dy * inv
        ez += dz * inv
    return ex, ey, ez


@njit(cache=True)
def _potential_on_target(px, py, pz, x, q, eps2, skip):
    phi = 0.0
    for j in range(x.shape[0]):
        if j == skip:
            continue
        dx = px - x[j, 0]
        dy = py - x[j, 1]
        dz = pz - x[j, 2]
        d2 = dx * dx + dy * dy + dz * dz + eps2
        if d2 == 0.0:
            continue
        phi += q[j] / math.sqrt(d2)
    return phi


@njit(parallel=True, cache=True)
def _efield_targets(targets, x, q, eps2, skip):
    out = np.empty_like(targets)
    for k in prange(targets.shape[0]):
        ex, ey, ez = _field_on_target(
            targets[k, 0], targets[k, 1], targets[k, 2], x, q, eps2, skip[k]
        )
        out[k, 0] = ex
        out[k, 1] = ey
        out[k, 2] = ez
    return out


@njit(parallel=True, cache=True)
def _potential_targets(targets, x, q, eps2, skip):
    out = np.empty(targets.shape[0])
    for k in prange(targets.shape[0]):
        out[k] = _potential_on_target(
            targets[k, 0], targets[k, 1], targets[k, 2], x, q, eps2, skip[k]
        )
    return out


def _sources(e):
    return np.ascontiguousarray(e.x, dtype=np.float64), np.ascontiguousarray(
        e.charge, dtype=np.float64
    )


def efield_at(x, e, p, skip=None):
    x = np.asarray(x, dtype=np.float64)
    src, q = _sources(e)
    s = -1 if skip is None else int(skip)
    return np.array(_field_on_target(x[0], x[1], x[2], src, q, p.epsilon**2, s))


def efield_points(points, e, p):
    """E at arbitrary points, no exclusion."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    src, q = _sources(e)
    skip = np.full(len(points), -1, dtype=np.int64)
    return _efield_targets(points, src, q, p.epsilon**2, skip)


def efield_all(e, p):
    """Field on every particle from all the others; row k equals efield_at(x_k, skip=k)."""
    src, q = _sources(e)
    if len(src) == 0:
        return np.zeros((0, 3))
    skip = np.arange(len(src), dtype=np.int64)
    return _efield_targets(src, src, q, p.epsilon**2, skip)


def particle_potentials(e, p):
    """phi_j = sum_{k != j} sigma_k w_k / sqrt(|x_j - x_k|^2 + eps^2)."""
    src, q = _sources(e)
    if len(src) == 0:
        return np.zeros(0)
    skip = np.arange(len(src), dtype=np.int64)
    return _potential_targets(src, src, q, p.epsilon**2, skip)


def potential_energy(e, p, potentials=None):
    if len(e) < 2:
        return 0.0
    if potentials is None:
        potentials = particle_potentials(e, p)
    return 0.5 * float(np.sum(e.charge * potentials))


def kinetic_energy(e):
    return 0.5 * float(np.sum(e.weight * np.einsum("ij,ij->i", e.v, e.v)))


def fit_quasi_lipschitz(e, p, rng, n_pairs=1000, s_min=1e-4, s_max=1e-1, region=None):
    """Empirical modulus |E(x) - E(y)| <= K s (1 + |log s|) on random point pairs.

    Returns (K, separations, ratios); K is the largest observed ratio.
    """
    if region is None:
        lo, hi = e.x.min(axis=0), e.x.max(axis=0)
    else:
        lo, hi = np.asarray(region[0], float), np.asarray(region[1], float)
    a = rng.uniform(lo, hi, size=(n_pairs, 3))
    s = np.exp(rng.uniform(np.log(s_min), np.log(s_max), size=n_pairs))
    u = rng.normal(size=(n_pairs, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    b = a + s[:, None] * u

    diff = np.linalg.norm(efield_points(a, e, p) - efield_points(b, e, p), axis=1)
    ratio = diff / (s * (1.0 + np.abs(np.log(s))))
    return float(np.max(ratio)), s, ratio
