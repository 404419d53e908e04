import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

TORUS = "torus"
CYLINDER = "cylinder"
HALFSPACE = "halfspace"
NONE = "none"

KINDS = (TORUS, CYLINDER, HALFSPACE, NONE)


@dataclass(frozen=True)
class ToroidalPoint:
    """Toroidal coordinates (r, theta, alpha) relative to a torus of major radius R.

    Fields may be floats or equally shaped arrays. `degenerate` flags points on
    the core circle (r = 0) where alpha is undefined and has been set to 0.
    """

    r: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    degenerate: np.ndarray = False


@dataclass(frozen=True)
class ToroidalFrame:
    e_r: np.ndarray
    e_theta: np.ndarray
    e_alpha: np.ndarray


@dataclass(frozen=True)
class ShieldGeometry:
    """The shielded body Gamma and the parameters of its singular field.

    kind is one of "torus", "cylinder", "halfspace", "none". Only the
    parameters of the chosen kind are meaningful.
    """

    kind: str = NONE
    R: float = 2.0
    r0: float = 0.5
    tau: float = 4.0
    A: float = 1.0
    L_cut: float = 1.0
    c_cut: float = 0.25

    @classmethod
    def torus(cls, R=2.0, r0=0.5, tau=4.0):
        return cls(kind=TORUS, R=R, r0=r0, tau=tau)

    @classmethod
    def cylinder(cls, A=1.0, tau=2.0, c_cut=0.25):
        return cls(kind=CYLINDER, A=A, tau=tau, c_cut=c_cut)

    @classmethod
    def halfspace(cls, tau=2.0, L_cut=1.0):
        return cls(kind=HALFSPACE, tau=tau, L_cut=L_cut)

    @classmethod
    def none(cls):
        return cls(kind=NONE)

    @property
    def blend_r1(self):
        return self.r0 + (self.R - self.r0) / 8.0

    @property
    def blend_r2(self):
        return self.r0 + (self.R - self.r0) / 4.0

    @property
    def chart_r_max(self):
        # toroidal chart r0 < r < (R + r0)/2
        return 0.5 * (self.R + self.r0)

    def check(self):
        """Structural invariants only; parameter ranges are checked in config."""
        if self.kind not in KINDS:
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        if self.kind == TORUS and not 0.0 < self.r0 < self.R:
            raise ValueError(f"torus needs 0 < r0 < R, got r0={self.r0}, R={self.R}")
        if self.kind == CYLINDER and not self.A > 0.0:
            raise ValueError(f"cylinder needs A > 0, got A={self.A}")
        if self.kind == CYLINDER and not 0.0 < self.c_cut < 0.5:
            raise ValueError(f"cylinder needs 0 < c_cut < 0.5, got {self.c_cut}")
        if self.kind == HALFSPACE and not self.L_cut > 0.0:
            raise ValueError(f"half-space needs L_cut > 0, got {self.L_cut}")
        if self.kind != NONE and not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        return self


def _wrap(angle):
    angle = np.mod(angle, TWO_PI)
    # mod can round up to exactly 2*pi for tiny negative inputs
    return np.where(angle >= TWO_PI, 0.0, angle)


def cylindrical_radius(x):
    x = np.asarray(x, dtype=float)
    return np.hypot(x[..., 0], x[..., 1])


def minor_radius(x, R):
    x = np.asarray(x, dtype=float)
    return np.hypot(cylindrical_radius(x) - R, x[..., 2])


def to_toroidal(x, R):
    x = np.asarray(x, dtype=float)
    rho = cylindrical_radius(x)
    u = rho - R
    z = x[..., 2]
    r = np.hypot(u, z)
    theta = _wrap(np.arctan2(x[..., 1], x[..., 0]))
    degenerate = r == 0.0
    alpha = np.where(degenerate, 0.0, _wrap(np.arctan2(z, u)))
    if np.ndim(r) == 0:
        return ToroidalPoint(float(r), float(theta), float(alpha), bool(degenerate))
    return ToroidalPoint(r, theta, alpha, degenerate)


def to_cartesian(p, R):
    r = np.asarray(p.r, dtype=float)
    ca = np.cos(p.alpha)
    rho = R + r * ca
    return np.stack(
        (rho * np.cos(p.theta), rho * np.sin(p.theta), r * np.sin(p.alpha)), axis=-1
    )


def frame_at(p):
    ct, st = np.cos(p.theta), np.sin(p.theta)
    ca, sa = np.cos(p.alpha), np.sin(p.alpha)
    zero = np.zeros_like(ct)

    e_r = np.stack((ca * ct, ca * st, sa), axis=-1)
    e_theta = np.stack((-st, ct, zero), axis=-1)
    e_alpha = np.stack((-sa * ct, -sa * st, ca), axis=-1)
    return ToroidalFrame(e_r, e_theta, e_alpha)


def shield_distance(x, g):
    """Signed distance to the shielded body, positive outside Gamma."""
    x = np.asarray(x, dtype=float)
    if g.kind == TORUS:
        return minor_radius(x, g.R) - g.r0
    if g.kind == CYLINDER:
        return np.hypot(x[..., 1], x[..., 2]) - g.A
    if g.kind == HALFSPACE:
        return -x[..., 0]
    if g.kind == NONE:
        return np.full(x.shape[:-1], np.inf) if x.ndim > 1 else np.inf
    raise ValueError(f"unknown geometry kind {g.kind!r}")


def is_in_chart(x, g):
    """True where the toroidal chart r0 < r < (R + r0)/2 is valid."""
    r = minor_radius(x, g.R)
    return (r > g.r0) & (r < g.chart_r_max)
