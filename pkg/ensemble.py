import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import integrate
from scipy.spatial import cKDTree

from geometry import CYLINDER, HALFSPACE, NONE, TORUS, shield_distance
from utils import ConfigurationError, spawn_rng

POWER_LAW = "power_law"
CELL_BOUNDED = "cell_bounded"
BEAM = "beam"
SPATIAL_MODES = (POWER_LAW, CELL_BOUNDED, BEAM)

SNAPSHOT_COLUMNS = ["species_id", "x1", "x2", "x3", "v1", "v2", "v3", "weight"]


@dataclass(frozen=True)
class Species:
    sigma: float
    weight: float = None
    count: int = 1000


@dataclass(frozen=True)
class InitialData:
    lam: float = 1.0
    q: float = 2.9
    alpha_decay: float = 2.8
    C0: float = 1.0
    d0: float = 0.2
    N_cut: float = 16.0
    R_dom: float = 20.0
    spatial_mode: str = POWER_LAW
    shell_width: float = 1.0
    beam_speed: float = 10.0


@dataclass
class Ensemble:
    """Weighted macro-particles. `ids` are the indices in the originally sampled set."""

    x: np.ndarray
    v: np.ndarray
    species_id: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray
    ids: np.ndarray
    t: float = 0.0
    seed: int = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def charge(self):
        return self.sigma * self.weight

    @property
    def speed(self):
        return np.linalg.norm(self.v, axis=1)

    @property
    def same_sign(self):
        return bool(np.all(self.sigma > 0) or np.all(self.sigma < 0))

    def copy(self):
        return replace(
            self,
            x=self.x.copy(),
            v=self.v.copy(),
            species_id=self.species_id.copy(),
            sigma=self.sigma.copy(),
            weight=self.weight.copy(),
            ids=self.ids.copy(),
            meta=dict(self.meta),
        )

    def subset(self, mask):
        return replace(
            self,
            x=self.x[mask],
            v=self.v[mask],
            species_id=self.species_id[mask],
            sigma=self.sigma[mask],
            weight=self.weight[mask],
            ids=self.ids[mask],
            meta=dict(self.meta),
        )

    @classmethod
    def from_arrays(cls, x, v, sigma, weight, species_id=None, t=0.0, seed=None):
        x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, 3)
        v = np.atleast_2d(np.asarray(v, dtype=float)).reshape(-1, 3)
        M = len(x)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (M,)).copy()
        weight = np.broadcast_to(np.asarray(weight, dtype=float), (M,)).copy()
        if species_id is None:
            species_id = np.zeros(M, dtype=np.int64)
        return cls(
            x=x.copy(),
            v=v.copy(),
            species_id=np.asarray(species_id, dtype=np.int64).copy(),
            sigma=sigma,
            weight=weight,
            ids=np.arange(M, dtype=np.int64),
            t=t,
            seed=seed,
        )

    @classmethod
    def empty(cls, t=0.0, seed=None):
        return cls.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)), 1.0, 1.0, t=t, seed=seed)


# ---------------------------------------------------------------- velocities


def _log_speed_density(s, lam, q):
    return 2.0 * np.log(s) - lam * s**q


def _log_speed_density_prime(s, lam, q):
    return 2.0 / s - lam * q * s ** (q - 1.0)


def _tangent_envelope(lam, q, N, n_points=32):
    """Piecewise-exponential upper hull of s^2 exp(-lam s^q) on (0, N].

    log s^2 - lam s^q is concave, so its tangent lines bound it from above.
    Returns (breakpoints z, intercepts b, slopes d, log piece masses).
    """
    s_max = (40.0 / lam) ** (1.0 / q)
    hi = min(N, s_max)
    pts = np.linspace(hi / (2 * n_points), hi - hi / (2 * n_points), n_points)
    mode = (2.0 / (lam * q)) ** (1.0 / q)
    if mode < hi:
        pts = np.unique(np.append(pts, mode))

    h = _log_speed_density(pts, lam, q)
    d = _log_speed_density_prime(pts, lam, q)
    b = h - d * pts
    z_inner = (b[1:] - b[:-1]) / (d[:-1] - d[1:])
    z = np.concatenate(([0.0], z_inner, [N]))

    with np.errstate(over="ignore", invalid="ignore"):
        width = z[1:] - z[:-1]
        # log of integral of exp(b + d s) over [z0, z1]
        log_mass = np.where(
            d == 0.0,
            b + np.log(width),
            b + d * z[:-1] + np.log(np.abs(np.expm1(d * width) / d)),
        )
    return z, b, d, log_mass


def sample_speeds(n, lam, q, N, rng):
    """Draw n speeds from the density proportional to s^2 exp(-lam s^q) on [0, N].

    Rejection sampling from a tangent-line envelope with analytic inversion.
    Returns (speeds, acceptance rate).
    """
    if not N > 0.0:
        raise ConfigurationError(f"velocity cutoff N_cut={N} leaves an empty velocity support")
    if n == 0:
        return np.zeros(0), 1.0

    z, b, d, log_mass = _tangent_envelope(lam, q, N)
    probs = np.exp(log_mass - log_mass.max())
    probs /= probs.sum()

    out = np.empty(n)
    filled = 0
    drawn = 0
    while filled < n:
        k = max(2 * (n - filled), 64)
        piece = rng.choice(len(probs), size=k, p=probs)
        u = rng.uniform(size=k)
        dk = d[piece]
        z0 = z[piece]
        width = z[piece + 1] - z0
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            s = np.where(
                dk == 0.0,
                z0 + u * width,
                z0 + np.log1p(u * np.expm1(dk * width)) / np.where(dk == 0.0, 1.0, dk),
            )
        s = np.clip(s, np.nextafter(0.0, 1.0), N)
        log_ratio = _log_speed_density(s, lam, q) - (b[piece] + dk * s)
        accept = np.log(rng.uniform(size=k)) <= log_ratio
        drawn += k
        s = s[accept][: n - filled]
        out[filled : filled + len(s)] = s
        filled += len(s)

    return out, n / drawn


def speed_tail_probability(s, lam, q, N):
    """P(|v| > s) under the truncated speed density (quadrature oracle)."""
    f = lambda y: y * y * math.exp(-lam * y**q)
    upper = min(N, (60.0 / lam) ** (1.0 / q))
    total = integrate.quad(f, 0.0, upper, limit=200)[0]
    if s >= upper:
        return 0.0
    return integrate.quad(f, s, upper, limit=200)[0] / total


def isotropic_directions(n, rng):
    u = rng.normal(size=(n, 3))
    return u / np.linalg.norm(u, axis=1)[:, None]


# ---------------------------------------------------------------- positions


def radial_mass(rad, alpha, R_dom):
    """Unnormalized mass of rho^2 min(1, rho^-alpha) on [0, min(rad, R_dom)]."""
    rad = np.minimum(np.asarray(rad, dtype=float), R_dom)
    core = np.minimum(rad, 1.0) ** 3 / 3.0
    outer = np.maximum(rad, 1.0)
    if alpha == 3.0:
        tail = np.log(outer)
    else:
        tail = (outer ** (3.0 - alpha) - 1.0) / (3.0 - alpha)
    return core + tail


def shell_probabilities(edges, alpha, R_dom):
    """Probability of each radial shell [edges[k], edges[k+1]] under the power-law profile."""
    m = radial_mass(np.asarray(edges, dtype=float), alpha, R_dom)
    return np.diff(m) / radial_mass(R_dom, alpha, R_dom)


def _power_law_radii(n, alpha, R_dom, rng):
    u = rng.uniform(size=n) * radial_mass(R_dom, alpha, R_dom)
    core_mass = min(R_dom, 1.0) ** 3 / 3.0
    in_core = u < core_mass
    rad = np.empty(n)
    rad[in_core] = (3.0 * u[in_core]) ** (1.0 / 3.0)
    rest = u[~in_core] - core_mass
    if alpha == 3.0:
        rad[~in_core] = np.exp(rest)
    else:
        rad[~in_core] = (1.0 + (3.0 - alpha) * rest) ** (1.0 / (3.0 - alpha))
    return rad


def _cell_bounded_radii(n, alpha, R_dom, width, rng):
    """Occupied shells [k w, (k+1) w) for even k with density max(1, k w)^-alpha."""
    k = np.arange(0, int(math.ceil(R_dom / width)), 2)
    lo = k * width
    hi = np.minimum((k + 1) * width, R_dom)
    dens = np.maximum(1.0, lo) ** (-alpha)
    mass = dens * (hi**3 - lo**3)
    shell = rng.choice(len(k), size=n, p=mass / mass.sum())
    u = rng.uniform(size=n)
    return np.cbrt(lo[shell] ** 3 + u * (hi[shell] ** 3 - lo[shell] ** 3))


def is_occupied_radius(rad, width):
    return (np.floor(np.asarray(rad) / width).astype(np.int64) % 2) == 0


def _sample_positions(n, init, geometry, rng):
    out = np.empty((n, 3))
    filled = 0
    drawn = 0
    while filled < n:
        k = max(2 * (n - filled), 64)
        if init.spatial_mode == CELL_BOUNDED:
            rad = _cell_bounded_radii(k, init.alpha_decay, init.R_dom, init.shell_width, rng)
        else:
            rad = _power_law_radii(k, init.alpha_decay, init.R_dom, rng)
        pts = rad[:, None] * isotropic_directions(k, rng)
        keep = pts[shield_distance(pts, geometry) >= init.d0]
        drawn += k
        keep = keep[: n - filled]
        out[filled : filled + len(keep)] = keep
        filled += len(keep)
        if filled == 0 and drawn >= 10_000 + 100 * n:
            raise ConfigurationError(
                f"infeasible support: no point with shield distance >= d0={init.d0} "
                f"inside |x| <= R_dom={init.R_dom}"
            )
    return out, n / max(drawn, 1)


def _beam(n, init, geometry, rng):
    """Cold beam launched at distance d0 straight at the shield."""
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    if geometry.kind == TORUS:
        rho = geometry.R + geometry.r0 + init.d0
        inward = -np.stack((np.cos(phi), np.sin(phi), np.zeros(n)), axis=-1)
        x = -rho * inward
    elif geometry.kind == CYLINDER:
        rho = geometry.A + init.d0
        inward = -np.stack((np.zeros(n), np.cos(phi), np.sin(phi)), axis=-1)
        x = -rho * inward + np.stack((rng.uniform(-1, 1, n), np.zeros(n), np.zeros(n)), -1)
    elif geometry.kind == HALFSPACE:
        inward = np.tile([1.0, 0.0, 0.0], (n, 1))
        x = np.stack((np.full(n, -init.d0), rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)), -1)
    else:
        raise ConfigurationError("a beam needs a shield geometry to aim at")
    return x, init.beam_speed * inward


# ---------------------------------------------------------------- ensembles


def species_weight(init, count, spatial_acceptance=1.0):
    """Macro-particle weight realizing C0 exp(-lam |v|^q) g(|x|) on the sampled support."""
    upper = min(init.N_cut, (60.0 / init.lam) ** (1.0 / init.q))
    z_v = 4.0 * math.pi * integrate.quad(
        lambda s: s * s * math.exp(-init.lam * s**init.q), 0.0, upper, limit=200
    )[0]
    z_x = 4.0 * math.pi * float(radial_mass(init.R_dom, init.alpha_decay, init.R_dom))
    return init.C0 * z_v * z_x * spatial_acceptance / count


def sample_initial(init, species, geometry, seed):
    if init.spatial_mode not in SPATIAL_MODES:
        raise ConfigurationError(f"unknown spatial_mode {init.spatial_mode!r}")
    if not init.N_cut > 0.0:
        raise ConfigurationError(f"velocity cutoff N_cut={init.N_cut} leaves an empty velocity support")

    xs, vs, sid, sig, wts = [], [], [], [], []
    acceptance = {}
    for i, sp in enumerate(species):
        n = int(sp.count)
        if init.spatial_mode == BEAM:
            x, v = _beam(n, init, geometry, spawn_rng(seed, f"species{i}-beam"))
            acc_v, acc_x = 1.0, 1.0
        else:
            x, acc_x = _sample_positions(n, init, geometry, spawn_rng(seed, f"species{i}-x"))
            rng_v = spawn_rng(seed, f"species{i}-v")
            speed, acc_v = sample_speeds(n, init.lam, init.q, init.N_cut, rng_v)
            v = speed[:, None] * isotropic_directions(n, rng_v)
        w = sp.weight if sp.weight is not None else species_weight(init, n, acc_x)
        acceptance[f"species{i}_velocity"] = float(acc_v)
        acceptance[f"species{i}_position"] = float(acc_x)

        xs.append(x)
        vs.append(v)
        sid.append(np.full(n, i, dtype=np.int64))
        sig.append(np.full(n, float(sp.sigma)))
        wts.append(np.full(n, float(w)))

    if not xs:
        return Ensemble.empty(seed=seed)
    e = Ensemble.from_arrays(
        np.concatenate(xs),
        np.concatenate(vs),
        np.concatenate(sig),
        np.concatenate(wts),
        species_id=np.concatenate(sid),
        seed=seed,
    )
    e.meta["acceptance"] = acceptance
    e.meta["N_cut"] = float(init.N_cut)
    print(f"[SAMPLER] Sampled {len(e)} particles ({init.spatial_mode}), acceptance {acceptance}")
    return e


def apply_cutoff(e, N):
    """Partial-dynamics data: keep only particles with |v| <= N, order preserved."""
    if math.isinf(N):
        return e.copy()
    return e.subset(e.speed <= N)


def density_on_grid(e, cell, window):
    """Charge-weighted histogram sum sigma w / cell^3 over the box window=(lo, hi)."""
    if not cell > 0.0:
        raise ValueError(f"cell must be positive, got {cell}")
    lo = np.asarray(window[0], dtype=float)
    hi = np.asarray(window[1], dtype=float)
    nb = np.maximum(np.ceil((hi - lo) / cell - 1e-12).astype(int), 1)
    edges = [lo[k] + cell * np.arange(nb[k] + 1) for k in range(3)]
    rho, _ = np.histogramdd(e.x, bins=edges, weights=e.charge / cell**3)
    return rho, edges


def cell_mass_profile(e, centers, radius=1.0):
    """Macro-particle mass inside the ball of given radius around each center."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(e) == 0:
        return np.zeros(len(centers))
    tree = cKDTree(e.x)
    hits = tree.query_ball_point(centers, r=radius)
    return np.array([e.weight[np.sort(h)].sum() for h in hits])


def default_softening(e):
    """Half the mean nearest-neighbour distance of the ensemble."""
    if len(e) < 2:
        return 0.0
    dist, _ = cKDTree(e.x).query(e.x, k=2)
    return 0.5 * float(np.mean(dist[:, 1]))


def save_snapshot(e, path, config_hash=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(
        {
            "species_id": e.species_id,
            "x1": e.x[:, 0],
            "x2": e.x[:, 1],
            "x3": e.x[:, 2],
            "v1": e.v[:, 0],
            "v2": e.v[:, 1],
            "v3": e.v[:, 2],
            "weight": e.weight,
        },
        columns=SNAPSHOT_COLUMNS,
    )
    df.to_csv(path, index=False, float_format="%.17g")

    sigma_of = {int(s): float(e.sigma[e.species_id == s][0]) for s in np.unique(e.species_id)}
    meta = {"seed": e.seed, "config_hash": config_hash, "t": float(e.t), "species_sigma": sigma_of}
    with open(path.with_suffix(".meta.yaml"), "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    return path


def load_snapshot(path):
    path = Path(path)
    df = pd.read_csv(path, float_precision="round_trip")
    with open(path.with_suffix(".meta.yaml"), "r") as f:
        meta = yaml.safe_load(f)
    sid = df["species_id"].to_numpy(dtype=np.int64)
    sigma_of = meta["species_sigma"]
    sigma = np.array([sigma_of[int(s)] for s in sid], dtype=float)
    e = Ensemble.from_arrays(
        df[["x1", "x2", "x3"]].to_numpy(),
        df[["v1", "v2", "v3"]].to_numpy(),
        sigma,
        df["weight"].to_numpy(),
        species_id=sid,
        t=meta["t"],
        seed=meta["seed"],
    )
    e.meta["config_hash"] = meta["config_hash"]
    return e
