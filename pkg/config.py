"""
Run configuration: YAML sections merged over scenario presets, then
validated against the hypotheses of the shielding theorems.

    scenario: torus_same_sign
    geometry: {kind: torus, R: 2.0, r0: 0.5, tau: 4.0}
    initial:  {alpha_decay: 2.8, q: 2.9, N_cut: 16}
    species:  [{sigma: 1.0, count: 5000}, {sigma: 0.5, count: 5000}]
    field:    {epsilon: auto}
    step:     {dt_macro: 0.01}
    run:      {T: 1.0, seed: 0}
    output:   {radii: [1, 2, 4]}
"""

import copy
from dataclasses import dataclass, field, fields

import yaml

from dynamics import StepPolicy
from ensemble import BEAM, SPATIAL_MODES, InitialData, Species
from geometry import CYLINDER, HALFSPACE, NONE, TORUS, ShieldGeometry
from utils import ConfigurationError, HypothesisError, text_hash

TORUS_TWO_SIGN = "torus_two_sign"
TORUS_SAME_SIGN = "torus_same_sign"
CYLINDER_SCENARIO = "cylinder"
HALFSPACE_SCENARIO = "halfspace"
SINGLE_PARTICLE = "single_particle"
SCENARIOS = (TORUS_TWO_SIGN, TORUS_SAME_SIGN, CYLINDER_SCENARIO, HALFSPACE_SCENARIO, SINGLE_PARTICLE)

_TORUS = {"kind": "torus", "R": 2.0, "r0": 0.5, "tau": 4.0, "A": 1.0, "L_cut": 1.0, "c_cut": 0.25}
_INITIAL = {f.name: f.default for f in fields(InitialData)}
_STEP = {f.name: f.default for f in fields(StepPolicy)}

_COMMON = {
    "geometry": _TORUS,
    "initial": _INITIAL,
    "species": [{"sigma": 1.0, "weight": None, "count": 2000}],
    "field": {"epsilon": "auto"},
    "step": _STEP,
    "particle": {"x": [2.8, 0.0, 0.0], "v": [-1.0, 0.4, 0.2], "sigma": 1.0, "weight": 1.0},
    "run": {"T": 1.0, "seed": 0, "workers": None},
    "output": {
        "snapshot_times": [],
        "diag_every": 1,
        "radii": [1.0, 2.0, 4.0],
        "n_tracers": 8,
        "avg_window": 0.1,
        "rungs": [4.0, 8.0, 16.0],
        "progress": True,
    },
}

PRESETS = {
    TORUS_TWO_SIGN: {
        "initial": {"alpha_decay": 3.5, "q": 3.0},
        "species": [{"sigma": 1.0, "count": 2000}, {"sigma": -1.0, "count": 2000}],
    },
    TORUS_SAME_SIGN: {
        "initial": {"alpha_decay": 2.8, "q": 2.9},
        "species": [{"sigma": 1.0, "count": 5000}, {"sigma": 0.5, "count": 5000}],
    },
    CYLINDER_SCENARIO: {
        "geometry": {"kind": "cylinder", "A": 1.0, "tau": 2.0},
        "initial": {"alpha_decay": 3.5, "q": 2.0},
        "species": [{"sigma": 1.0, "count": 2000}, {"sigma": -1.0, "count": 2000}],
    },
    HALFSPACE_SCENARIO: {
        "geometry": {"kind": "halfspace", "tau": 2.0, "L_cut": 1.0},
        "initial": {"alpha_decay": 3.5, "q": 2.0},
        "species": [{"sigma": 1.0, "count": 2000}, {"sigma": -1.0, "count": 2000}],
    },
    SINGLE_PARTICLE: {
        "species": [{"sigma": 1.0, "weight": 1.0, "count": 1}],
        "field": {"epsilon": 0.0},
    },
}


@dataclass
class OutputConfig:
    snapshot_times: list = field(default_factory=list)
    diag_every: int = 1
    radii: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    n_tracers: int = 8
    avg_window: float = 0.1
    rungs: list = field(default_factory=lambda: [4.0, 8.0, 16.0])
    progress: bool = True


@dataclass
class RunConfig:
    scenario: str
    geometry: ShieldGeometry
    initial: InitialData
    species: list
    epsilon: object
    step: StepPolicy
    T: float
    seed: int
    workers: int = None
    particle: dict = None
    output: OutputConfig = field(default_factory=OutputConfig)
    allow_violation: bool = False
    violations: list = field(default_factory=list)
    resolved: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def theorem_two(self):
        return self.scenario == TORUS_SAME_SIGN

    def to_manifest(self):
        out = copy.deepcopy(self.resolved)
        out["allow_hypothesis_violation"] = self.allow_violation
        out["hypothesis_violations"] = list(self.violations)
        return out


def _merge_section(name, base, user):
    if user is None:
        return copy.deepcopy(base)
    if not isinstance(user, dict):
        raise ConfigurationError(f"section [{name}] must be a mapping, got {type(user).__name__}")
    unknown = sorted(set(user) - set(base))
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {', '.join(unknown)}")
    return {**base, **user}


def _merge_species(items):
    if not isinstance(items, list) or not items:
        raise ConfigurationError("[species] must be a non-empty list")
    default = {"sigma": 1.0, "weight": None, "count": 1000}
    return [_merge_section("species", default, item) for item in items]


def resolve(raw):
    """Merge a parsed YAML mapping over the scenario preset, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("a config must be a YAML mapping of sections")
    scenario = raw.get("scenario", TORUS_SAME_SIGN)
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")

    allowed = set(_COMMON) | {"scenario"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown sections: {', '.join(unknown)}")

    preset = PRESETS[scenario]
    settings = {"scenario": scenario}
    for name, default in _COMMON.items():
        if name == "species":
            continue
        base = _merge_section(name, default, preset.get(name))
        settings[name] = _merge_section(name, base, raw.get(name))
    settings["species"] = _merge_species(raw.get("species", preset.get("species", _COMMON["species"])))
    return settings


def _float(section, key, value):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"[{section}] {key} must be a number, got {value!r}") from None


def _build(settings):
    try:
        geometry = ShieldGeometry(**settings["geometry"]).check()
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"[geometry] {err}") from None

    init_kw = {
        k: (v if k == "spatial_mode" else _float("initial", k, v))
        for k, v in settings["initial"].items()
    }
    init = InitialData(**init_kw)
    if init.spatial_mode not in SPATIAL_MODES:
        raise ConfigurationError(f"[initial] unknown spatial_mode {init.spatial_mode!r}")
    for key in ("lam", "C0", "N_cut", "R_dom", "shell_width"):
        if not getattr(init, key) > 0.0:
            raise ConfigurationError(f"[initial] {key} must be positive, got {getattr(init, key)}")
    if init.d0 < 0.0:
        raise ConfigurationError(f"[initial] d0 must be >= 0, got {init.d0}")

    species = []
    for s in settings["species"]:
        sigma = _float("species", "sigma", s["sigma"])
        if sigma == 0.0:
            raise ConfigurationError("[species] sigma must be non-zero")
        weight = None if s["weight"] is None else _float("species", "weight", s["weight"])
        if weight is not None and not weight > 0.0:
            raise ConfigurationError(f"[species] weight must be positive, got {weight}")
        count = int(s["count"])
        if count < 0:
            raise ConfigurationError(f"[species] count must be >= 0, got {count}")
        species.append(Species(sigma=sigma, weight=weight, count=count))

    eps = settings["field"]["epsilon"]
    if eps != "auto":
        eps = _float("field", "epsilon", eps)
        if eps < 0.0:
            raise ConfigurationError(f"[field] epsilon must be >= 0 or 'auto', got {eps}")

    step_kw = dict(settings["step"])
    step_kw["freeze_E"] = bool(step_kw["freeze_E"])
    step_kw["max_floor_hits"] = int(step_kw["max_floor_hits"])
    for key in ("dt_macro", "c_rot", "c_dist", "dt_floor"):
        step_kw[key] = _float("step", key, step_kw[key])
    step = StepPolicy(**step_kw)
    if not step.dt_macro > 0.0 or not step.c_rot > 0.0 or not step.dt_floor > 0.0:
        raise ConfigurationError("[step] dt_macro, c_rot and dt_floor must be positive")
    if step.c_dist < 0.0:
        raise ConfigurationError(f"[step] c_dist must be >= 0, got {step.c_dist}")

    run = settings["run"]
    T = _float("run", "T", run["T"])
    if not T > 0.0:
        raise ConfigurationError(f"[run] T must be positive, got {T}")

    o = settings["output"]
    out = OutputConfig(
        snapshot_times=sorted(_float("output", "snapshot_times", t) for t in o["snapshot_times"]),
        diag_every=int(o["diag_every"]),
        radii=[_float("output", "radii", R) for R in o["radii"]],
        n_tracers=int(o["n_tracers"]),
        avg_window=_float("output", "avg_window", o["avg_window"]),
        rungs=[_float("output", "rungs", N) for N in o["rungs"]],
        progress=bool(o["progress"]),
    )
    if any(R <= 0 for R in out.radii):
        raise ConfigurationError("[output] radii must be positive")
    if int(out.diag_every) < 1:
        raise ConfigurationError("[output] diag_every must be >= 1")

    return RunConfig(
        scenario=settings["scenario"],
        geometry=geometry,
        initial=init,
        species=species,
        epsilon=eps,
        step=step,
        T=T,
        seed=int(run["seed"]),
        workers=None if run["workers"] is None else int(run["workers"]),
        particle=settings["particle"],
        output=out,
    )


def _body_scale(g):
    """(name, size) of the shielded body, or None when there is none."""
    if g.kind == TORUS:
        return "R", g.R
    if g.kind == CYLINDER:
        return "A", g.A
    if g.kind == HALFSPACE:
        return "L_cut", g.L_cut
    return None


def hypothesis_violations(cfg):
    """Every violated hypothesis of the theorem matching the scenario, as messages."""
    out = []
    g, init = cfg.geometry, cfg.initial
    a, q = init.alpha_decay, init.q
    signs = {s.sigma > 0 for s in cfg.species if s.count > 0}

    if g.kind == TORUS and not g.tau > 3.5:
        out.append(f"Theorems 1-2 require τ > 7/2 for the torus field, got τ={g.tau}")
    if cfg.step.c_dist == 0.0:
        out.append("the approach limit c_dist = 0 lets particles step through the shield")
    if init.spatial_mode == BEAM:
        out.append("beam initial data lies outside every theorem's data class")

    if cfg.scenario == SINGLE_PARTICLE:
        return out
    if not init.d0 > 0.0:
        out.append(f"the initial support must stay at positive distance from Gamma, got d0={init.d0}")
    scale = _body_scale(g)
    if scale is not None and not init.R_dom >= 10.0 * scale[1]:
        out.append(
            f"the sampled domain must reach R_dom ≥ 10·{scale[0]} = {10.0 * scale[1]:g}, got R_dom={init.R_dom}"
        )

    if cfg.scenario == TORUS_TWO_SIGN:
        if not a > 3.0:
            out.append(f"Theorem 1 requires α > 3, got α={a}")
        if not q > 18.0 / 7.0:
            out.append(f"Theorem 1 requires q > 18/7, got q={q}")
    elif cfg.scenario == TORUS_SAME_SIGN:
        if len(signs) > 1:
            out.append("Theorem 2 requires all species to carry charges of the same sign")
        if not 8.0 / 3.0 < a <= 3.0:
            out.append(f"Theorem 2 requires 8/3 < α ≤ 3, got α={a}")
        bound = 45.0 / 7.0 - 9.0 * a / 7.0
        if not q > bound:
            out.append(f"Theorem 2 requires q > 45/7 − (9/7)α = {bound:.6g}, got q={q}")
    else:
        # straight field lines: gaussian velocity tails are admissible
        if g.kind in (TORUS, NONE):
            out.append(f"scenario {cfg.scenario} needs a {cfg.scenario} geometry, got {g.kind}")
        if not q >= 2.0:
            out.append(f"straight-line shields require q >= 2, got q={q}")
        low = 3.0 if len(signs) > 1 else 8.0 / 3.0
        if not a > low:
            out.append(f"straight-line shields require α > {low:.6g}, got α={a}")
    return out


def parse_config(text, allow_violation=False):
    """Parse and validate a YAML config; every default that applies is recorded in `resolved`."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigurationError(f"invalid YAML: {err}") from None

    settings = resolve(raw)
    cfg = _build(settings)
    cfg.allow_violation = bool(allow_violation)

    violations = hypothesis_violations(cfg)
    if violations and not allow_violation:
        raise HypothesisError("; ".join(violations))
    for msg in violations:
        print(f"[LOADER] WARNING (hypothesis override): {msg}")
    cfg.violations = violations

    cfg.resolved = settings
    cfg.config_hash = text_hash(yaml.safe_dump(settings, sort_keys=True))
    return cfg


def load_config(path, allow_violation=False):
    print(f"[LOADER] Loading parameters from {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), allow_violation=allow_violation)


def with_overrides(cfg, seed=None, workers=None):
    if seed is not None:
        cfg.seed = int(seed)
        cfg.resolved["run"]["seed"] = int(seed)
    if workers is not None:
        cfg.workers = int(workers)
        cfg.resolved["run"]["workers"] = int(workers)
    cfg.config_hash = text_hash(yaml.safe_dump(cfg.resolved, sort_keys=True))
    return cfg
