import sys
import time
from dataclasses import replace
from pathlib import Path

import numba
import numpy as np
import pandas as pd
import wandb
import yaml

from config import SINGLE_PARTICLE, load_config, with_overrides
from convergence import cauchy_report, run_ladder, write_pair_csv
from diagnostics import (
    Monitor,
    avg_field_window,
    corollary_ratios,
    field_time_integral,
    q_profile,
    write_diag_csv,
)
from dynamics import advance
from ensemble import Ensemble, default_softening, sample_initial, save_snapshot
from geometry import CYLINDER, HALFSPACE, NONE, TORUS, shield_distance
from selffield import FieldParams, efield_all, kinetic_energy, particle_potentials
from shield_fields import in_field_band, verification_samples, verify_curl, verify_divergence
from utils import (
    EXIT_CONFIG,
    EXIT_FAILED,
    EXIT_OK,
    ConfigurationError,
    PenetrationError,
    StiffnessError,
    exit_code_for,
    gen_run_name,
    get_args,
    set_seed,
    set_workers,
    spawn_rng,
    wandb_enabled,
)

__version__ = "0.1.0"

FIELD_TOLERANCE = 1e-5


class SnapshotWriter:
    """Hook saving the ensemble at the first macro step at or after each requested time."""

    def __init__(self, times, folder, config_hash):
        self.pending = sorted(times)
        self.folder = Path(folder)
        self.config_hash = config_hash
        self.written = []

    def __call__(self, step, t, e, E):
        while self.pending and self.pending[0] <= t + 1e-9 * max(1.0, abs(t)):
            ts = self.pending.pop(0)
            path = save_snapshot(e, self.folder / f"snapshot_t{ts:g}.csv", self.config_hash)
            self.written.append(str(path))


def build_ensemble(cfg):
    g = cfg.geometry
    if cfg.scenario == SINGLE_PARTICLE:
        p = cfg.particle
        x = np.asarray(p["x"], dtype=float)
        v = np.asarray(p["v"], dtype=float)
        if x.shape != (3,) or v.shape != (3,):
            raise ConfigurationError("[particle] x and v must be 3-vectors")
        e = Ensemble.from_arrays(x, v, float(p["sigma"]), float(p["weight"]), seed=cfg.seed)
        if np.any(shield_distance(e.x, g) <= 0.0):
            raise ConfigurationError(f"[particle] x={x.tolist()} lies inside the shielded body")
        return e
    return sample_initial(cfg.initial, cfg.species, g, cfg.seed)


def resolve_softening(cfg, e):
    if cfg.epsilon == "auto":
        eps = default_softening(e)
        print(f"[SIM] softening epsilon = {eps:.6g} (half the mean nearest-neighbour spacing)")
        return FieldParams(epsilon=eps)
    return FieldParams(epsilon=float(cfg.epsilon))


def pick_tracers(e, n):
    if len(e) == 0 or n <= 0:
        return np.zeros(0, dtype=np.int64)
    rows = np.unique(np.linspace(0, len(e) - 1, min(n, len(e))).astype(np.int64))
    return e.ids[rows]


def _plain(value):
    """Convert numpy scalars/arrays for yaml.safe_dump."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(folder, cfg, command, status, code, wall_time, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "workers": numba.get_num_threads(),
        "wall_time_s": round(wall_time, 3),
        "status": status,
        "exit_code": code,
        "label": "UNSAFE: hypothesis override" if cfg.allow_violation else "within theorem hypotheses",
        "config": cfg.to_manifest(),
    }
    if extra:
        manifest.update(extra)
    path = Path(folder) / "manifest.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(_plain(manifest), f, sort_keys=False)
    print(f"[MAIN] wrote manifest to {path}")
    return path


def sensitivity_report(cfg):
    """Initial diagnostics with the data truncated at R_dom and at R_dom/2."""
    rows = []
    for R_dom in (cfg.initial.R_dom, 0.5 * cfg.initial.R_dom):
        init = replace(cfg.initial, R_dom=R_dom)
        e = sample_initial(init, cfg.species, cfg.geometry, cfg.seed)
        fp = resolve_softening(cfg, e)
        potentials = particle_potentials(e, fp)
        E = efield_all(e, fp)
        near = in_field_band(e.x, cfg.geometry)
        row = {
            "R_dom": R_dom,
            "n_particles": len(e),
            "kinetic": kinetic_energy(e),
            "potential": 0.5 * float(np.sum(e.charge * potentials)),
            "E_near_shield_max": float(np.linalg.norm(E[near], axis=1).max()) if near.any() else 0.0,
        }
        radii = cfg.output.radii
        Q = q_profile(e, radii, fp, potentials) if e.same_sign else np.full(len(radii), np.nan)
        for i, q in enumerate(Q, start=1):
            row[f"Q_R{i}"] = q
        rows.append(row)
    df = pd.DataFrame(rows)
    print(f"[DIAG] truncation sensitivity:\n{df.to_string(index=False)}")
    return df


def simulate(cfg, folder, log):
    start = time.perf_counter()
    g = cfg.geometry
    e = build_ensemble(cfg)
    fp = resolve_softening(cfg, e)
    save_snapshot(e, folder / "snapshot_t0.csv", cfg.config_hash)

    tracers = pick_tracers(e, cfg.output.n_tracers)
    monitor = Monitor(
        g,
        fp,
        radii=cfg.output.radii,
        tracer_ids=tracers,
        every=cfg.output.diag_every,
        log_fn=wandb.log if log else None,
    )
    snapshots = SnapshotWriter(cfg.output.snapshot_times, folder, cfg.config_hash)

    status, code, extra = "completed", EXIT_OK, {"epsilon": fp.epsilon, "n_particles": len(e)}
    print(f"[SIM] Evolving {len(e)} particles to T={cfg.T} in {g.kind} geometry")
    try:
        final, _ = advance(
            e, g, fp, cfg.step, cfg.T, hooks=(snapshots, monitor), progress=cfg.output.progress
        )
    except (PenetrationError, StiffnessError) as err:
        print(f"[SIM] {type(err).__name__}: {err}")
        final = None
        status, code = type(err).__name__, exit_code_for(err)
        extra["failure"] = {"particle_id": err.particle_id, "t": err.t}
        if isinstance(err, PenetrationError):
            extra["failure"].update({"x": err.x, "v": err.v})

    write_diag_csv(monitor.records, folder / "diagnostics.csv", monitor.radii, monitor.tracer_ids)
    extra["snapshots"] = snapshots.written

    if final is not None:
        save_snapshot(final, folder / f"snapshot_t{cfg.T:g}.csv", cfg.config_hash)
        extra["substeps"] = final.meta.get("substeps", 0)
        times, series = monitor.tracer_field_series()
        if series.size and cfg.output.avg_window <= times[-1] - times[0]:
            starts, avg = avg_field_window(times, series, cfg.output.avg_window)
            window = pd.DataFrame(avg, columns=[f"E_avg_{tid}" for tid in monitor.tracer_ids])
            window.insert(0, "t", starts)
            window.to_csv(folder / "tracer_fields.csv", index=False, float_format="%.17g")
            extra["field_time_integral"] = dict(
                zip(monitor.tracer_ids.tolist(), field_time_integral(times, series)[-1].tolist())
            )
        if monitor.records:
            last = monitor.records[-1]
            max_field = float(series.max()) if series.size else 0.0
            extra["corollary_ratios"] = corollary_ratios(
                last.running_max_speed, max_field, cfg.initial.N_cut
            )

    if cfg.theorem_two:
        sensitivity_report(cfg).to_csv(folder / "sensitivity.csv", index=False, float_format="%.17g")

    write_manifest(folder, cfg, "simulate", status, code, time.perf_counter() - start, extra)
    return code


def convergence(cfg, folder, log):
    start = time.perf_counter()
    rungs = sorted(cfg.output.rungs)
    if cfg.initial.N_cut < 2 * rungs[-1]:
        raise ConfigurationError(
            f"convergence ladder up to N={2 * rungs[-1]:g} needs initial N_cut >= that, "
            f"got {cfg.initial.N_cut}"
        )
    base = build_ensemble(cfg)
    fp = resolve_softening(cfg, base)
    reports = run_ladder(
        base, rungs, cfg.geometry, fp, cfg.step, cfg.T, progress=cfg.output.progress
    )
    write_pair_csv(reports, folder / "pairs.csv")

    extra = {"epsilon": fp.epsilon}
    if len(reports) >= 3:
        table = cauchy_report(reports)
        table.to_csv(folder / "cauchy.csv", index=False, float_format="%.17g")
        print(f"[CONV] Cauchy report:\n{table.to_string(index=False)}")
        extra["sigma_T"] = table["sigma_T"].tolist()
        extra["monotone"] = bool(table["decreasing"].all())
        if log:
            wandb.log({"cauchy": wandb.Table(dataframe=table)})

    write_manifest(folder, cfg, "convergence", "completed", EXIT_OK, time.perf_counter() - start, extra)
    return EXIT_OK


def verify_fields(cfg, folder, log, n_samples=1000):
    start = time.perf_counter()
    g = cfg.geometry
    if g.kind == NONE:
        raise ConfigurationError("verify-fields needs a shield geometry, got none")
    rng = spawn_rng(cfg.seed, "verify-fields")
    samples = verification_samples(g, n_samples, rng)

    curl_err = verify_curl(g, samples)
    div_err = verify_divergence(g, samples)
    ok = curl_err < FIELD_TOLERANCE and div_err < FIELD_TOLERANCE
    print(f"[FIELDS] {g.kind}: curl error {curl_err:.3e}, divergence {div_err:.3e}")
    print(f"[FIELDS] {'PASSED' if ok else 'FAILED'} (tolerance {FIELD_TOLERANCE:g})")

    pd.DataFrame(
        [{"kind": g.kind, "samples": n_samples, "curl_error": curl_err, "div_error": div_err}]
    ).to_csv(folder / "fields.csv", index=False, float_format="%.17g")
    if log:
        wandb.log({"curl_error": curl_err, "div_error": div_err})

    code = EXIT_OK if ok else EXIT_FAILED
    extra = {"curl_error": curl_err, "div_error": div_err}
    write_manifest(folder, cfg, "verify-fields", "completed" if ok else "failed", code,
                   time.perf_counter() - start, extra)
    return code


COMMANDS = {
    "simulate": simulate,
    "convergence": convergence,
    "verify-fields": verify_fields,
}


def main(argv=None):
    args = get_args(argv)

    try:
        cfg = load_config(args.config, allow_violation=args.allow_hypothesis_violation)
        cfg = with_overrides(cfg, seed=args.seed, workers=args.workers)
    except (ConfigurationError, OSError) as err:
        print(f"[LOADER] {type(err).__name__}: {err}")
        return EXIT_CONFIG

    set_seed(cfg.seed)
    if cfg.workers is not None:
        set_workers(cfg.workers)

    run_name = gen_run_name(cfg)
    folder = Path(args.out_dir) if args.out_dir else Path("output") / run_name
    folder.mkdir(parents=True, exist_ok=True)
    print(f"[MAIN] {args.command} {cfg.scenario} -> {folder}")

    log = wandb_enabled(args.no_log)
    if log:
        wandb.init(project="MagneticShield", name=run_name, config=_plain(cfg.to_manifest()))

    try:
        code = COMMANDS[args.command](cfg, folder, log)
    except ConfigurationError as err:
        print(f"[MAIN] {type(err).__name__}: {err}")
        code = EXIT_CONFIG
    finally:
        if log:
            wandb.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
