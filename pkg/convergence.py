"""
Cutoff-removal study: paired runs of the partial dynamics at cutoffs
N_small < N_large started from the same sampled data.
"""

from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from dynamics import advance
from ensemble import apply_cutoff
from utils import ConfigurationError

PAIR_COLUMNS = ["N_small", "N_large", "t", "delta", "eta", "sigma"]


@dataclass
class PairRunReport:
    N_small: float
    N_large: float
    t: np.ndarray
    delta: np.ndarray
    eta: np.ndarray
    n_common: int = 0

    @property
    def sigma(self):
        return self.delta + self.eta

    @property
    def sigma_T(self):
        return float(self.sigma[-1]) if len(self.t) else 0.0


class _Recorder:
    """Keeps x, v of a fixed id set at every macro step."""

    def __init__(self, ids):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.t = []
        self.x = []
        self.v = []

    def __call__(self, step, t, e, E):
        rows = np.searchsorted(e.ids, self.ids)
        self.t.append(t)
        self.x.append(e.x[rows].copy())
        self.v.append(e.v[rows].copy())


def pair_gaps(ids_a, x_a, v_a, ids_b, x_b, v_b, common_ids=None):
    """sup over the common ids of |x_a - x_b| and |v_a - v_b|, joined on id.

    Row order of either side does not matter.
    """
    ids_a = np.asarray(ids_a)
    ids_b = np.asarray(ids_b)
    if common_ids is None:
        common_ids = np.intersect1d(ids_a, ids_b)
    if len(common_ids) == 0:
        return 0.0, 0.0
    oa = np.argsort(ids_a)
    ob = np.argsort(ids_b)
    ra = oa[np.searchsorted(ids_a, common_ids, sorter=oa)]
    rb = ob[np.searchsorted(ids_b, common_ids, sorter=ob)]
    delta = np.max(np.linalg.norm(np.asarray(x_a)[ra] - np.asarray(x_b)[rb], axis=-1))
    eta = np.max(np.linalg.norm(np.asarray(v_a)[ra] - np.asarray(v_b)[rb], axis=-1))
    return float(delta), float(eta)


def check_pair_settings(fp_a, sp_a, fp_b, sp_b):
    if fp_a.epsilon != fp_b.epsilon:
        raise ConfigurationError(
            f"paired runs need the same softening, got {fp_a.epsilon} and {fp_b.epsilon}"
        )
    if sp_a.dt_macro != sp_b.dt_macro:
        raise ConfigurationError(
            f"paired runs need the same macro step, got {sp_a.dt_macro} and {sp_b.dt_macro}"
        )


def run_pair(base, N_small, N_large, g, fp, sp, T, fp_large=None, sp_large=None, progress=False):
    """Evolve the cutoff-N_small and cutoff-N_large data and record their gaps.

    The comparison set is the particles with initial |v| <= N_small; gaps are
    matched by particle id at every macro step.
    """
    fp_large = fp if fp_large is None else fp_large
    sp_large = sp if sp_large is None else sp_large
    check_pair_settings(fp, sp, fp_large, sp_large)
    if N_small > N_large:
        raise ConfigurationError(f"N_small={N_small} must not exceed N_large={N_large}")
    if base.meta.get("N_cut", np.inf) < N_large:
        raise ConfigurationError(
            f"base data was sampled with cutoff {base.meta['N_cut']} < N_large={N_large}"
        )

    small = apply_cutoff(base, N_small)
    large = apply_cutoff(base, N_large)
    common = small.ids.copy()

    rec_small = _Recorder(common)
    rec_large = _Recorder(common)
    advance(small, g, fp, sp, T, hooks=(rec_small,), progress=progress)
    if N_small == N_large:
        rec_large = rec_small
    else:
        advance(large, g, fp_large, sp_large, T, hooks=(rec_large,), progress=progress)

    n = min(len(rec_small.t), len(rec_large.t))
    delta = np.zeros(n)
    eta = np.zeros(n)
    for k in range(n):
        delta[k], eta[k] = pair_gaps(
            common, rec_small.x[k], rec_small.v[k], common, rec_large.x[k], rec_large.v[k], common
        )

    report = PairRunReport(
        N_small=N_small,
        N_large=N_large,
        t=np.asarray(rec_small.t[:n]),
        delta=delta,
        eta=eta,
        n_common=len(common),
    )
    print(
        f"[CONV] N={N_small} vs {N_large}: {len(common)} common particles, "
        f"sigma(T)={report.sigma_T:.3e}"
    )
    return report


def run_ladder(base, rungs, g, fp, sp, T, progress=True):
    """One pair (N, 2N) per rung."""
    reports = []
    for N in tqdm(sorted(rungs), disable=not progress, desc="[CONV]"):
        reports.append(run_pair(base, N, 2 * N, g, fp, sp, T))
    return reports


def cauchy_report(reports):
    """Table of (N_small, N_large, sigma_T, ratio to the previous rung)."""
    if len(reports) < 3:
        raise ConfigurationError(f"a Cauchy report needs at least 3 rungs, got {len(reports)}")
    sig = np.array([r.sigma_T for r in reports])
    prev = np.concatenate(([np.nan], sig[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(prev > 0.0, sig / prev, 0.0)
    ratio[0] = np.nan
    df = pd.DataFrame(
        {
            "N_small": [r.N_small for r in reports],
            "N_large": [r.N_large for r in reports],
            "sigma_T": sig,
            "ratio": ratio,
        }
    )
    df["decreasing"] = np.concatenate(([True], sig[1:] < sig[:-1]))
    return df


def pair_frame(reports):
    frames = [
        pd.DataFrame(
            {
                "N_small": r.N_small,
                "N_large": r.N_large,
                "t": r.t,
                "delta": r.delta,
                "eta": r.eta,
                "sigma": r.sigma,
            },
            columns=PAIR_COLUMNS,
        )
        for r in reports
    ]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=PAIR_COLUMNS)


def write_pair_csv(reports, path):
    df = pair_frame(reports)
    df.to_csv(path, index=False, float_format="%.17g")
    print(f"[CONV] wrote {len(df)} rows to {path}")
    return df
