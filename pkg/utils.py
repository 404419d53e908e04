import argparse
import datetime
import hashlib
import os
import random

import numba
import numpy as np
import wandb
from dotenv import load_dotenv


class ShieldSimError(Exception):
    pass


class ConfigurationError(ShieldSimError, ValueError):
    pass


class HypothesisError(ConfigurationError):
    """The initial data or the field lies outside the shielding ranges."""


class SingularityError(ShieldSimError, ArithmeticError):
    pass


class PenetrationError(ShieldSimError):
    """A particle reached the shielded body: the shield failed."""

    def __init__(self, particle_id, t, x, v):
        self.particle_id = int(particle_id)
        self.t = float(t)
        self.x = np.asarray(x, dtype=float).copy()
        self.v = np.asarray(v, dtype=float).copy()
        super().__init__(
            f"particle {self.particle_id} penetrated the shield at t={self.t:.6g} "
            f"(x={self.x.tolist()}, v={self.v.tolist()})"
        )


class StiffnessError(ShieldSimError):
    def __init__(self, particle_id, t, floor_hits):
        self.particle_id = int(particle_id)
        self.t = float(t)
        self.floor_hits = int(floor_hits)
        super().__init__(
            f"particle {self.particle_id} hit the sub-step floor {self.floor_hits} "
            f"consecutive times at t={self.t:.6g}"
        )


EXIT_OK = 0
EXIT_FAILED = 1
EXIT_PENETRATION = 2
EXIT_STIFFNESS = 3
EXIT_CONFIG = 4


def exit_code_for(err):
    if isinstance(err, PenetrationError):
        return EXIT_PENETRATION
    if isinstance(err, StiffnessError):
        return EXIT_STIFFNESS
    return EXIT_CONFIG


def gen_run_name(config=None):

    timestamp = datetime.datetime.now().strftime("%Y%m%d_%H%M%S")
    if config is not None:
        unsafe = "U_" if config.allow_violation else ""
        run_name = f"run_{config.scenario}_{unsafe}{timestamp}"
    else:
        run_name = f"run_{timestamp}"
    return run_name


def set_seed(seed):
    np.random.seed(seed)
    random.seed(seed)


def set_workers(workers):
    workers = max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(workers)
    return workers


def spawn_rng(seed, stream):
    """Independent, reproducible generator for a named sub-stream of a run seed."""
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    key = int.from_bytes(digest[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def text_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def wandb_enabled(no_log):
    """Log to wandb only when not disabled and a WANDB_SECRET is available."""
    if no_log:
        return False
    load_dotenv()
    secret = os.getenv("WANDB_SECRET")
    if not secret:
        print("[MAIN] WANDB_SECRET not set, wandb logging disabled")
        return False
    wandb.login(key=secret)
    return True


def get_args(argv=None):
    """
    Function to get the arguments from the command line

    Returns:
    - args (Namespace): arguments
    """
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="""Magnetic shield Vlasov-Poisson particle simulator""",
    )

    parser.add_argument(
        "command",
        type=str,
        choices=["simulate", "convergence", "verify-fields"],
        help="What to run",
    )

    parser.add_argument(
        "config",
        type=str,
        help="Path to the yaml config file",
    )

    parser.add_argument(
        "-S",
        "--seed",
        type=int,
        help="Override the config seed",
        default=None,
        metavar="",
    )

    parser.add_argument(
        "-W",
        "--workers",
        type=int,
        help="Number of worker threads for the particle kernels",
        default=None,
        metavar="",
    )

    parser.add_argument(
        "-O",
        "--out-dir",
        type=str,
        help="Output folder (default: output/<run name>)",
        default=None,
        metavar="",
    )

    parser.add_argument(
        "--allow-hypothesis-violation",
        action="store_true",
        help="Run outside the shielding ranges (falsification experiments)",
        default=False,
    )

    parser.add_argument(
        "-NL",
        "--no-log",
        action="store_true",
        help="Set to not log the results on wandb",
        default=False,
    )

    return parser.parse_args(argv)
