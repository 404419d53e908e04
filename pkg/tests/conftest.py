import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from ensemble import InitialData, Species, sample_initial  # noqa: E402
from geometry import ShieldGeometry  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture
def torus():
    return ShieldGeometry.torus(R=2.0, r0=0.5, tau=4.0)


@pytest.fixture
def cylinder():
    return ShieldGeometry.cylinder(A=1.0, tau=2.0)


@pytest.fixture
def halfspace():
    return ShieldGeometry.halfspace(tau=2.0, L_cut=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def same_sign_ensemble(torus):
    init = InitialData(alpha_decay=2.8, q=2.9, R_dom=6.0, N_cut=4.0)
    species = [Species(sigma=1.0, weight=1e-3, count=60), Species(sigma=0.5, weight=1e-3, count=60)]
    return sample_initial(init, species, torus, seed=7)


@pytest.fixture
def two_sign_ensemble(torus):
    init = InitialData(alpha_decay=3.5, q=3.0, R_dom=6.0, N_cut=4.0)
    species = [Species(sigma=1.0, weight=1e-3, count=60), Species(sigma=-1.0, weight=1e-3, count=60)]
    return sample_initial(init, species, torus, seed=11)
