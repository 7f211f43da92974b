"""Shared fixtures for the solver test-suite."""

import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.assembly import OperatorParts, ProblemSpec, element_data, assemble_mass, assemble_stiffness
from modules.mesh import build_unit_square, uniform_hierarchy
from utils.logger import get_logger

HARMONIC = ProblemSpec(gamma=(1.0, 1.0), zeta=1.0)
LAPLACE = ProblemSpec(zeta=0.0)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance studies on several refinement levels")


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Route the event log and the reference cache into the test's tmp dir."""
    log_dir = tmp_path / "logs"
    cache_dir = tmp_path / "cache"
    monkeypatch.setenv("GPE_MLC_CACHE_DIR", str(cache_dir))
    events = get_logger(str(log_dir))
    yield {"logs": log_dir, "cache": cache_dir, "events": events}


def laplace_parts(mesh) -> OperatorParts:
    """Operators of -Delta u = lambda u (W = 0, zeta = 0)."""
    data = element_data(mesh)
    stiffness = assemble_stiffness(mesh, data=data)
    return OperatorParts(mesh=mesh, spec=LAPLACE, data=data, stiffness=stiffness,
                         potential=sp.csr_matrix(stiffness.shape),
                         mass=assemble_mass(mesh, data=data))


@pytest.fixture
def square_hierarchy():
    """Unit square n = 2, 4, 8, 16."""
    return uniform_hierarchy(build_unit_square(2), 4)


@pytest.fixture
def harmonic_hierarchy():
    """Harmonic-trap meshes n = 6, 12, 24."""
    return uniform_hierarchy(build_unit_square(6), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
