import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.geometry import GeometrySpec  # noqa: E402
from utils.grid import RegularGrid  # noqa: E402
from utils.normal_operator import CutoffSpec, NormalOpConfig, WeightSpec  # noqa: E402
from utils.phantoms import GaussianBump  # noqa: E402


@pytest.fixture
def geometry():
    return GeometrySpec()


@pytest.fixture
def conformal():
    return GeometrySpec(metric_id="conformal", metric_eps=0.05)


@pytest.fixture
def bump(geometry):
    return GaussianBump(tuple(geometry.c_M), 0.2)


@pytest.fixture
def op_config():
    """Coarse global operator for desk-scale tests"""
    return NormalOpConfig(h=0.2, n_lambda=12, n_omega=24, t_step=0.02)


@pytest.fixture
def scattering_config():
    return NormalOpConfig(
        h=0.2, weight=WeightSpec("scattering"), n_lambda=12, n_omega=24, t_step=0.02
    )


@pytest.fixture
def shifted_cutoff():
    return CutoffSpec(profile="shifted", shift=4.0)


@pytest.fixture
def small_grid(geometry):
    return RegularGrid.covering(geometry, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def run_root(tmp_path):
    return str(tmp_path / "runs")
