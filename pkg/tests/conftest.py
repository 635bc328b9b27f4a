import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from gains import default_weights  # noqa: E402
from ocp import HorizonConfig  # noqa: E402
from plant import ArmParams, ArmPlant, LinearPlant  # noqa: E402
from run_config import RunConfig  # noqa: E402


@pytest.fixture
def params():
    return ArmParams()


@pytest.fixture
def arm(params):
    return ArmPlant(params)


@pytest.fixture
def weights():
    return default_weights()


@pytest.fixture
def short_horizon():
    # N = 6 steps so OCP solves stay quick
    return HorizonConfig(delta=0.1, horizon_T=6, horizon_unit="steps", m_smooth=2, m_triggered=4)


@pytest.fixture
def double_integrator():
    A_c = np.array([[0.0, 1.0], [0.0, 0.0]])
    B_c = np.array([[0.0], [1.0]])
    return LinearPlant(A_c, B_c, eta1=0.0)


@pytest.fixture
def short_config(tmp_path):
    return RunConfig(
        task="position_reach", controllers=["ideal", "triggered", "smooth"], seeds=[0],
        horizon_t=6, horizon_unit="steps", m_smooth=2, m_triggered=4,
        duration=8, terminal_samples=50, output_dir=str(tmp_path / "out"), workers=1,
    )
