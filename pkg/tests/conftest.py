import json

import numpy as np
import pytest
from click.testing import CliRunner

from app import create_cli
from app.config import TestConfig
from app.services.bathlib import PseudomodeParams, UnderdampedBath
from app.services.modelkit import GroundInfo, ground_info
from app.services.tensorops import PAULI, Op, spin_mode_layout


@pytest.fixture
def cli():
    return create_cli(TestConfig)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def bath():
    return UnderdampedBath(lam=1.0, gamma=1.0, omega0=2.0)


@pytest.fixture
def qubit():
    """Two-level system 0.5 sigma_z with gap 1, coupled through sigma_x."""
    layout = spin_mode_layout(1)
    h_s = Op(layout, 0.5 * PAULI["z"])
    q = Op(layout, PAULI["x"])
    return h_s, q


@pytest.fixture
def qubit_ground(qubit) -> GroundInfo:
    return ground_info(qubit[0])


@pytest.fixture
def cold_mode():
    return PseudomodeParams(omega=1.0, lam=0.3, lindblad_rate=1.0, truncation=3)


@pytest.fixture
def write_config(tmp_path):
    def write(payload: dict, name: str = "config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    return write


@pytest.fixture
def small_config() -> dict:
    """N=2 chain with a short horizon; the full model has dimension 48."""
    return {
        "system": {"n": 2, "g": 1.0, "j": 1.0},
        "bath": {"gamma_omega0_multiple": 0.5},
        "solver": {"t_max": 2.0, "n_times": 5},
        "scan": {"omega0_grid": [1.0, 1.2], "t_max": 2.0, "n_times": 5},
        "sweep": {"lambda_bar_values": [0.0, 0.25, 0.5, 0.75, 1.0], "poly_order": 2, "t_obs": 1.0},
    }


@pytest.fixture
def random_density():
    def make(dim: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        rho = a @ a.conj().T
        return rho / np.trace(rho)

    return make
