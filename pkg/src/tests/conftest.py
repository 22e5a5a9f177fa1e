"""
Shared fixtures: default arm, solved throw policies and synthetic policies
"""
import numpy as np
import pytest

from src.core.ilqr import AffinePolicy, QuadraticCost
from src.core.pipeline import solve_task
from src.core.plant import ArmModel
from src.utils.config_manager import RunConfig


@pytest.fixture(autouse=True)
def isolated_log_dir(tmp_path, monkeypatch):
    log_dir = tmp_path / "logs"
    monkeypatch.setenv("LOG_DIR", str(log_dir))
    return log_dir


@pytest.fixture
def arm() -> ArmModel:
    return ArmModel()


@pytest.fixture(scope="session")
def run_config() -> RunConfig:
    return RunConfig()


@pytest.fixture(scope="session")
def solved(run_config):
    """Dedicated policies and reports for the 1, 2 and 3 m tasks, solved once"""
    return {task.name: solve_task(run_config, task) for task in run_config.tasks}


def make_policy(rng: np.random.Generator, horizon: int = 5, nx: int = 3, nu: int = 2,
                offset: float = 0.0, name: str = "") -> AffinePolicy:
    """Random affine policy with positive semidefinite value Hessians"""
    hessians = np.empty((horizon + 1, nx, nx))
    for k in range(horizon + 1):
        root = rng.normal(size=(nx, nx))
        hessians[k] = root @ root.T
    cost = QuadraticCost(np.eye(nx), np.zeros(nx), 0.1, 0.0, horizon, 0.01)
    return AffinePolicy(
        nominal_states=rng.normal(size=(horizon + 1, nx)),
        nominal_controls=rng.uniform(0.2, 0.6, size=(horizon, nu)),
        feedforward=rng.normal(scale=0.05, size=(horizon, nu)),
        feedback=rng.normal(scale=0.1, size=(horizon, nu, nx)),
        value_offset=rng.uniform(0.0, 5.0, size=horizon + 1) + offset,
        value_gradient=rng.normal(size=(horizon + 1, nx)),
        value_hessian=hessians,
        cost=cost,
        control_lower=np.zeros(nu),
        control_upper=np.full(nu, 0.8),
        name=name,
    )


@pytest.fixture
def policy_factory():
    return make_policy
