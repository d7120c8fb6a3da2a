import numpy as np
import pytest

from ncflow.dataset import Split, TrajectoryDataset
from ncflow.metatrain import TrainConfig
from ncflow.models import NetWidths
from ncflow.odeint import IntegratorSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: seeded training runs, deselected by default")


def decay_split(rates, x0s, t):
    """Exact trajectories of dx/dt = -rate * x, shape [envs, trajs, N, d]"""
    t = np.asarray(t, dtype=np.float64)
    X = np.array([[np.exp(-rate * t)[:, None] * np.asarray(x0, dtype=np.float64)[None, :] for x0 in x0s] for rate in rates])
    return Split(t, X)


@pytest.fixture
def toy_dataset():
    """Two decay environments, one trajectory, three steps"""
    t = [0.0, 0.1, 0.2]
    metadata = {
        "system": "toy",
        "environments": {
            "train": [{"rate": 0.5}, {"rate": 1.5}],
            "test": [{"rate": 0.5}, {"rate": 1.5}],
            "ood_train": [{"rate": 1.0}, {"rate": 2.0}],
            "ood_test": [{"rate": 1.0}, {"rate": 2.0}],
        },
        "seed": 0,
        "solver": {"method": "rk4", "dt": 0.05},
    }
    return TrajectoryDataset(
        {
            "train": decay_split([0.5, 1.5], [[1.0, -0.5]], t),
            "test": decay_split([0.5, 1.5], [[0.8, 0.3]], t),
            "ood_train": decay_split([1.0, 2.0], [[1.0, -0.5]], t),
            "ood_test": decay_split([1.0, 2.0], [[0.8, 0.3]], t),
        },
        metadata,
    )


@pytest.fixture
def toy_config():
    return TrainConfig(
        taylor_order=1,
        context_size=2,
        widths=NetWidths((4,), (4,), (6,)),
        pool={"kind": "nearest_first", "p": 2},
        epochs=3,
        solver=IntegratorSpec("rk4", dt=0.05),
        lr_theta=1e-2,
        lr_ctx=1e-2,
        adapt_iters=3,
        log_every=1,
    )
