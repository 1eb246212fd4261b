import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def tiny_models():
    """Two small denoisers with different weights, for loss and gradient checks."""
    from distreward.toy_diffusion import DenoiserModel

    theta = DenoiserModel.init(2, 2, width=6, seed=1, out_scale=0.5)
    ref = DenoiserModel.init(2, 2, width=6, seed=2, out_scale=0.5)
    return theta, ref


@pytest.fixture(scope="session")
def pretrained():
    """Default task plus a briefly pretrained model (shared across tests)."""
    from distreward.toy_diffusion import DenoiserModel, PretrainConfig, ToyTask, pretrain

    task = ToyTask.default()
    model = DenoiserModel.init(task.dim, task.n_conditions, width=32, seed=0)
    return task, pretrain(model, task, seed=0, config=PretrainConfig(steps=400, batch_size=128))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
