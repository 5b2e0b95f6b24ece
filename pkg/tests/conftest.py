import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from wms3m.data import build_windows, fit_scaler, generate_synthetic_trace, make_split
from wms3m.model import ModelConfig, WorldModel

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_features=4, window=8, target_index=0, action_index=3, d_model=16, n_layers=2,
                state_size=8, n_components=2, d_latent=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return WorldModel(tiny_config())


@pytest.fixture(scope="session")
def small_trace():
    return generate_synthetic_trace(0, 600)


@pytest.fixture(scope="session")
def small_data(small_trace):
    plan = make_split(small_trace, (0.7, 0.1, 0.2), 8)
    scaler = fit_scaler(small_trace, plan, 1)
    tr = build_windows(small_trace, plan, scaler, 8, "train")
    va = build_windows(small_trace, plan, scaler, 8, "val")
    return small_trace, plan, scaler, tr, va


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
