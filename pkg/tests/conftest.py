import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from superpose.data import substream
from superpose.model import ModelConfig, ModelParams, init_params

settings.register_profile("repo", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=3, hidden=16, n_heads=2, ff_mult=2, context=12, seed=5)


def perturbed(params, scale, seed):
    rng = substream(seed, "perturb")
    return ModelParams(params.config, {k: (v + scale * rng.normal(size=v.shape)).astype(np.float32)
                                       for k, v in params.arrays().items()})


@pytest.fixture
def tiny_experts(tiny_config):
    base = init_params(tiny_config)
    base = perturbed(base, 0.05, 1)
    fine = perturbed(base, 0.05, 2)
    return base, fine


@pytest.fixture
def tiny_tokens(tiny_config):
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(6, tiny_config.context + 1))
