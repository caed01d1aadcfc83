import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from xcache.latent_model import ModelConfig, ToyDiT, parse_layout

settings.register_profile(
    "repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# two groups, 12 tokens each, so K = 32 keeps the full tensor and K = 4 subsamples
SMALL_LAYOUT = parse_layout("a:1:1x3x4,b:2:2x2x3")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(
        num_blocks=4, num_steps=2, layout=SMALL_LAYOUT, channels=4, block_cost_tokens=8
    )


@pytest.fixture(scope="session")
def small_model(small_config):
    return ToyDiT(small_config)


@pytest.fixture(scope="session")
def default_model():
    return ToyDiT(ModelConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
