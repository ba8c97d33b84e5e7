import numpy as np
import pytest

from satool.surrogate import ForwardPipeline
from satool.trace import TraceConfig, generate_trace


@pytest.fixture(scope="session")
def default_config():
    return TraceConfig()


@pytest.fixture(scope="session")
def default_trace(default_config):
    return generate_trace(default_config)


@pytest.fixture(scope="session")
def default_pipeline(default_trace):
    return ForwardPipeline(default_trace)


@pytest.fixture(scope="session")
def small_config():
    """Tiny trace for hand-checkable forwards."""
    return TraceConfig(layers=1, heads=1, tokens=4, head_dim=3, steps=3,
                       block_size=2, velocity_shape=(2, 2, 2), seed=11)


@pytest.fixture(scope="session")
def small_trace(small_config):
    return generate_trace(small_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
