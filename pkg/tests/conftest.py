import numpy as np
import pytest

from echolocate.acoustics import AcousticParams
from echolocate.agent import World
from echolocate.geometry import EnvConfig
from echolocate.qnet import NetArchitecture

from oracles import ACCEPTANCE_LINES


@pytest.fixture
def small_world():
    # short clips keep rendering cheap; 0.1 s gives 5 log-mel frames
    return World(EnvConfig(clip_seconds=0.1, horizon=10), AcousticParams(max_order=0))


@pytest.fixture
def tiny_arch():
    return NetArchitecture(conv_channels=(4, 4, 4), embed_dim=8)


@pytest.fixture
def tiny_stateful():
    return NetArchitecture(
        variant="stateful", conv_channels=(4, 4, 4), embed_dim=8, history_len=3, attn_heads=2, action_embed_dim=4
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
