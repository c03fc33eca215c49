import numpy as np
import pytest

from higrpo.config import Config
from higrpo.env import PromptSpec, VoxelShape, sample_prompt
from higrpo.policy import Dims, PolicyParams
from higrpo.rng import Stream


@pytest.fixture
def tiny_dims():
    return Dims(side=2, colors=3, context=2, features=16, len_s=3, len_v=3)


@pytest.fixture
def tiny_params(tiny_dims):
    return PolicyParams.initial(tiny_dims, Stream(11), 0.5)


@pytest.fixture
def small_config():
    """A few seconds of training: side 3, short reasoning, 3 prompts of 4 members."""
    return Config(run_seed=7, iterations=4, group_size=4, prompts_per_iteration=3, side=3, colors=3,
                  len_s=3, len_v=3, features=64, eval_prompts=9, lr=0.05)


@pytest.fixture
def prompt():
    return sample_prompt(Stream.from_seed(3), "hard")


def shape_from(cells, side=2):
    return VoxelShape(side, np.asarray(cells, dtype=np.int64))


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
