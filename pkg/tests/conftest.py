from pathlib import Path

import numpy as np
import pytest

from qdzelda.config import LEVELS_DIR, ExperimentConfig
from qdzelda.env import Action, EnvConfig, load_level_set, parse_level

CORRIDOR = "wwwwwww\nwA.+.gw\nwwwwwww\n"


@pytest.fixture
def corridor():
    return parse_level(CORRIDOR)


@pytest.fixture(scope="session")
def default_levels():
    return load_level_set(LEVELS_DIR / "default.txt")


@pytest.fixture(scope="session")
def desk_levels():
    return load_level_set(LEVELS_DIR / "desk3.txt")


@pytest.fixture
def env_cfg():
    return EnvConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def scripted(actions):
    """Policy that replays ``actions`` by tick, then repeats the last one."""
    actions = [Action(a) for a in actions]

    def policy(state, level):
        return actions[min(state.tick, len(actions) - 1)]
    return policy


def always(action):
    return lambda state, level: Action(action)


def small_config(tmp_path: Path = None, **kw) -> ExperimentConfig:
    base = dict(algorithm="VME", level_manifest="builtin:desk3", budget=50, seed=0)
    base.update(kw)
    return ExperimentConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
