import sys

import numpy as np
import pytest

from hisr import env, vocab
from hisr.policy import PolicyNet
from hisr.trajectory import Trajectory, Turn


def act(text):
    return vocab.ids(text)


def traj(actions, outcome=1.0, grounded=None, task_id="t0"):
    """Trajectory with dummy observations; ``actions`` are strings like 'go fridge'."""
    grounded = grounded or [True] * len(actions)
    turns = [Turn((vocab.ID["AT"],), act(a), g) for a, g in zip(actions, grounded)]
    return Trajectory(task_id, tuple(turns), outcome)


def random_traj(rng, m=None, outcome=None, task_id="r"):
    m = int(rng.integers(1, 13)) if m is None else m
    turns = []
    for _ in range(m):
        obs = tuple(int(x) for x in rng.integers(len(vocab.SPECIALS), vocab.VOCAB_SIZE, size=rng.integers(1, 5)))
        turns.append(Turn(obs, env.random_action(rng), bool(rng.random() < 0.7)))
    R = float(rng.integers(0, 2)) if outcome is None else outcome
    return Trajectory(task_id, tuple(turns), R)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_suite():
    return env.generate_task_suite(3, 12, "binary", prefix="sm")


@pytest.fixture(scope="session")
def tiny_net():
    return PolicyNet.create(0, embed=6, hidden=5)


@pytest.fixture(scope="session")
def expert_demos(small_suite):
    rng = np.random.default_rng(0)
    return [env.expert_episode(s, 10 + i, rng, 0.3, 0.1) for i, s in enumerate(small_suite)]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
