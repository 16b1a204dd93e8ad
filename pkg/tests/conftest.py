"""Shared session fixtures: one dataset, trained classifiers and a pretrained flow.

Training runs once per session and the models are deep-copied before any
test mutates adapter weights.
"""
from __future__ import annotations

import copy

import numpy as np
import pytest

from dualflow.data import shapes_dataset
from dualflow.nn import VelocityConfig, VelocityModel
from dualflow.train import TrainConfig, pretrain_flow_matching, train_classifier

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Append a one-line PASS/FAIL verdict that is echoed in the terminal summary."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def _record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return _record


@pytest.fixture(scope="session")
def shapes():
    return shapes_dataset(0, 4000)


@pytest.fixture(scope="session")
def splits(shapes):
    """(train, test) with the test part never seen by any trained model."""
    return shapes.split(0.2, 0)


@pytest.fixture(scope="session")
def source(splits):
    clf, res = train_classifier("small-conv", splits[0], TrainConfig(epochs=8, lr=2e-3, seed=1))
    assert res.test_accuracy >= 0.9
    return clf


@pytest.fixture(scope="session")
def victim(splits):
    clf, res = train_classifier("mlp", splits[0], TrainConfig(epochs=15, lr=2e-3, seed=2))
    assert res.test_accuracy >= 0.8
    return clf


@pytest.fixture(scope="session")
def smooth_source(splits):
    clf, _ = train_classifier("mlp", splits[0], TrainConfig(epochs=5, lr=2e-3, seed=3), activation="silu")
    return clf


@pytest.fixture(scope="session")
def _pretrained(splits):
    model = VelocityModel(VelocityConfig((16, 16), 8))
    pretrain_flow_matching(model, splits[0], TrainConfig(epochs=30, lr=1e-3, seed=2))
    return model


@pytest.fixture
def flow(_pretrained):
    """A fresh copy of the pretrained velocity model."""
    return copy.deepcopy(_pretrained)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
