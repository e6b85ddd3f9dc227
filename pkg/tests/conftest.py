import sys

import numpy as np
import pytest

from fasttcm.config import Config
from fasttcm.model import FastTCM
from fasttcm.synthgen import build_dataset


@pytest.fixture(scope="session")
def cfg():
    return Config().validate()


@pytest.fixture
def model(cfg):
    return FastTCM(cfg, seed=0)


@pytest.fixture(scope="session")
def images(cfg):
    rng = np.random.default_rng(123)
    return rng.uniform(size=(3, cfg.encoder.H, cfg.encoder.W, 3))


@pytest.fixture(scope="session")
def tiny_data(cfg):
    """A small train/test pair for quick training runs."""
    small = cfg.copy(n_train=16, n_test=6)
    return small, build_dataset(small, "train"), build_dataset(small, "test")


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(acc, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
