"""
    Shared fixtures for the sacfl test-suite.

    Read more about conftest.py under:
    https://pytest.org/latest/plugins.html
"""
import inspect
import json
import os

import numpy as np
import pytest

from sacfl.config import ExperimentConfig
from sacfl.data_gen import make_blobs
from sacfl.nn_core import init_network


@pytest.fixture
def tiny_experiment_path():
    filepath = inspect.getfile(inspect.currentframe())
    filedir = os.path.dirname(os.path.abspath(filepath))
    return os.path.join(filedir, "tiny_experiment.json")


@pytest.fixture
def tiny_raw(tiny_experiment_path):
    with open(tiny_experiment_path) as fh:
        return json.load(fh)


@pytest.fixture
def tiny_cfg(tiny_raw):
    return ExperimentConfig.from_dict(tiny_raw)


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.delenv("SACFL_THREADS", raising=False)


@pytest.fixture
def blobs():
    return make_blobs(3, 4, 20, separation=6.0, spread=1.0, rng_seed=11)


@pytest.fixture
def small_net():
    return init_network([4, 8, 3], rng_seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
