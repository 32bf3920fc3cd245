# conftest.py - Shared fixtures for the simulator tests
import math
from pathlib import Path

import numpy as np
import pytest

from model_core import load_config, validate
from trial_sampler import TrialBatch

ROOT = Path(__file__).parent


@pytest.fixture
def reference_config():
    return load_config(ROOT / "reference_config.json")


@pytest.fixture
def make_config():
    """
    Factory for validated configs. `per_mode_mean` sets the write rate so
    each mode ends the write pulse with that mean occupation.
    """
    def factory(per_mode_mean=None, **fields):
        data = dict(fields)
        if per_mode_mean is not None:
            depth = data.get("optical_depth", 20.0)
            duration = data.get("write_duration", 1.6)
            data["single_atom_rate"] = math.log1p(per_mode_mean) / (depth * duration)
        return validate(data)
    return factory


@pytest.fixture
def lossless(make_config):
    """Ideal retrieval, unit efficiencies, no background, no storage"""
    def factory(per_mode_mean=0.5, **fields):
        data = dict(
            retrieval_model="ideal",
            stokes_efficiency=1.0,
            antistokes_efficiency=1.0,
            stokes_background=0.0,
            antistokes_background=0.0,
            delay=0.0,
        )
        data.update(fields)
        return make_config(per_mode_mean=per_mode_mean, **data)
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_batch():
    def factory(s1, s2, as1, as2):
        return TrialBatch.from_detector_counts(s1, s2, as1, as2)
    return factory


@pytest.fixture
def poisson_batch(rng, make_batch):
    """Independent Poisson counts on all four detectors"""
    def factory(trials=200_000, means=(0.4, 0.4, 0.2, 0.2)):
        columns = [rng.poisson(m, size=trials) for m in means]
        return make_batch(*columns)
    return factory


@pytest.fixture
def correlated_batch(rng, make_batch):
    """Lossless single-mode thermal pairs, each channel split 50/50"""
    def factory(trials=200_000, mean=1.0):
        n = rng.geometric(1.0 / (1.0 + mean), size=trials) - 1
        s1 = rng.binomial(n, 0.5)
        as1 = rng.binomial(n, 0.5)
        return make_batch(s1, n - s1, as1, n - as1)
    return factory
