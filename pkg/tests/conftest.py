from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dualpf.model import linear_gaussian_1d

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def with_likelihood(spec, fn):
    """Copy of ``spec`` with a replaced likelihood ``fn(observation, states)``."""
    return replace(spec, likelihood=fn)


@pytest.fixture
def random_walk():
    return linear_gaussian_1d(a=1.0, b=0.0, q=1.0, c=1.0, r=1.0, m0=0.0, p0=1.0)
