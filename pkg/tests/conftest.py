"""Shared fixtures: the repository root on sys.path, tiny models and random groups."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from letor_data import Dataset, QueryGroup  # noqa: E402
from model import ModelConfig, init_params  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_group(rng, n=6, d=8, qid="1", k=4):
    return QueryGroup(qid, rng.normal(size=(n, d)), rng.integers(0, k + 1, size=n))


def random_dataset(rng, num_queries=4, n=5, d=8, k=4):
    groups = tuple(random_group(rng, n, d, str(q + 1), k) for q in range(num_queries))
    return Dataset(groups, d, k)


@pytest.fixture
def tiny_group(rng):
    return random_group(rng)


@pytest.fixture
def tiny_rsa():
    return init_params(ModelConfig(d=8, d_h=4, seed=7))


@pytest.fixture
def letor_text():
    return (
        "2 qid:10 1:0.5 3:1.25 # doc a\n"
        "0 qid:10 2:-1.0\n"
        "\n"
        "# a comment line\n"
        "4 qid:11 1:3.0 2:2.0 3:1.0\n"
        "1 qid:11 3:0.25\n"
        "3 qid:11 1:1e-3\n"
    )
