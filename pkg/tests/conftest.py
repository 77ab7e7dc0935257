"""Shared fixtures: seeded generators, synthetic photographs, tiny networks."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.band_encoder import WhiteningTransform
from src.blind_filter_net import init_weights, preset
from src.image_core import Image
from tests.oracles import natural_image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sharp_image(rng):
    return Image(natural_image(rng, 96))


@pytest.fixture
def tiny_arch():
    return preset("tiny")


@pytest.fixture
def tiny_weights(tiny_arch):
    return init_weights(tiny_arch, WhiteningTransform.identity(), seed=7)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run timing regressions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: timing regression, skipped without --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
