"""Pytest fixtures for lakf tests"""
import logging
import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch

from lakf.dataio import make_splits, simulate_dataset
from lakf.learned_filters import NetworkConfig, Variant, build_network
from lakf.synthetic import constant_velocity_tracks, maneuvering_tracks


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def temp_dir():
    """Create temporary directory for tests"""
    temp_path = tempfile.mkdtemp()
    yield Path(temp_path)
    shutil.rmtree(temp_path)


@pytest.fixture
def clean_logging():
    """Removes root handlers before and after a test"""
    root = logging.getLogger()
    for handler in root.handlers[:]:
        handler.close()
        root.removeHandler(handler)
    yield
    for handler in root.handlers[:]:
        handler.close()
        root.removeHandler(handler)


@pytest.fixture
def cv_tracks():
    """Twenty constant-velocity ground-truth tracks of 30 frames"""
    return constant_velocity_tracks(20, 30, seed=7)


@pytest.fixture
def dance_tracks():
    """Twelve maneuvering ground-truth tracks of 24 frames"""
    return maneuvering_tracks(12, 24, seed=3)


@pytest.fixture
def semi_sim(dance_tracks):
    """Maneuvering tracks with alpha_p=0.05 measurements"""
    return simulate_dataset(dance_tracks, 0.05, seed=1)


@pytest.fixture
def small_split(semi_sim):
    """Temporal split of the maneuvering tracks with a validation subset"""
    return make_splits(semi_sim, val_fraction=0.25, seed=0)


@pytest.fixture
def small_config():
    """Network configuration small enough for fast float64 tests"""
    return NetworkConfig(hidden_dim=8, sie_channels=2)


@pytest.fixture(params=[Variant.KNET, Variant.SKNET, Variant.SIKNET], ids=lambda v: v.value)
def small_net(request, small_config):
    """Every learned variant with hidden width 8"""
    return build_network(request.param, small_config, seed=0)


@pytest.fixture
def check_sequence():
    """Short noisy XYAH sequence with small coordinates, shape (1, 6, 4) for meas and gt"""
    rng = np.random.default_rng(11)
    t = np.arange(6, dtype=np.float64)
    gt = np.stack([1.0 + 0.3 * t, 2.0 - 0.1 * t, np.full(6, 0.5), np.full(6, 2.0)], axis=1)
    meas = gt + rng.normal(scale=[0.05, 0.05, 0.01, 0.05], size=gt.shape)
    return torch.from_numpy(meas).unsqueeze(0), torch.from_numpy(gt).unsqueeze(0)
