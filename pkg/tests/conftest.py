"""Shared fixtures; puts src/ and the repo root on sys.path like main.py does."""
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT_DIR = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT_DIR / "src"))
sys.path.insert(0, str(ROOT_DIR))

from modules.backbones import FrozenBackbone, ScalerParams, SeasonalNaive  # noqa: E402
from modules.spectral import ForecastBlock  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def root_dir():
    return ROOT_DIR


class ConstantForecaster:
    """Backbone stub returning the same normalized block for every window."""

    def __init__(self, values, scaler=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.scaler = scaler or ScalerParams(0.0, 1.0)

    def forecast(self, sample):
        return ForecastBlock(self.values, "normalized")


@pytest.fixture
def identity_backbone():
    """Seasonal naive with period = lookback = horizon: the forecast is the input window."""
    def make(horizon=12):
        return FrozenBackbone(SeasonalNaive(horizon), ScalerParams(0.0, 1.0), horizon, horizon)
    return make


@pytest.fixture
def small_spec(tmp_path):
    """A fast synthetic spec: 3 nodes, period-12 tones, amplitude drift over the test split."""
    def write(drift=0.004, length=480, name="small.spec"):
        path = tmp_path / name
        path.write_text(
            "n_nodes = 3\n"
            f"length = {length}\n"
            "tones = 0.0833333333:10:0, 0.1666666667:4:0.5\n"
            "level = 50\n"
            "noise_std = 0.2\n"
            "node_spread = 0.2\n"
            f"amp_drift_rate = {drift}\n"
            "sampling_interval = 7200\n"
            "split = 0.6,0.2,0.2\n"
            "seed = 3\n",
            encoding="utf-8",
        )
        return path
    return write


@pytest.fixture
def constant_forecaster():
    return ConstantForecaster
