"""
Backbones - Frozen classical forecasters and the train-split scaler
Stand-ins for pretrained models: fit once on the training split, then every
predict call is a pure function of the input window.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateSeries, FormatError, InvalidConfig, ShapeMismatch, SingularSystem
from .data import SeriesTensor
from .spectral import ForecastBlock

BACKBONE_KINDS = ("seasonal_naive", "historical_average", "ridge")
SCALER_MODES = ("global", "per_node")
BACKBONE_FORMAT = "sttc-backbone"
BACKBONE_VERSION = 1


@dataclass
class ScalerParams:
    """Z-score normalization; mean/std are scalars (global) or length-N vectors (per_node)."""

    mean: np.ndarray
    std: np.ndarray
    mode: str = "global"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mode not in SCALER_MODES:
            raise InvalidConfig(f"unknown scaler mode '{self.mode}'")
        if np.any(self.std <= 0):
            raise DegenerateSeries("scaler std must be positive")

    def _shaped(self, values: np.ndarray, stat: np.ndarray) -> np.ndarray:
        if self.mode == "global":
            return stat
        return stat.reshape((-1,) + (1,) * (values.ndim - 1))

    def transform(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return (values - self._shaped(values, self.mean)) / self._shaped(values, self.std)

    def inverse_transform(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return values * self._shaped(values, self.std) + self._shaped(values, self.mean)

    def node_factors(self, n_nodes: int):
        """(std, mean) broadcast to [N x 1], the affine map inverse_transform applies."""
        std = np.broadcast_to(self.std, (n_nodes,)).reshape(n_nodes, 1)
        mean = np.broadcast_to(self.mean, (n_nodes,)).reshape(n_nodes, 1)
        return std.astype(np.float64), mean.astype(np.float64)


def fit_scaler(train_series, mode: str = "global", target_channel: int = 0) -> ScalerParams:
    """Mean/std of the training split (population convention), target channel only."""
    if mode not in SCALER_MODES:
        raise InvalidConfig(f"unknown scaler mode '{mode}' (expected one of {SCALER_MODES})")
    if isinstance(train_series, SeriesTensor):
        values = np.asarray(train_series.data, dtype=np.float64)[:, :, target_channel]
        if train_series.missing_mask is not None:
            values = np.where(train_series.missing_mask[:, :, target_channel], values, np.nan)
    else:
        values = np.asarray(train_series, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
    if values.size == 0 or not np.isfinite(values).any():
        raise DegenerateSeries("training split has no observed values")

    if mode == "global":
        mean = np.nanmean(values)
        std = np.nanstd(values)
        if not std > 0:
            raise DegenerateSeries("training split has zero variance")
    else:
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(values, axis=1)
            std = np.nanstd(values, axis=1)
        bad = np.flatnonzero(~(std > 0))
        if bad.size:
            raise DegenerateSeries(f"node {int(bad[0])} has zero variance on the training split")
    return ScalerParams(mean, std, mode)


def seasonal_naive_predict(history: np.ndarray, period: int, horizon: int) -> np.ndarray:
    """Repeat the last observed period; falls back to last-value persistence when p > T_h."""
    history = np.asarray(history, dtype=np.float64)
    lookback = history.shape[1]
    if period < 1 or period > lookback:
        return np.repeat(history[:, -1:], horizon, axis=1)
    index = lookback - period + (np.arange(horizon) % period)
    return history[:, index]


class SeasonalNaive:
    kind = "seasonal_naive"

    def __init__(self, period: int):
        self.period = int(period)

    def fit(self, train: np.ndarray, start_index: int = 0, lookback: int = 12, horizon: int = 12):
        return self

    def predict(self, history: np.ndarray, origin_index: int, horizon: int) -> np.ndarray:
        return seasonal_naive_predict(history, self.period, horizon)

    def state(self):
        return {}

    @classmethod
    def from_state(cls, period, state):
        return cls(period)


class HistoricalAverage:
    """Per-node mean of every phase slot (absolute index mod p) over the training split."""

    kind = "historical_average"

    def __init__(self, period: int):
        if period < 1:
            raise InvalidConfig(f"period must be positive, got {period}")
        self.period = int(period)
        self.slot_means: Optional[np.ndarray] = None

    def fit(self, train: np.ndarray, start_index: int = 0, lookback: int = 12, horizon: int = 12):
        train = np.asarray(train, dtype=np.float64)
        if train.shape[1] < self.period:
            raise InvalidConfig(f"period {self.period} is longer than the training split ({train.shape[1]} steps)")
        slots = (start_index + np.arange(train.shape[1])) % self.period
        means = np.zeros((train.shape[0], self.period))
        for slot in range(self.period):
            with np.errstate(invalid="ignore"):
                means[:, slot] = np.nanmean(train[:, slots == slot], axis=1)
        self.slot_means = np.nan_to_num(means, nan=0.0)
        return self

    def predict(self, history: np.ndarray, origin_index: int, horizon: int) -> np.ndarray:
        if self.slot_means is None:
            raise InvalidConfig("historical average used before fit")
        lookback = history.shape[1]
        index = (origin_index + lookback + np.arange(horizon)) % self.period
        return self.slot_means[:, index]

    def state(self):
        return {"slot_means": self.slot_means}

    @classmethod
    def from_state(cls, period, state):
        model = cls(period)
        model.slot_means = state["slot_means"]
        return model


def fit_ridge(inputs: np.ndarray, targets: np.ndarray, penalty: float) -> np.ndarray:
    """
    Solve (X'X + aI) W = X'Y for an affine map (last row of W is the intercept).

    Solved as the augmented least-squares problem [X; sqrt(a) I] W = [Y; 0],
    which avoids forming X'X explicitly.
    """
    if penalty < 0:
        raise InvalidConfig(f"ridge penalty must be non-negative, got {penalty}")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    design = np.hstack([inputs, np.ones((inputs.shape[0], 1))])
    n_features = design.shape[1]
    if penalty > 0:
        design = np.vstack([design, np.sqrt(penalty) * np.eye(n_features)])
        targets = np.vstack([targets, np.zeros((n_features, targets.shape[1]))])
    coefficients, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
    if rank < n_features:
        raise SingularSystem(f"ridge system is rank deficient ({rank} < {n_features}); use a penalty > 0")
    return coefficients


def ridge_predict(history: np.ndarray, coefficients: np.ndarray) -> np.ndarray:
    history = np.asarray(history, dtype=np.float64)
    if coefficients.ndim == 3:
        return np.einsum("nl,nlh->nh", history, coefficients[:, :-1, :]) + coefficients[:, -1, :]
    return history @ coefficients[:-1] + coefficients[-1]


def _training_pairs(train: np.ndarray, lookback: int, horizon: int):
    """All stride-1 (input, target) pairs of the normalized train split, [N x windows x T]."""
    length = train.shape[1]
    count = length - lookback - horizon + 1
    if count < lookback:
        raise InvalidConfig(f"ridge needs at least {lookback} training windows, the split gives {max(count, 0)}")
    windows = np.lib.stride_tricks.sliding_window_view(train, lookback + horizon, axis=1)
    return windows[:, :, :lookback], windows[:, :, lookback:]


class RidgeForecaster:
    """Linear T_h -> T_f map in normalized space, pooled over nodes unless per_node."""

    kind = "ridge"

    def __init__(self, penalty: float = 1e-3, per_node: bool = False):
        self.penalty = float(penalty)
        self.per_node = bool(per_node)
        self.coefficients: Optional[np.ndarray] = None

    def fit(self, train: np.ndarray, start_index: int = 0, lookback: int = 12, horizon: int = 12):
        inputs, targets = _training_pairs(np.asarray(train, dtype=np.float64), lookback, horizon)
        if self.per_node:
            per_node = []
            for x, y in zip(inputs, targets):
                keep = np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
                per_node.append(fit_ridge(x[keep], y[keep], self.penalty))
            self.coefficients = np.stack(per_node)
        else:
            x = inputs.reshape(-1, lookback)
            y = targets.reshape(-1, horizon)
            keep = np.isfinite(x).all(axis=1) & np.isfinite(y).all(axis=1)
            self.coefficients = fit_ridge(x[keep], y[keep], self.penalty)
        return self

    def predict(self, history: np.ndarray, origin_index: int, horizon: int) -> np.ndarray:
        if self.coefficients is None:
            raise InvalidConfig("ridge forecaster used before fit")
        return ridge_predict(history, self.coefficients)

    def state(self):
        return {"coefficients": self.coefficients}

    @classmethod
    def from_state(cls, penalty, per_node, state):
        model = cls(penalty, per_node)
        model.coefficients = state["coefficients"]
        return model


def build_model(kind: str, period: int, ridge_penalty: float = 1e-3, ridge_per_node: bool = False):
    if kind == "seasonal_naive":
        return SeasonalNaive(period)
    if kind == "historical_average":
        return HistoricalAverage(period)
    if kind == "ridge":
        return RidgeForecaster(ridge_penalty, ridge_per_node)
    raise InvalidConfig(f"unknown backbone '{kind}' (expected one of {BACKBONE_KINDS})")


class FrozenBackbone:
    """A fitted model plus its scaler: the forecaster the calibrator wraps."""

    def __init__(self, model, scaler: ScalerParams, lookback: int, horizon: int, target_channel: int = 0):
        self.model = model
        self.scaler = scaler
        self.lookback = lookback
        self.horizon = horizon
        self.target_channel = target_channel

    @property
    def kind(self) -> str:
        return self.model.kind

    def forecast(self, sample) -> ForecastBlock:
        history = sample.input[:, :, self.target_channel]
        if history.shape[1] != self.lookback:
            raise ShapeMismatch(f"backbone expects lookback {self.lookback}, window has {history.shape[1]}")
        # unobserved inputs sit at the normalized mean
        normalized = np.nan_to_num(self.scaler.transform(history), nan=0.0)
        values = self.model.predict(normalized, sample.origin_index, self.horizon)
        return ForecastBlock(values, "normalized")

    def save(self, path):
        payload = {
            "format": np.array(BACKBONE_FORMAT),
            "version": np.array(BACKBONE_VERSION),
            "kind": np.array(self.kind),
            "period": np.array(getattr(self.model, "period", 0)),
            "ridge_penalty": np.array(getattr(self.model, "penalty", 0.0)),
            "ridge_per_node": np.array(getattr(self.model, "per_node", False)),
            "lookback": np.array(self.lookback),
            "horizon": np.array(self.horizon),
            "target_channel": np.array(self.target_channel),
            "scaler_mean": self.scaler.mean,
            "scaler_std": self.scaler.std,
            "scaler_mode": np.array(self.scaler.mode),
        }
        for key, value in self.model.state().items():
            payload[f"model_{key}"] = value

        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.savez(fh, **payload)
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
        print(f"   ✅ [BACKBONE] Saved {self.kind} backbone to {path}")

    @classmethod
    def load(cls, path) -> "FrozenBackbone":
        with np.load(path, allow_pickle=False) as blob:
            if "format" not in blob.files or str(blob["format"]) != BACKBONE_FORMAT:
                raise FormatError(f"{path} is not a fitted-backbone file")
            if int(blob["version"]) != BACKBONE_VERSION:
                raise FormatError(f"unsupported backbone file version {int(blob['version'])}")
            kind = str(blob["kind"])
            state = {key[len("model_"):]: blob[key].copy() for key in blob.files if key.startswith("model_")}
            period = int(blob["period"])
            if kind == "seasonal_naive":
                model = SeasonalNaive.from_state(period, state)
            elif kind == "historical_average":
                model = HistoricalAverage.from_state(period, state)
            elif kind == "ridge":
                model = RidgeForecaster.from_state(float(blob["ridge_penalty"]), bool(blob["ridge_per_node"]), state)
            else:
                raise FormatError(f"unknown backbone kind '{kind}' in {path}")
            scaler = ScalerParams(blob["scaler_mean"].copy(), blob["scaler_std"].copy(), str(blob["scaler_mode"]))
            return cls(model, scaler, int(blob["lookback"]), int(blob["horizon"]), int(blob["target_channel"]))


def fit_backbone(
    train_values: np.ndarray,
    start_index: int,
    kind: str,
    period: int,
    lookback: int = 12,
    horizon: int = 12,
    ridge_penalty: float = 1e-3,
    ridge_per_node: bool = False,
    scaler_mode: str = "global",
    target_channel: int = 0,
) -> FrozenBackbone:
    """Fit scaler and model on the target channel of the training split [N x L]."""
    scaler = fit_scaler(train_values, scaler_mode)
    model = build_model(kind, period, ridge_penalty, ridge_per_node)
    print(f"   [BACKBONE] Fitting {kind} on {train_values.shape[1]} training steps x {train_values.shape[0]} nodes")
    model.fit(scaler.transform(train_values), start_index, lookback, horizon)
    return FrozenBackbone(model, scaler, lookback, horizon, target_channel)
