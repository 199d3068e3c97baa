"""
Data - Dataset I/O, chronological splits, sliding windows, synthetic drift series
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from .errors import FormatError, InvalidConfig, ParseError
from .streaming import WindowSample

BINARY_MAGIC = b"STTC1\x00"
_HEADER = struct.Struct("<IIII")
_MAX_ENTRIES = 2 ** 32 - 1
DATASET_FORMATS = ("csv", "binary")
DEFAULT_SPLIT = (0.6, 0.2, 0.2)


@dataclass
class SeriesTensor:
    """Observations [N x T_total x C]; missing_mask marks observed entries with True."""

    data: np.ndarray
    sampling_interval: int = 300
    missing_mask: Optional[np.ndarray] = None
    node_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise FormatError(f"series must be [N x T x C], got shape {self.data.shape}")
        if self.missing_mask is not None:
            self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
            if self.missing_mask.shape != self.data.shape:
                raise FormatError(f"mask shape {self.missing_mask.shape} differs from data {self.data.shape}")
            observed = self.data[self.missing_mask]
        else:
            observed = self.data
        if not np.all(np.isfinite(observed)):
            raise FormatError("observed entries must be finite (mark gaps in the mask)")
        if not self.node_ids:
            self.node_ids = [f"node_{i}" for i in range(self.data.shape[0])]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def target(self, start: int = 0, end: Optional[int] = None, channel: int = 0) -> np.ndarray:
        """Target channel as float64 [N x L], unobserved entries NaN."""
        values = np.asarray(self.data[:, start:end, channel], dtype=np.float64)
        if self.missing_mask is not None:
            values = np.where(self.missing_mask[:, start:end, channel], values, np.nan)
        return values


def _load_csv(path) -> SeriesTensor:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} is empty", row=1)
    except pd.errors.ParserError as e:
        raise ParseError(f"{path}: {e}")

    for column, name in enumerate(frame.columns):
        if str(name).startswith("Unnamed:") or not str(name).strip():
            raise ParseError(f"{path}: missing node identifier in header", row=1, column=column + 1)
    if frame.empty:
        raise ParseError(f"{path} has a header but no timesteps", row=2)

    numeric = frame.apply(lambda col: pd.to_numeric(col.str.strip().replace("", np.nan), errors="coerce"))
    bad = numeric.isna().to_numpy() & (frame.apply(lambda col: col.str.strip() != "").to_numpy())
    if bad.any():
        row, column = np.argwhere(bad)[0]
        raise ParseError(f"{path}: non-numeric value '{frame.iat[row, column]}'", row=int(row) + 2, column=int(column) + 1)

    values = numeric.to_numpy(dtype=np.float64).T[:, :, None]
    observed = np.isfinite(values)
    mask = None if observed.all() else observed
    return SeriesTensor(values, missing_mask=mask, node_ids=[str(c) for c in frame.columns])


def _load_binary(path) -> SeriesTensor:
    raw = Path(path).read_bytes()
    if len(raw) < len(BINARY_MAGIC) + _HEADER.size:
        raise ParseError(f"{path} is too short for an STTC1 header")
    if raw[: len(BINARY_MAGIC)] != BINARY_MAGIC:
        raise FormatError(f"{path}: bad magic bytes {raw[:len(BINARY_MAGIC)]!r}")
    n_nodes, length, channels, flags = _HEADER.unpack_from(raw, len(BINARY_MAGIC))
    count = n_nodes * length * channels
    if count > _MAX_ENTRIES:
        raise FormatError(f"{path}: dimensions {n_nodes}x{length}x{channels} overflow the format")
    offset = len(BINARY_MAGIC) + _HEADER.size
    has_mask = bool(flags & 1)
    expected = offset + 4 * count + (count if has_mask else 0)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n_nodes}x{length}x{channels}, found {len(raw)}")

    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(n_nodes, length, channels).copy()
    mask = None
    if has_mask:
        mask_bytes = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset + 4 * count)
        if np.any(mask_bytes > 1):
            raise FormatError(f"{path}: mask bytes must be 0 or 1")
        mask = mask_bytes.reshape(n_nodes, length, channels).astype(bool)
    return SeriesTensor(data, missing_mask=mask)


def load_dataset(path, fmt: str = "csv") -> SeriesTensor:
    if fmt not in DATASET_FORMATS:
        raise InvalidConfig(f"unknown dataset format '{fmt}' (expected one of {DATASET_FORMATS})")
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    series = _load_csv(path) if fmt == "csv" else _load_binary(path)
    print(f"   [DATA] Loaded {path}: {series.n_nodes} nodes x {series.length} steps x {series.channels} channels")
    return series


def save_dataset(series: SeriesTensor, path, fmt: str = "binary"):
    if fmt not in DATASET_FORMATS:
        raise InvalidConfig(f"unknown dataset format '{fmt}' (expected one of {DATASET_FORMATS})")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if fmt == "binary":
        flags = 1 if series.missing_mask is not None else 0
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(_HEADER.pack(series.n_nodes, series.length, series.channels, flags))
            fh.write(np.ascontiguousarray(series.data, dtype="<f4").tobytes())
            if flags:
                fh.write(series.missing_mask.astype(np.uint8).tobytes())
        return
    if series.channels != 1:
        raise FormatError("CSV datasets hold a single channel")
    frame = pd.DataFrame(series.target(), index=series.node_ids).T
    frame.to_csv(path, index=False, na_rep="")


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = DEFAULT_SPLIT

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise InvalidConfig(f"split needs three non-negative ratios, got {self.ratios}")
        if not math.isclose(sum(self.ratios), 1.0, abs_tol=1e-9):
            raise InvalidConfig(f"split ratios must sum to 1, got {sum(self.ratios)}")

    def bounds(self, total: int) -> List[Tuple[int, int]]:
        """[(start, end)] for train, val, test; floor boundaries, remainder to test."""
        train_end = int(math.floor(self.ratios[0] * total))
        val_end = train_end + int(math.floor(self.ratios[1] * total))
        return [(0, train_end), (train_end, val_end), (val_end, total)]


def make_windows(
    series: SeriesTensor,
    lookback: int,
    horizon: int,
    segment: Tuple[int, int],
    target_channel: int = 0,
) -> List[WindowSample]:
    """Stride-1 windows entirely inside one split segment, in origin order."""
    start, end = segment
    if end - start < lookback + horizon:
        raise InvalidConfig(
            f"segment [{start}, {end}) has {end - start} steps, need at least {lookback + horizon}"
        )
    data = np.asarray(series.data, dtype=np.float64)
    mask = series.missing_mask
    if mask is not None:
        data = np.where(mask, data, np.nan)

    windows = []
    for origin in range(start, end - lookback - horizon + 1):
        label_slice = slice(origin + lookback, origin + lookback + horizon)
        windows.append(
            WindowSample(
                input=data[:, origin:origin + lookback, :],
                label=data[:, label_slice, target_channel],
                origin_index=origin,
                label_mask=None if mask is None else mask[:, label_slice, target_channel],
            )
        )
    return windows


@dataclass
class Tone:
    freq: float
    amp: float
    phase: float = 0.0


@dataclass
class SynthSpec:
    n_nodes: int
    length: int
    tones: List[Tone]
    amp_drift_rate: float = 0.0
    phase_drift_rate: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    level: float = 0.0
    node_spread: float = 0.0
    split: Tuple[float, float, float] = DEFAULT_SPLIT
    sampling_interval: int = 300

    def __post_init__(self):
        if self.n_nodes < 1 or self.length < 2:
            raise InvalidConfig("synthetic spec needs n_nodes >= 1 and length >= 2")
        if not self.tones:
            raise InvalidConfig("synthetic spec needs at least one tone")
        for tone in self.tones:
            if not 0 < tone.freq <= 0.5:
                raise InvalidConfig(f"tone frequency {tone.freq} is aliased (need 0 < f <= 0.5 cycles per step)")
        if self.noise_std < 0 or not 0 <= self.node_spread < 1:
            raise InvalidConfig("noise_std must be >= 0 and node_spread in [0, 1)")
        SplitSpec(tuple(self.split))

    def to_dict(self):
        return {
            "n_nodes": self.n_nodes,
            "length": self.length,
            "tones": [[t.freq, t.amp, t.phase] for t in self.tones],
            "amp_drift_rate": self.amp_drift_rate,
            "phase_drift_rate": self.phase_drift_rate,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "level": self.level,
            "node_spread": self.node_spread,
            "split": list(self.split),
            "sampling_interval": self.sampling_interval,
        }


def _parse_tones(text: str) -> List[Tone]:
    tones = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise InvalidConfig(f"tone '{item}' must be freq:amp[:phase]")
        try:
            tones.append(Tone(*(float(p) for p in parts)))
        except ValueError:
            raise InvalidConfig(f"tone '{item}' has a non-numeric field")
    return tones


def parse_synth_spec(path) -> SynthSpec:
    """Read a key = value synthetic spec file."""
    if not Path(path).exists():
        raise FileNotFoundError(f"synthetic spec not found: {path}")
    raw = {k.strip().lower(): (v or "").strip() for k, v in dotenv_values(path).items()}
    casts = {
        "n_nodes": int,
        "length": int,
        "amp_drift_rate": float,
        "phase_drift_rate": float,
        "noise_std": float,
        "seed": int,
        "level": float,
        "node_spread": float,
        "sampling_interval": int,
    }
    unknown = set(raw) - set(casts) - {"tones", "split"}
    if unknown:
        raise InvalidConfig(f"unknown synthetic spec keys: {', '.join(sorted(unknown))}")
    for key in ("n_nodes", "length", "tones"):
        if key not in raw:
            raise InvalidConfig(f"synthetic spec is missing '{key}'")
    kwargs = {}
    for key, cast in casts.items():
        if key in raw:
            try:
                kwargs[key] = cast(raw[key])
            except ValueError:
                raise InvalidConfig(f"synthetic spec key '{key}' has invalid value '{raw[key]}'")
    kwargs["tones"] = _parse_tones(raw["tones"])
    if "split" in raw:
        try:
            kwargs["split"] = tuple(float(x) for x in raw["split"].split(","))
        except ValueError:
            raise InvalidConfig(f"synthetic spec split '{raw['split']}' is not a list of ratios")
    return SynthSpec(**kwargs)


def synth_generate(spec: SynthSpec, seed: Optional[int] = None) -> SeriesTensor:
    """
    Sum of tones with per-node amplitude/phase spread, plus Gaussian noise.
    Amplitude and phase drift linearly from the test-split boundary on;
    train and val segments are stationary.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    t = np.arange(spec.length, dtype=np.float64)
    test_start = SplitSpec(tuple(spec.split)).bounds(spec.length)[2][0]
    elapsed = np.maximum(0.0, t - test_start)

    n_tones = len(spec.tones)
    node_scale = 1.0 + spec.node_spread * rng.uniform(-1.0, 1.0, size=(spec.n_nodes, n_tones))
    node_shift = spec.node_spread * np.pi * rng.uniform(-1.0, 1.0, size=(spec.n_nodes, n_tones))

    values = np.full((spec.n_nodes, spec.length), spec.level, dtype=np.float64)
    drift_gain = 1.0 + spec.amp_drift_rate * elapsed
    drift_phase = spec.phase_drift_rate * elapsed
    for k, tone in enumerate(spec.tones):
        amp = tone.amp * node_scale[:, k:k + 1] * drift_gain
        phase = tone.phase + node_shift[:, k:k + 1] + drift_phase
        values += amp * np.sin(2 * np.pi * tone.freq * t + phase)
    if spec.noise_std > 0:
        values += spec.noise_std * rng.standard_normal(values.shape)
    return SeriesTensor(values[:, :, None], sampling_interval=spec.sampling_interval)


# Smoke demo: from src/, run `python -m modules.data`
if __name__ == "__main__":
    demo = SynthSpec(n_nodes=2, length=240, tones=[Tone(1 / 12, 5.0)], amp_drift_rate=1 / 48, noise_std=0.1)
    series = synth_generate(demo, seed=0)
    windows = make_windows(series, 12, 12, SplitSpec().bounds(series.length)[2])
    print(f"[DATA] {series.n_nodes} nodes x {series.length} steps, {len(windows)} test windows")
