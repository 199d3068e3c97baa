"""
Settings - Run configuration, seed expansion and config fingerprints

Defaults come from config/config.json; a run config is a flat key = value
file (read with python-dotenv); CLI flags override both.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values

from .errors import InvalidConfig

ROOT_DIR = Path(__file__).resolve().parents[2]
DEFAULTS_PATH = ROOT_DIR / "config" / "config.json"
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RunConfig:
    # data
    dataset: str = ""
    dataset_format: str = "csv"
    sampling_interval: int = 300
    target_channel: int = 0
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    # protocol
    lookback: int = 12
    horizon: int = 12
    # backbone
    backbone: str = "seasonal_naive"
    period: Optional[int] = None
    ridge_penalty: float = 1e-3
    ridge_per_node: bool = False
    scaler_mode: str = "global"
    backbone_path: str = "artifacts/backbone.npz"
    # calibrator
    groups: int = 4
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "mae"
    clip_eps: Optional[float] = None
    modulation: str = "both"
    # stream
    queue_rule: str = "strict"
    update_samples: int = 1
    update_steps: int = 1
    track_descent: bool = False
    stride_seconds: Optional[float] = None
    progress_every: int = 0
    snapshot_path: Optional[str] = None
    # metrics / report
    mape_zero_eps: float = 1e-6
    seed: int = 0
    out: str = "artifacts/report.json"

    def __post_init__(self):
        checks = [
            (self.dataset_format in ("csv", "binary", "synth"), f"unknown dataset_format '{self.dataset_format}'"),
            (self.sampling_interval > 0, "sampling_interval must be positive"),
            (self.lookback >= 1, "lookback must be at least 1"),
            (self.horizon >= 2, "horizon must be at least 2"),
            (self.backbone in ("seasonal_naive", "historical_average", "ridge"), f"unknown backbone '{self.backbone}'"),
            (self.period is None or self.period >= 1, "period must be positive"),
            (self.ridge_penalty >= 0, "ridge_penalty must be non-negative"),
            (self.scaler_mode in ("global", "per_node"), f"unknown scaler_mode '{self.scaler_mode}'"),
            (self.groups >= 1, "groups must be at least 1"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.optimizer in ("sgd", "adam"), f"unknown optimizer '{self.optimizer}'"),
            (self.loss in ("mae", "mse"), f"unknown loss '{self.loss}'"),
            (self.clip_eps is None or self.clip_eps > 0, "clip_eps must be positive"),
            (self.modulation in ("both", "amplitude", "phase"), f"unknown modulation '{self.modulation}'"),
            (self.queue_rule in ("strict", "listing"), f"unknown queue_rule '{self.queue_rule}'"),
            (self.update_samples >= 1 and self.update_steps >= 1, "update_samples/update_steps must be >= 1"),
            (self.stride_seconds is None or self.stride_seconds > 0, "stride_seconds must be positive"),
            (self.mape_zero_eps > 0, "mape_zero_eps must be positive"),
            (len(self.split) == 3 and abs(sum(self.split) - 1.0) < 1e-9 and min(self.split) >= 0,
             f"split ratios must be three non-negative numbers summing to 1, got {self.split}"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidConfig(message)

    def period_at(self, sampling_interval: int) -> int:
        """Explicit period, else samples per day at the series' sampling interval."""
        if self.period is not None:
            return self.period
        return max(1, 86400 // sampling_interval)

    def stride_budget(self, sampling_interval: int) -> float:
        return self.stride_seconds if self.stride_seconds is not None else float(sampling_interval)

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["split"] = list(self.split)
        return payload


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_OPTIONAL = {"period", "clip_eps", "stride_seconds", "snapshot_path"}


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise InvalidConfig(f"unknown config key '{key}'")
    if not isinstance(value, str):
        return tuple(value) if key == "split" else value
    text = value.strip()
    if key in _OPTIONAL and text.lower() in ("", "none", "off", "null"):
        return None
    kind = _FIELD_TYPES[key]
    try:
        if key == "split":
            return tuple(float(x) for x in text.replace("/", ",").split(","))
        if "bool" in kind:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
    except ValueError:
        raise InvalidConfig(f"config key '{key}' has invalid value '{value}'")
    return text


def load_defaults(path: Path = DEFAULTS_PATH) -> Dict:
    """Flatten the sectioned defaults file into RunConfig keys."""
    if not Path(path).exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        sections = json.load(f)
    flat = {}
    for name, section in sections.items():
        if not isinstance(section, dict):
            raise InvalidConfig(f"defaults section '{name}' must be an object")
        flat.update(section)
    return flat


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict] = None) -> RunConfig:
    values = {key: _coerce(key, value) for key, value in load_defaults().items()}
    if path:
        if not Path(path).exists():
            raise InvalidConfig(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            values[key.strip().lower()] = _coerce(key.strip().lower(), value if value is not None else "")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = _coerce(key, value)
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise InvalidConfig(str(e))


def config_fingerprint(config: RunConfig) -> str:
    """SHA-256 of the canonical config, output location excluded."""
    payload = config.to_dict()
    payload.pop("out", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = value
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, component: str) -> int:
    """Per-component sub-seed: splitmix64(seed XOR fnv1a64(component))."""
    return splitmix64((int(seed) & _MASK64) ^ fnv1a64(component))
