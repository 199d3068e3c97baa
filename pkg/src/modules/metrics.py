"""
Metrics - MAE / RMSE / MAPE over unmasked entries, averaged and per horizon step
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import EmptyMetric, ShapeMismatch

MAPE_ZERO_EPS = 1e-6
METRIC_NAMES = ("mae", "rmse", "mape")


def _prepare(pred, truth, mask):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    keep = np.isfinite(truth)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != truth.shape:
            raise ShapeMismatch(f"mask {mask.shape} vs truth {truth.shape}")
        keep &= mask
    return pred, truth, keep


def metric_mae(pred, truth, mask=None) -> float:
    pred, truth, keep = _prepare(pred, truth, mask)
    if not keep.any():
        raise EmptyMetric("MAE: every entry is masked")
    return float(np.mean(np.abs(pred[keep] - truth[keep])))


def metric_rmse(pred, truth, mask=None) -> float:
    pred, truth, keep = _prepare(pred, truth, mask)
    if not keep.any():
        raise EmptyMetric("RMSE: every entry is masked")
    return float(np.sqrt(np.mean((pred[keep] - truth[keep]) ** 2)))


def metric_mape(pred, truth, mask=None, zero_eps: float = MAPE_ZERO_EPS) -> float:
    """Percent; entries with |truth| < zero_eps are excluded."""
    pred, truth, keep = _prepare(pred, truth, mask)
    keep &= np.abs(np.where(np.isfinite(truth), truth, 0.0)) >= zero_eps
    if not keep.any():
        raise EmptyMetric("MAPE: no entry with a non-zero truth")
    return float(100.0 * np.mean(np.abs((pred[keep] - truth[keep]) / truth[keep])))


def _or_none(fn, *args, **kwargs) -> Optional[float]:
    try:
        return fn(*args, **kwargs)
    except EmptyMetric:
        return None


@dataclass
class MetricsReport:
    mae: Optional[float]
    rmse: Optional[float]
    mape: Optional[float]
    horizon_mae: List[Optional[float]] = field(default_factory=list)
    horizon_rmse: List[Optional[float]] = field(default_factory=list)
    horizon_mape: List[Optional[float]] = field(default_factory=list)
    sample_count: int = 0
    masked_count: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict) -> "MetricsReport":
        return cls(**{key: payload.get(key) for key in cls.__dataclass_fields__})

    def value(self, name: str) -> Optional[float]:
        return getattr(self, name)


def evaluate(predictions, truths, masks=None, zero_eps: float = MAPE_ZERO_EPS) -> MetricsReport:
    """Metrics of stacked forecasts [S x N x T_f]; per-horizon rows pool samples and nodes."""
    predictions = np.asarray(predictions, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if predictions.ndim != 3:
        raise ShapeMismatch(f"expected stacked forecasts [S x N x T_f], got {predictions.shape}")
    _, _, keep = _prepare(predictions, truths, masks)

    horizon = predictions.shape[2]
    per_step = {name: [] for name in METRIC_NAMES}
    for h in range(horizon):
        p, t, m = predictions[:, :, h], truths[:, :, h], keep[:, :, h]
        per_step["mae"].append(_or_none(metric_mae, p, t, m))
        per_step["rmse"].append(_or_none(metric_rmse, p, t, m))
        per_step["mape"].append(_or_none(metric_mape, p, t, m, zero_eps=zero_eps))

    return MetricsReport(
        mae=_or_none(metric_mae, predictions, truths, keep),
        rmse=_or_none(metric_rmse, predictions, truths, keep),
        mape=_or_none(metric_mape, predictions, truths, keep, zero_eps=zero_eps),
        horizon_mae=per_step["mae"],
        horizon_rmse=per_step["rmse"],
        horizon_mape=per_step["mape"],
        sample_count=int(predictions.shape[0]),
        masked_count=int(keep.size - keep.sum()),
    )


def summarize_reports(reports: Sequence[MetricsReport]):
    """Mean report over repeated runs plus the std of the averaged metrics."""
    def mean_of(values):
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None

    def std_of(values):
        present = [v for v in values if v is not None]
        return float(np.std(present)) if present else None

    horizon = len(reports[0].horizon_mae)
    mean = MetricsReport(
        mae=mean_of([r.mae for r in reports]),
        rmse=mean_of([r.rmse for r in reports]),
        mape=mean_of([r.mape for r in reports]),
        horizon_mae=[mean_of([r.horizon_mae[h] for r in reports]) for h in range(horizon)],
        horizon_rmse=[mean_of([r.horizon_rmse[h] for r in reports]) for h in range(horizon)],
        horizon_mape=[mean_of([r.horizon_mape[h] for r in reports]) for h in range(horizon)],
        sample_count=sum(r.sample_count for r in reports),
        masked_count=sum(r.masked_count for r in reports),
    )
    spread = {f"{name}_std": std_of([r.value(name) for r in reports]) for name in METRIC_NAMES}
    return mean, spread


# Smoke demo: from src/, run `python -m modules.metrics`
if __name__ == "__main__":
    truth = np.array([[[1.0, 2.0]]])
    report = evaluate(truth * 2, truth)
    print(f"[METRICS] MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  MAPE {report.mape:.2f}%")
