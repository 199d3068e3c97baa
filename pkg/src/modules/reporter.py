"""
Reporter - JSON reports, console summaries and baseline-vs-calibrated comparison
"""
from __future__ import annotations

import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Optional

import pandas as pd

from .errors import FormatError, InvalidConfig
from .metrics import METRIC_NAMES

REPORT_VERSION = 1


def delta_percent(base: Optional[float], calibrated: Optional[float]) -> Optional[float]:
    """(base - cal) / base * 100; positive means the calibrated run improved."""
    if base is None or calibrated is None or base == 0:
        return None
    return (base - calibrated) / base * 100.0


def format_delta(delta: Optional[float]) -> str:
    if delta is None:
        return "n/a"
    if delta >= 0:
        return f"↓{delta:.2f}%"
    return f"↑{-delta:.2f}% ⚠️ regression"


def timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Reporter:
    """Writes UTF-8 JSON reports and prints run summaries."""

    def __init__(self, quiet: bool = False):
        self.quiet = quiet

    def say(self, message: str):
        if not self.quiet:
            print(message)

    def write_json(self, path, payload: Dict):
        """Atomic write; field order is the insertion order of payload."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=str(path.parent), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2, ensure_ascii=False)
                fh.write("\n")
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
        self.say(f"   ✅ [REPORT] Wrote {path}")

    def load_report(self, path) -> Dict:
        if not Path(path).exists():
            raise FileNotFoundError(f"report not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path} is not valid JSON: {e}")
        if payload.get("kind") != "run" or "metrics" not in payload:
            raise FormatError(f"{path} is not a run report")
        return payload

    def print_metrics(self, title: str, metrics: Dict):
        self.say("\n" + "=" * 50)
        self.say(f"📊 {title}")
        self.say("=" * 50)
        for name in METRIC_NAMES:
            value = metrics.get(name)
            unit = "%" if name == "mape" else ""
            shown = "absent" if value is None else f"{value:.4f}{unit}"
            self.say(f"   {name.upper():<5} {shown}")
        self.say(f"   windows: {metrics.get('sample_count', 0)}   masked entries: {metrics.get('masked_count', 0)}")
        self.say("=" * 50 + "\n")

    def print_stream_summary(self, stream: Dict, runtime: Dict):
        latency = runtime.get("latency", {})
        self.say(f"   [STREAM] windows: {stream.get('windows')}   updates: {stream.get('updates')}   "
                 f"skipped: {stream.get('skipped_updates')}   leaks: {stream.get('leaks')}")
        if latency:
            self.say(f"   [STREAM] calibrate mean {latency['calibrate_mean_ms']:.3f} ms (p99 {latency['calibrate_p99_ms']:.3f})   "
                     f"update mean {latency['update_mean_ms']:.3f} ms (p99 {latency['update_p99_ms']:.3f})")
        if runtime.get("over_budget_steps"):
            self.say(f"   ⚠️ [STREAM] {runtime['over_budget_steps']} steps exceeded the {runtime['stride_seconds']} s stride")

    def compare(self, baseline: Dict, calibrated: Dict) -> Dict:
        """ComparisonReport payload; the two runs must share a config fingerprint."""
        if baseline.get("fingerprint") != calibrated.get("fingerprint"):
            raise InvalidConfig(
                f"config fingerprints differ ({baseline.get('fingerprint', '?')[:12]} vs "
                f"{calibrated.get('fingerprint', '?')[:12]}); reports are not comparable"
            )
        base_m, cal_m = baseline["metrics"], calibrated["metrics"]
        deltas = {name: delta_percent(base_m.get(name), cal_m.get(name)) for name in METRIC_NAMES}
        horizon_deltas = {
            name: [delta_percent(b, c) for b, c in zip(base_m.get(f"horizon_{name}", []), cal_m.get(f"horizon_{name}", []))]
            for name in METRIC_NAMES
        }
        return {
            "report_version": REPORT_VERSION,
            "kind": "comparison",
            "fingerprint": baseline["fingerprint"],
            "seed": baseline.get("seed"),
            "config": baseline.get("config"),
            "baseline_metrics": base_m,
            "calibrated_metrics": cal_m,
            "delta_percent": deltas,
            "horizon_delta_percent": horizon_deltas,
            "latency": {
                "baseline": baseline.get("runtime", {}).get("latency"),
                "calibrated": calibrated.get("runtime", {}).get("latency"),
            },
        }

    def render_comparison(self, comparison: Dict) -> str:
        base_m, cal_m = comparison["baseline_metrics"], comparison["calibrated_metrics"]
        rows = []
        for name in METRIC_NAMES:
            rows.append({
                "metric": name.upper(),
                "baseline": base_m.get(name),
                "w/ calibration": cal_m.get(name),
                "delta": format_delta(comparison["delta_percent"][name]),
            })
        horizon = len(base_m.get("horizon_mae", []))
        for h in range(horizon):
            rows.append({
                "metric": f"MAE@{h + 1}",
                "baseline": base_m["horizon_mae"][h],
                "w/ calibration": cal_m["horizon_mae"][h],
                "delta": format_delta(comparison["horizon_delta_percent"]["mae"][h]),
            })
        table = pd.DataFrame(rows)
        return table.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="absent")
