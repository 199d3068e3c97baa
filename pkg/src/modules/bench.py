"""
Bench Harness - Orchestrates train / run / compare / verify / synth
Each command loads the run config once, prints tagged progress lines and
writes a UTF-8 JSON report through the Reporter.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbones import FrozenBackbone, fit_backbone
from .data import SeriesTensor, SplitSpec, load_dataset, make_windows, parse_synth_spec, save_dataset, synth_generate
from .errors import InvalidConfig, PropertyViolation
from .metrics import evaluate, summarize_reports
from .reporter import REPORT_VERSION, Reporter, timestamp
from .settings import RunConfig, config_fingerprint, derive_seed
from .streaming import StreamResult, StreamingCalibrator, save_snapshot
from .verification import DEFAULT_ETA_GRID, run_verification


def _latency_stats(result: StreamResult, budget: float) -> Dict:
    calibrate = np.array([log.calibrate_latency for log in result.logs])
    updates = np.array([log.update_latency for log in result.logs if log.dequeued_origin is not None])
    total = calibrate + np.array([log.update_latency for log in result.logs])
    if updates.size == 0:
        updates = np.zeros(1)
    return {
        "latency": {
            "calibrate_mean_ms": float(calibrate.mean() * 1e3),
            "calibrate_p99_ms": float(np.percentile(calibrate, 99) * 1e3),
            "update_mean_ms": float(updates.mean() * 1e3),
            "update_p99_ms": float(np.percentile(updates, 99) * 1e3),
            "step_mean_ms": float(total.mean() * 1e3),
        },
        "stride_seconds": budget,
        "over_budget_steps": int(np.sum(total > budget)),
    }


class BenchHarness:
    """Command orchestrator for one run config."""

    def __init__(self, config: RunConfig, reporter: Optional[Reporter] = None):
        self.config = config
        self.reporter = reporter or Reporter()
        self.stats = {
            "windows": 0,
            "updates": 0,
            "skipped_updates": 0,
            "leaks": 0,
            "over_budget_steps": 0,
        }

    # ── data ────────────────────────────────────────────
    def load_series(self, seed: Optional[int] = None) -> SeriesTensor:
        """File datasets load as-is; a synthetic spec is realised from the seed's data sub-seed."""
        config = self.config
        if not config.dataset:
            raise InvalidConfig("no dataset configured (set 'dataset' in the config file or --set dataset=...)")
        if config.dataset_format == "synth":
            spec = parse_synth_spec(config.dataset)
            data_seed = derive_seed(config.seed if seed is None else seed, "data")
            series = synth_generate(spec, data_seed)
            print(f"   [DATA] Generated {config.dataset}: {series.n_nodes} nodes x {series.length} steps")
            return series
        series = load_dataset(config.dataset, config.dataset_format)
        series.sampling_interval = config.sampling_interval
        return series

    def segments(self, series: SeriesTensor):
        return SplitSpec(tuple(self.config.split)).bounds(series.length)

    # ── backbone ────────────────────────────────────────
    def fit(self, series: SeriesTensor) -> FrozenBackbone:
        config = self.config
        start, end = self.segments(series)[0]
        return fit_backbone(
            series.target(start, end, config.target_channel),
            start,
            config.backbone,
            config.period_at(series.sampling_interval),
            lookback=config.lookback,
            horizon=config.horizon,
            ridge_penalty=config.ridge_penalty,
            ridge_per_node=config.ridge_per_node,
            scaler_mode=config.scaler_mode,
            target_channel=config.target_channel,
        )

    def backbone_for(self, series: SeriesTensor) -> FrozenBackbone:
        """Synthetic runs fit in memory; file datasets need the backbone written by train."""
        config = self.config
        if config.dataset_format == "synth":
            return self.fit(series)
        path = Path(config.backbone_path)
        if not path.exists():
            raise FileNotFoundError(f"fitted backbone not found: {path} (run 'sttc train' first)")
        backbone = FrozenBackbone.load(path)
        if (backbone.lookback, backbone.horizon) != (config.lookback, config.horizon):
            raise InvalidConfig(
                f"backbone was fitted for {backbone.lookback}->{backbone.horizon}, "
                f"config asks for {config.lookback}->{config.horizon}"
            )
        return backbone

    def stream(self, series: SeriesTensor, backbone: FrozenBackbone, segment, ttc: bool):
        config = self.config
        windows = make_windows(series, config.lookback, config.horizon, segment, config.target_channel)
        engine = StreamingCalibrator.from_config(backbone, series.n_nodes, config, enabled=ttc)
        return engine, engine.run_stream(windows, config.progress_every)

    def validation_mae(self, series: SeriesTensor, backbone: FrozenBackbone) -> Optional[float]:
        _, result = self.stream(series, backbone, self.segments(series)[1], ttc=False)
        return evaluate(result.forecasts, result.labels, result.masks, self.config.mape_zero_eps).mae

    # ── commands ────────────────────────────────────────
    def train(self) -> Dict:
        print("🏋️ TRAINING BACKBONE\n")
        series = self.load_series()
        backbone = self.fit(series)
        backbone.save(self.config.backbone_path)
        val_mae = self.validation_mae(series, backbone)
        shown = "absent" if val_mae is None else f"{val_mae:.4f}"
        print(f"   📊 [BACKBONE] Validation MAE ({backbone.kind}): {shown}")
        return {"backbone": backbone.kind, "path": str(self.config.backbone_path), "val_mae": val_mae}

    def run_once(self, seed: int, ttc: bool) -> Dict:
        series = self.load_series(seed)
        backbone = self.backbone_for(series)
        engine, result = self.stream(series, backbone, self.segments(series)[2], ttc)
        metrics = evaluate(result.forecasts, result.labels, result.masks, self.config.mape_zero_eps)

        skipped = sum(1 for log in result.logs if log.skipped)
        stream = {
            "windows": len(result.logs),
            "updates": result.update_count,
            "skipped_updates": skipped,
            "leaks": result.leak_count,
            "optimizer_steps": engine.opt.step_count,
            "queue_rule": self.config.queue_rule,
            "param_norm": float(np.linalg.norm(engine.params.as_vector())),
        }
        runtime = _latency_stats(result, self.config.stride_budget(series.sampling_interval))

        self.stats["windows"] += stream["windows"]
        self.stats["updates"] += stream["updates"]
        self.stats["skipped_updates"] += skipped
        self.stats["leaks"] += stream["leaks"]
        self.stats["over_budget_steps"] += runtime["over_budget_steps"]

        if ttc and self.config.snapshot_path:
            save_snapshot(self.config.snapshot_path, engine.params, engine.opt)
            print(f"   ✅ [STREAM] Calibrator snapshot written to {self.config.snapshot_path}")
        return {"seed": seed, "metrics": metrics, "stream": stream, "runtime": runtime}

    def run(self, ttc: bool = True, seeds: int = 1, out: Optional[str] = None) -> Dict:
        if seeds < 1:
            raise InvalidConfig(f"--seeds must be at least 1, got {seeds}")
        if seeds > 1 and self.config.dataset_format != "synth":
            print("   ⚠️ [STREAM] File datasets are fixed; repeated seeds will give identical metrics")
        label = "CALIBRATED" if ttc else "BASELINE"
        print(f"🚀 RUNNING TEST STREAM ({label}, queue={self.config.queue_rule})\n")

        runs = [self.run_once(self.config.seed + i, ttc) for i in range(seeds)]
        payload = {
            "report_version": REPORT_VERSION,
            "kind": "run",
            "fingerprint": config_fingerprint(self.config),
            "seed": self.config.seed,
            "ttc": ttc,
            "config": self.config.to_dict(),
        }
        if seeds == 1:
            payload["metrics"] = runs[0]["metrics"].to_dict()
            payload["stream"] = runs[0]["stream"]
        else:
            mean, spread = summarize_reports([r["metrics"] for r in runs])
            payload["metrics"] = mean.to_dict()
            payload["repeats"] = {
                "seeds": [r["seed"] for r in runs],
                "std": spread,
                "per_seed": [{"seed": r["seed"], "metrics": r["metrics"].to_dict()} for r in runs],
            }
            payload["stream"] = {
                key: sum(r["stream"][key] for r in runs)
                for key in ("windows", "updates", "skipped_updates", "leaks", "optimizer_steps")
            }
        payload["runtime"] = {"timestamp": timestamp(), **runs[-1]["runtime"]}
        if seeds > 1:
            payload["runtime"]["over_budget_steps"] = sum(r["runtime"]["over_budget_steps"] for r in runs)

        self.reporter.print_metrics(f"TEST METRICS ({label})", payload["metrics"])
        if seeds > 1:
            spread = payload["repeats"]["std"]
            self.reporter.say("   mean ± std over seeds: " + "   ".join(
                f"{name.upper()} {payload['metrics'][name]:.4f} ± {spread[f'{name}_std']:.4f}"
                for name in ("mae", "rmse", "mape") if payload["metrics"][name] is not None
            ))
        self.reporter.print_stream_summary(payload["stream"], payload["runtime"])
        self.reporter.write_json(out or self.config.out, payload)
        return payload

    def compare(self, baseline_path: str, calibrated_path: str, out: Optional[str] = None) -> Dict:
        print("⚖️ COMPARING REPORTS\n")
        baseline = self.reporter.load_report(baseline_path)
        calibrated = self.reporter.load_report(calibrated_path)
        if baseline.get("ttc") or not calibrated.get("ttc", True):
            print("   ⚠️ [REPORT] Expected a --ttc off baseline and a --ttc on calibrated report")
        comparison = self.reporter.compare(baseline, calibrated)
        self.reporter.say(self.reporter.render_comparison(comparison))
        self.reporter.write_json(out or Path(self.config.out).with_name("comparison.json"), comparison)
        return comparison

    def verify(
        self,
        cases: int = 1000,
        eta_grid: Sequence[float] = DEFAULT_ETA_GRID,
        break_bound: bool = False,
        out: Optional[str] = None,
    ) -> Dict:
        print("🔬 RUNNING PROPERTY BATTERY\n")
        config = self.config
        report = run_verification(
            seed=derive_seed(config.seed, "verify"),
            cases=cases,
            eta_grid=eta_grid,
            protocol_eta=config.learning_rate,
            break_bound=break_bound,
            lookback=config.lookback,
            horizon=config.horizon,
        )
        payload = {
            "report_version": REPORT_VERSION,
            "kind": "verification",
            "seed": config.seed,
            "cases": cases,
            "eta_grid": [float(e) for e in eta_grid],
            **report.to_dict(),
        }
        if out:
            self.reporter.write_json(out, payload)
        failure = report.first_failure
        if failure is not None:
            raise PropertyViolation(failure.name, failure.message)
        print("\n   ✅ [VERIFY] All properties hold")
        return payload

    def synth(self, spec_path: str, out_prefix: str, seed: Optional[int] = None) -> Dict:
        """Realise a synthetic spec as binary + CSV files with a provenance record."""
        print("🧪 GENERATING SYNTHETIC DATASET\n")
        spec = parse_synth_spec(spec_path)
        seed = spec.seed if seed is None else seed
        series = synth_generate(spec, seed)

        prefix = Path(out_prefix)
        files: List[Dict] = []
        for fmt, suffix in (("binary", ".sttc"), ("csv", ".csv")):
            path = prefix.with_name(prefix.name + suffix)
            save_dataset(series, path, fmt)
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            files.append({"format": fmt, "path": str(path), "sha256": digest})
            print(f"   ✅ [DATA] Wrote {path} (sha256 {digest[:12]})")

        provenance = {
            "report_version": REPORT_VERSION,
            "kind": "synth",
            "spec_file": str(spec_path),
            "spec": spec.to_dict(),
            "seed": seed,
            "shape": [series.n_nodes, series.length, series.channels],
            "files": files,
        }
        self.reporter.write_json(prefix.with_name(prefix.name + ".provenance.json"), provenance)
        return provenance

    def print_summary(self):
        print("\n" + "=" * 50)
        print("📊 RUN SUMMARY")
        print("=" * 50)
        print(f"   🔍 Windows streamed:  {self.stats['windows']}")
        print(f"   ✅ Updates applied:   {self.stats['updates']}")
        print(f"   ⏭️ Updates skipped:   {self.stats['skipped_updates']}")
        print(f"   ⚠️ Leaky updates:     {self.stats['leaks']}")
        print(f"   ⏱️ Over-budget steps: {self.stats['over_budget_steps']}")
        print("=" * 50 + "\n")
