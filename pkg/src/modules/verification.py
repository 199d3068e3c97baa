"""
Verification - Property battery for the calibrator and the stream engine

Each check draws self-contained random instances, returns a PropertyResult
and never raises for a property failure, so one failing property does not
hide the others.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .backbones import FrozenBackbone, ScalerParams, SeasonalNaive
from .spectral import (
    CalibratorParams,
    ForecastBlock,
    build_group_layout,
    calibrate,
    calibration_loss,
    calibrator_gradient,
    forward_rfft,
    inverse_rfft,
    perturbation_bound_check,
)
from .streaming import StreamQueue, WindowSample, descent_check

DEFAULT_ETA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    message: str
    detail: Dict = field(default_factory=dict)


@dataclass
class VerificationReport:
    results: List[PropertyResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def first_failure(self) -> Optional[PropertyResult]:
        return next((r for r in self.results if not r.passed), None)

    def to_dict(self):
        return {"passed": self.passed, "results": [asdict(r) for r in self.results]}


class _AffineScaler:
    """Fixed mean/std scaler for synthetic gradient cases."""

    def __init__(self, mean, std):
        self.mean, self.std = mean, std

    def node_factors(self, n_nodes):
        return np.full((n_nodes, 1), float(self.std)), np.full((n_nodes, 1), float(self.mean))


def _random_params(rng, n_nodes, horizon, groups, scale):
    layout = build_group_layout(horizon // 2 + 1, groups)
    shape = (layout.n_groups, n_nodes)
    return CalibratorParams(rng.uniform(-scale, scale, shape), rng.uniform(-scale, scale, shape), layout)


def finite_difference_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e[i] = h
        grad[i] = (fun(x + e) - fun(x - e)) / (2 * h)
        e[i] = 0.0
    return grad


def check_fft_roundtrip(rng, cases: int = 100) -> PropertyResult:
    worst = 0.0
    for _ in range(cases):
        horizon = int(rng.choice([4, 7, 12, 13, 24]))
        block = ForecastBlock(rng.standard_normal((int(rng.integers(1, 65)), horizon)))
        back = inverse_rfft(forward_rfft(block), horizon)
        worst = max(worst, float(np.max(np.abs(back.values - block.values))))
        zero = CalibratorParams.zeros(block.n_nodes, build_group_layout(horizon // 2 + 1, 4))
        worst = max(worst, float(np.max(np.abs(calibrate(block, zero).values - block.values))))
    passed = worst <= 1e-9
    return PropertyResult("fft_roundtrip", passed, f"max abs error {worst:.3e}", {"max_abs_error": worst})


def check_gradients(rng, cases: int = 100, h: float = 1e-6, tolerance: float = 1e-4) -> PropertyResult:
    worst = 0.0
    worst_case = None
    for case in range(cases):
        loss = "mae" if case % 2 == 0 else "mse"
        scaler = _AffineScaler(10.0, 2.0) if case % 4 in (0, 3) else None
        n_nodes = int(rng.integers(1, 4))
        horizon = int(rng.choice([4, 7, 12]))
        params = _random_params(rng, n_nodes, horizon, int(rng.integers(1, 5)), 0.1)
        prediction = ForecastBlock(rng.standard_normal((n_nodes, horizon)))
        calibrated = calibrate(prediction, params).values
        if scaler is not None:
            calibrated = calibrated * scaler.std + scaler.mean
        # keep MAE residuals away from the kink at zero
        offset = rng.uniform(0.5, 1.5, calibrated.shape) * rng.choice([-1.0, 1.0], calibrated.shape)
        target = ForecastBlock(calibrated + offset if loss == "mae" else calibrated + rng.standard_normal(calibrated.shape), "original")

        _, grads = calibrator_gradient(prediction, target, params, loss, scaler)
        analytic = grads.as_vector()
        numeric = finite_difference_gradient(
            lambda v: calibration_loss(prediction, target, params.with_vector(v), loss, scaler),
            params.as_vector(),
            h,
        )
        error = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
        if error.max() > worst:
            worst = float(error.max())
            worst_case = {"case": case, "loss": loss, "scaled": scaler is not None}
    passed = worst <= tolerance
    return PropertyResult(
        "gradient_vs_finite_difference", passed, f"max relative error {worst:.3e}",
        {"max_relative_error": worst, "worst_case": worst_case},
    )


def check_perturbation_bound(rng, cases: int = 1000, fault_scale: float = 1.0) -> PropertyResult:
    violations = 0
    first_order_violations = 0
    parseval_worst = 0.0
    for case in range(cases):
        horizon = int(rng.choice([4, 12, 24]))
        n_nodes = int(rng.integers(1, 9))
        block = ForecastBlock(rng.standard_normal((n_nodes, horizon)))
        if case == 0:
            # pure scaling saturates the amplitude term
            layout = build_group_layout(horizon // 2 + 1, 1)
            params = CalibratorParams(np.full((1, n_nodes), 0.01), np.zeros((1, n_nodes)), layout)
        else:
            scale = 1e-3 if case % 4 == 0 else 0.1
            params = _random_params(rng, n_nodes, horizon, int(rng.integers(1, 5)), scale)
        report = perturbation_bound_check(block, params, fault_scale)
        violations += not report.satisfied
        if max(report.eps_alpha, report.eps_phi) <= 1e-3:
            first_order_violations += not report.first_order_satisfied
        if report.time_delta_norm > 0:
            parseval_worst = max(
                parseval_worst, abs(report.time_delta_norm - report.parseval_delta_norm) / report.time_delta_norm
            )
    passed = violations == 0 and first_order_violations == 0 and parseval_worst <= 1e-9
    return PropertyResult(
        "perturbation_bound",
        passed,
        f"{violations} exact-bound and {first_order_violations} first-order violations over {cases} cases",
        {"violations": violations, "first_order_violations": first_order_violations, "parseval_max_rel_error": parseval_worst},
    )


def _identity_backbone(horizon: int) -> FrozenBackbone:
    return FrozenBackbone(SeasonalNaive(horizon), ScalerParams(0.0, 1.0), horizon, horizon)


def check_descent(rng, eta_grid: Sequence[float] = DEFAULT_ETA_GRID, protocol_eta: float = 1e-4, samples: int = 50) -> PropertyResult:
    """
    Protocol learning rate must descend on every random window; the rest of
    the grid is reported. A 1-D cosine surrogate pins the curvature estimate.
    """
    horizon = 12
    backbone = _identity_backbone(horizon)
    grid = sorted(set(float(e) for e in eta_grid) | {protocol_eta})
    failures = 0
    no_descent = set()
    for i in range(samples):
        n_nodes = int(rng.integers(1, 6))
        sample = WindowSample(rng.standard_normal((n_nodes, horizon)), rng.standard_normal((n_nodes, horizon)), i)
        params = _random_params(rng, n_nodes, horizon, 4, 0.05)
        report = descent_check(sample, backbone, params, grid, seed=i)
        for entry in report.entries:
            if not entry.decreased and report.grad_norm > 1e-10:
                no_descent.add(entry.eta)
                if entry.eta <= protocol_eta:
                    failures += 1

    # stiff cosine: curvature 100 along the step, so the large rates overshoot
    cosine = np.array([[1.0, 0.0, -1.0, 0.0]])
    stiff = descent_check(
        WindowSample(10 * cosine, 20 * cosine, 0),
        _identity_backbone(4),
        CalibratorParams.zeros(1, build_group_layout(3, 1)),
        grid,
    )
    surrogate = descent_check(
        WindowSample(cosine, 2 * cosine, 0),
        _identity_backbone(4),
        CalibratorParams.zeros(1, build_group_layout(3, 1)),
        [0.5, 1.0, 1.5, 1.9, 2.5],
    )
    surrogate_ok = (
        abs(surrogate.lipschitz_estimate - 1.0) < 1e-6
        and all(e.decreased for e in surrogate.entries if e.eta < 2)
        and not any(e.decreased for e in surrogate.entries if e.eta >= 2)
    )
    passed = failures == 0 and surrogate_ok
    return PropertyResult(
        "sgd_descent",
        passed,
        f"{failures} protocol-rate failures; surrogate L_c = {surrogate.lipschitz_estimate:.6f}",
        {
            "protocol_eta": protocol_eta,
            "no_descent_etas": sorted(no_descent),
            "stiff_lipschitz": stiff.lipschitz_estimate,
            "stiff_no_descent_etas": [e.eta for e in stiff.entries if not e.decreased],
            "stiff_largest_descent_eta": stiff.largest_descent_eta,
        },
    )


def check_no_leakage(steps: int = 5000, lookback: int = 12, horizon: int = 12) -> PropertyResult:
    queue = StreamQueue(horizon, "strict")
    violations = 0
    dequeues = 0
    label = np.zeros((1, horizon))
    window = np.zeros((1, lookback))
    for t in range(steps):
        sample = WindowSample(window, label, t)
        old = queue.push(sample)
        if old is None:
            continue
        dequeues += 1
        if t - old.origin_index != horizon or old.label_last_index != sample.input_last_index:
            violations += 1
    expected = max(0, steps - horizon)
    passed = violations == 0 and dequeues == expected
    return PropertyResult(
        "no_leakage", passed, f"{violations} violations over {dequeues} dequeues",
        {"violations": violations, "dequeues": dequeues, "expected_dequeues": expected},
    )


def check_param_count(n_nodes: int = 1000, groups: int = 4, horizon: int = 12) -> PropertyResult:
    layout = build_group_layout(horizon // 2 + 1, groups)
    count = CalibratorParams.zeros(n_nodes, layout).n_params
    expected = 2 * n_nodes * layout.n_groups
    return PropertyResult("parameter_count", count == expected, f"{count} scalars (expected {expected})", {"count": count})


def run_verification(
    seed: int = 0,
    cases: int = 1000,
    eta_grid: Sequence[float] = DEFAULT_ETA_GRID,
    protocol_eta: float = 1e-4,
    break_bound: bool = False,
    lookback: int = 12,
    horizon: int = 12,
) -> VerificationReport:
    rng = np.random.default_rng(seed)
    checks = [
        ("fft_roundtrip", lambda: check_fft_roundtrip(rng)),
        ("gradient_vs_finite_difference", lambda: check_gradients(rng)),
        ("perturbation_bound", lambda: check_perturbation_bound(rng, cases, 2.0 if break_bound else 1.0)),
        ("sgd_descent", lambda: check_descent(rng, eta_grid, protocol_eta)),
        ("no_leakage", lambda: check_no_leakage(5000, lookback, horizon)),
        ("parameter_count", lambda: check_param_count(horizon=horizon)),
    ]
    results = []
    for name, check in checks:
        try:
            result = check()
        except Exception as e:
            result = PropertyResult(name, False, f"raised {type(e).__name__}: {e}")
        marker = "✅" if result.passed else "❌"
        print(f"   {marker} [VERIFY] {result.name}: {result.message}")
        results.append(result)
    return VerificationReport(results)
