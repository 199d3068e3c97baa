"""
Streaming Engine - Leakage-free memory queue and flash gradient updates

Every test window is forecast with the calibrator as it stands, then queued.
Once the queue holds more than T_f windows the oldest one is fully observed;
it is dequeued and drives exactly one optimizer step on the calibrator.
The backbone is never touched.
"""
from __future__ import annotations

import os
import tempfile
import time
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import (
    FormatError,
    InvalidConfig,
    LeakageError,
    SequenceError,
    ShapeMismatch,
)
from .spectral import (
    CalibratorParams,
    ForecastBlock,
    GroupLayout,
    ParamGrads,
    build_group_layout,
    calibrate,
    calibration_loss,
    calibrator_gradient,
)

QUEUE_RULES = ("strict", "listing")
OPTIMIZER_KINDS = ("sgd", "adam")
SNAPSHOT_FORMAT = "sttc-calibrator"
SNAPSHOT_VERSION = 1


@dataclass
class WindowSample:
    """One sliding window: input [N x T_h x C] and target-channel label [N x T_f]."""

    input: np.ndarray
    label: np.ndarray
    origin_index: int
    label_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.origin_index < 0:
            raise SequenceError(f"origin index must be non-negative, got {self.origin_index}")
        self.input = np.asarray(self.input, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.float64)
        if self.input.ndim == 2:
            self.input = self.input[:, :, None]
        if self.input.ndim != 3 or self.label.ndim != 2 or self.input.shape[0] != self.label.shape[0]:
            raise ShapeMismatch(f"input {self.input.shape} and label {self.label.shape} do not describe one window")

    @property
    def lookback(self) -> int:
        return self.input.shape[1]

    @property
    def horizon(self) -> int:
        return self.label.shape[1]

    @property
    def label_last_index(self) -> int:
        return self.origin_index + self.lookback + self.horizon - 1

    @property
    def input_last_index(self) -> int:
        return self.origin_index + self.lookback - 1

    def observed_label(self) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Label with unobserved entries zero-filled, plus the observation mask (None if complete)."""
        mask = np.isfinite(self.label)
        if self.label_mask is not None:
            mask &= np.asarray(self.label_mask, dtype=bool)
        if mask.all():
            return self.label, None
        return np.where(mask, self.label, 0.0), mask


class Forecaster(Protocol):
    """A frozen backbone: normalized-space forecasts plus the scaler that undoes them."""

    scaler: object

    def forecast(self, sample: WindowSample) -> ForecastBlock: ...


class StreamQueue:
    """
    FIFO of windows with capacity T_f.

    strict:  dequeue once the length exceeds capacity (freshest fully observed label)
    listing: dequeue as soon as the queue is full (one label step overlaps the forecast)
    """

    def __init__(self, capacity: int, rule: str = "strict"):
        if capacity < 1:
            raise InvalidConfig(f"queue capacity must be positive, got {capacity}")
        if rule not in QUEUE_RULES:
            raise InvalidConfig(f"unknown queue rule '{rule}' (expected one of {QUEUE_RULES})")
        self.capacity = capacity
        self.rule = rule
        self.entries = deque()

    def push(self, sample: WindowSample) -> Optional[WindowSample]:
        """Enqueue a window and return the dequeued one, if the rule fires."""
        if self.entries and sample.origin_index <= self.entries[-1].origin_index:
            raise SequenceError(
                f"window {sample.origin_index} arrived after {self.entries[-1].origin_index}"
            )
        self.entries.append(sample)
        if self.rule == "strict" and len(self.entries) > self.capacity:
            return self.entries.popleft()
        if self.rule == "listing" and len(self.entries) >= self.capacity:
            return self.entries.popleft()
        return None

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    # [2 x G x N]: index 0 = lambda_alpha, 1 = lambda_phi
    first_moment: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise InvalidConfig(f"unknown optimizer '{self.kind}' (expected one of {OPTIMIZER_KINDS})")
        if self.learning_rate <= 0:
            raise InvalidConfig(f"learning rate must be positive, got {self.learning_rate}")


def optimizer_step(
    params: CalibratorParams,
    grads: ParamGrads,
    opt: OptimizerState,
    clip_eps: Optional[float] = None,
) -> CalibratorParams:
    """One SGD or Adam step. Advances opt in place and returns the new params."""
    theta = np.stack([params.lambda_alpha, params.lambda_phi])
    g = np.stack([np.asarray(grads.d_lambda_alpha, dtype=np.float64), np.asarray(grads.d_lambda_phi, dtype=np.float64)])
    if g.shape != theta.shape:
        raise ShapeMismatch(f"gradient shape {g.shape[1:]} vs parameter shape {theta.shape[1:]}")

    if opt.kind == "sgd":
        step = opt.learning_rate * g
    else:
        if opt.first_moment is None:
            opt.first_moment = np.zeros_like(theta)
            opt.second_moment = np.zeros_like(theta)
        t = opt.step_count + 1
        opt.first_moment = opt.adam_beta1 * opt.first_moment + (1 - opt.adam_beta1) * g
        opt.second_moment = opt.adam_beta2 * opt.second_moment + (1 - opt.adam_beta2) * g ** 2
        m_hat = opt.first_moment / (1 - opt.adam_beta1 ** t)
        v_hat = opt.second_moment / (1 - opt.adam_beta2 ** t)
        step = opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.adam_eps)
    opt.step_count += 1

    updated = theta - step
    if clip_eps is not None:
        updated = np.clip(updated, -clip_eps, clip_eps)
    return CalibratorParams(updated[0], updated[1], params.layout, params.modulation)


@dataclass
class UpdateOutcome:
    loss_before_update: Optional[float] = None
    loss_after_update: Optional[float] = None
    grad_norm: Optional[float] = None
    param_delta_norm: Optional[float] = None
    skipped: Optional[str] = None


@dataclass
class StepLog:
    step_index: int
    origin_index: int
    dequeued_origin: Optional[int] = None
    loss_before_update: Optional[float] = None
    loss_after_update: Optional[float] = None
    grad_norm: Optional[float] = None
    param_delta_norm: Optional[float] = None
    calibrate_latency: float = 0.0
    update_latency: float = 0.0
    skipped: Optional[str] = None
    leaked: bool = False

    def to_dict(self):
        return asdict(self)


def _sample_terms(sample: WindowSample, backbone: Forecaster):
    prediction = backbone.forecast(sample)
    label, mask = sample.observed_label()
    return prediction, ForecastBlock(label, "original"), mask


def flash_update(
    old_samples,
    backbone: Forecaster,
    params: CalibratorParams,
    opt: OptimizerState,
    loss: str = "mae",
    scaler=None,
    update_steps: int = 1,
    clip_eps: Optional[float] = None,
    track_descent: bool = False,
) -> Tuple[CalibratorParams, UpdateOutcome]:
    """
    Single-step calibrator update from fully observed past windows.

    old_samples is one WindowSample or a short sequence of them (their
    gradients are averaged). Windows with no observed label entry are left
    out; if none remain the update is skipped.
    """
    if isinstance(old_samples, WindowSample):
        old_samples = [old_samples]
    if scaler is None:
        scaler = getattr(backbone, "scaler", None)

    terms = []
    for sample in old_samples:
        prediction, target, mask = _sample_terms(sample, backbone)
        if mask is not None and not mask.any():
            continue
        terms.append((prediction, target, mask))
    if not terms:
        return params, UpdateOutcome(skipped="masked")

    start = params
    outcome = UpdateOutcome()
    for step in range(update_steps):
        values, alphas, phis = [], [], []
        for prediction, target, mask in terms:
            value, grads = calibrator_gradient(prediction, target, params, loss, scaler, mask)
            values.append(value)
            alphas.append(grads.d_lambda_alpha)
            phis.append(grads.d_lambda_phi)
        grads = ParamGrads(np.mean(alphas, axis=0), np.mean(phis, axis=0))
        if step == 0:
            outcome.loss_before_update = float(np.mean(values))
            outcome.grad_norm = grads.norm()
        params = optimizer_step(params, grads, opt, clip_eps)

    outcome.param_delta_norm = float(np.linalg.norm(params.as_vector() - start.as_vector()))
    if track_descent:
        outcome.loss_after_update = float(
            np.mean([calibration_loss(p, t, params, loss, scaler, m) for p, t, m in terms])
        )
    return params, outcome


@dataclass
class StreamResult:
    forecasts: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray]
    logs: List[StepLog] = field(default_factory=list)

    @property
    def update_count(self) -> int:
        return sum(1 for log in self.logs if log.dequeued_origin is not None and log.skipped is None)

    @property
    def leak_count(self) -> int:
        return sum(1 for log in self.logs if log.leaked)


class StreamingCalibrator:
    """Engine state for one stream: backbone, calibrator params, optimizer and queue."""

    def __init__(
        self,
        backbone: Forecaster,
        n_nodes: int,
        lookback: int = 12,
        horizon: int = 12,
        groups: int = 4,
        optimizer: str = "adam",
        learning_rate: float = 1e-4,
        loss: str = "mae",
        queue_rule: str = "strict",
        update_samples: int = 1,
        update_steps: int = 1,
        clip_eps: Optional[float] = None,
        modulation: str = "both",
        track_descent: bool = False,
        enabled: bool = True,
    ):
        if update_samples < 1 or update_steps < 1:
            raise InvalidConfig("update_samples and update_steps must be at least 1")
        self.backbone = backbone
        self.lookback = lookback
        self.horizon = horizon
        self.loss = loss
        self.update_steps = update_steps
        self.clip_eps = clip_eps
        self.track_descent = track_descent
        self.enabled = enabled

        layout = build_group_layout(horizon // 2 + 1, groups)
        self.params = CalibratorParams.zeros(n_nodes, layout, modulation)
        self.opt = OptimizerState(kind=optimizer, learning_rate=learning_rate)
        self.queue = StreamQueue(horizon, queue_rule)
        self.recent = deque(maxlen=update_samples)
        self.last_origin = None
        self.steps = 0

    @classmethod
    def from_config(cls, backbone: Forecaster, n_nodes: int, config, enabled: bool = True) -> "StreamingCalibrator":
        return cls(
            backbone,
            n_nodes,
            lookback=config.lookback,
            horizon=config.horizon,
            groups=config.groups,
            optimizer=config.optimizer,
            learning_rate=config.learning_rate,
            loss=config.loss,
            queue_rule=config.queue_rule,
            update_samples=config.update_samples,
            update_steps=config.update_steps,
            clip_eps=config.clip_eps,
            modulation=config.modulation,
            track_descent=config.track_descent,
            enabled=enabled,
        )

    def _check_sample(self, sample: WindowSample):
        if self.last_origin is not None and sample.origin_index != self.last_origin + 1:
            raise SequenceError(
                f"expected window {self.last_origin + 1}, got {sample.origin_index} (stride must be 1)"
            )
        if sample.lookback != self.lookback or sample.horizon != self.horizon:
            raise ShapeMismatch(
                f"window is {sample.lookback}->{sample.horizon}, engine expects {self.lookback}->{self.horizon}"
            )
        if sample.label.shape[0] != self.params.n_nodes:
            raise ShapeMismatch(f"window has {sample.label.shape[0]} nodes, calibrator holds {self.params.n_nodes}")

    def stream_step(self, sample: WindowSample) -> Tuple[ForecastBlock, StepLog]:
        self._check_sample(sample)
        log = StepLog(step_index=self.steps, origin_index=sample.origin_index)

        started = time.perf_counter()
        prediction = self.backbone.forecast(sample)
        if self.enabled:
            prediction = calibrate(prediction, self.params)
        forecast = ForecastBlock(self.backbone.scaler.inverse_transform(prediction.values), "original")
        log.calibrate_latency = time.perf_counter() - started

        self.last_origin = sample.origin_index
        self.steps += 1
        if not self.enabled:
            return forecast, log

        dequeued = self.queue.push(sample)
        if dequeued is None:
            return forecast, log

        log.dequeued_origin = dequeued.origin_index
        if dequeued.label_last_index > sample.input_last_index:
            if self.queue.rule == "strict":
                raise LeakageError(
                    f"step {log.step_index}: label of window {dequeued.origin_index} ends at "
                    f"{dequeued.label_last_index}, only {sample.input_last_index} is observed"
                )
            log.leaked = True

        started = time.perf_counter()
        self.recent.append(dequeued)
        self.params, outcome = flash_update(
            list(self.recent),
            self.backbone,
            self.params,
            self.opt,
            loss=self.loss,
            scaler=self.backbone.scaler,
            update_steps=self.update_steps,
            clip_eps=self.clip_eps,
            track_descent=self.track_descent,
        )
        log.update_latency = time.perf_counter() - started
        log.loss_before_update = outcome.loss_before_update
        log.loss_after_update = outcome.loss_after_update
        log.grad_norm = outcome.grad_norm
        log.param_delta_norm = outcome.param_delta_norm
        log.skipped = outcome.skipped
        if outcome.skipped:
            print(f"   ⚠️ [STREAM] step {log.step_index}: update skipped ({outcome.skipped} label)")
        return forecast, log

    def run_stream(self, samples: Sequence[WindowSample], progress_every: int = 0) -> StreamResult:
        forecasts, labels, masks, logs = [], [], [], []
        any_mask = False
        for i, sample in enumerate(samples):
            forecast, log = self.stream_step(sample)
            forecasts.append(forecast.values)
            label, mask = sample.observed_label()
            labels.append(label)
            masks.append(np.ones_like(label, dtype=bool) if mask is None else mask)
            any_mask = any_mask or mask is not None
            logs.append(log)
            if progress_every and (i + 1) % progress_every == 0:
                print(f"   [STREAM] {i + 1}/{len(samples)} windows, {self.opt.step_count} updates")
        if not forecasts:
            raise SequenceError("stream is empty")
        return StreamResult(
            np.stack(forecasts),
            np.stack(labels),
            np.stack(masks) if any_mask else None,
            logs,
        )


@dataclass
class DescentEntry:
    eta: float
    loss_before: float
    loss_after: float
    decreased: bool
    non_increasing: bool
    predicted_decrement: float
    decrement_respected: bool
    guaranteed: bool


@dataclass
class DescentReport:
    grad_norm: float
    lipschitz_estimate: float
    lipschitz_random_max: float
    entries: List[DescentEntry]
    largest_descent_eta: Optional[float]
    largest_guaranteed_eta: Optional[float]

    def to_dict(self):
        return asdict(self)


def descent_check(
    sample: WindowSample,
    backbone: Forecaster,
    params: CalibratorParams,
    eta_grid: Sequence[float],
    loss: str = "mse",
    n_random: int = 4,
    seed: int = 0,
) -> DescentReport:
    """
    One SGD step per learning rate on a single window, loss measured before and after.

    The curvature estimate L_c comes from gradient differences along the step
    direction (the only direction one SGD step explores); random directions are
    sampled as well and reported separately. A step is guaranteed to descend
    when 0 < eta < 2 / L_c.
    """
    if loss != "mse":
        raise InvalidConfig("descent check is defined for the MSE loss")
    prediction, target, mask = _sample_terms(sample, backbone)
    scaler = backbone.scaler
    origin = params.as_vector()

    def loss_at(vector):
        return calibration_loss(prediction, target, params.with_vector(vector), loss, scaler, mask)

    def grad_at(vector):
        return calibrator_gradient(prediction, target, params.with_vector(vector), loss, scaler, mask)[1].as_vector()

    loss0 = loss_at(origin)
    grad0 = grad_at(origin)
    grad_norm = float(np.linalg.norm(grad0))

    def curvature(direction, radius):
        return abs(float(np.dot(grad_at(origin + radius * direction) - grad0, direction))) / radius

    lipschitz = 0.0
    random_max = 0.0
    if grad_norm > 0:
        direction = -grad0 / grad_norm
        radii = [1e-4] + [eta * grad_norm for eta in eta_grid if eta > 0]
        lipschitz = max(curvature(direction, r) for r in radii)
        rng = np.random.default_rng(seed)
        for _ in range(n_random):
            random_direction = rng.standard_normal(origin.size)
            random_max = max(random_max, curvature(random_direction / np.linalg.norm(random_direction), 1e-4))

    entries = []
    for eta in eta_grid:
        after = loss_at(origin - eta * grad0)
        predicted = eta * (1 - lipschitz * eta / 2) * grad_norm ** 2
        tolerance = 1e-12 * max(1.0, abs(loss0))
        entries.append(
            DescentEntry(
                eta=float(eta),
                loss_before=loss0,
                loss_after=after,
                decreased=after < loss0,
                non_increasing=after <= loss0 + tolerance,
                predicted_decrement=predicted,
                decrement_respected=(loss0 - after) >= predicted - tolerance,
                guaranteed=grad_norm == 0 or (lipschitz > 0 and 0 < eta < 2 / lipschitz),
            )
        )

    descending = [e.eta for e in entries if (e.decreased if grad_norm > 0 else e.non_increasing)]
    guaranteed = [e.eta for e in entries if e.guaranteed]
    return DescentReport(
        grad_norm=grad_norm,
        lipschitz_estimate=lipschitz,
        lipschitz_random_max=random_max,
        entries=entries,
        largest_descent_eta=max(descending) if descending else None,
        largest_guaranteed_eta=max(guaranteed) if guaranteed else None,
    )


def save_snapshot(path, params: CalibratorParams, opt: OptimizerState):
    """Write the calibrator state atomically (temp file, then rename)."""
    layout = params.layout
    theta_shape = (2,) + params.lambda_alpha.shape
    payload = dict(
        format=np.array(SNAPSHOT_FORMAT),
        version=np.array(SNAPSHOT_VERSION),
        n_groups=np.array(layout.n_groups),
        m_bins=np.array(layout.m_bins),
        n_nodes=np.array(params.n_nodes),
        boundaries=np.array(layout.boundaries, dtype=np.int64),
        lambda_alpha=params.lambda_alpha,
        lambda_phi=params.lambda_phi,
        modulation=np.array(params.modulation),
        optimizer=np.array(opt.kind),
        learning_rate=np.array(opt.learning_rate),
        betas=np.array([opt.adam_beta1, opt.adam_beta2, opt.adam_eps]),
        step_count=np.array(opt.step_count),
        has_moments=np.array(opt.first_moment is not None),
        first_moment=opt.first_moment if opt.first_moment is not None else np.zeros(theta_shape),
        second_moment=opt.second_moment if opt.second_moment is not None else np.zeros(theta_shape),
    )
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


def load_snapshot(path) -> Tuple[CalibratorParams, OptimizerState]:
    with np.load(path, allow_pickle=False) as blob:
        if "format" not in blob.files or str(blob["format"]) != SNAPSHOT_FORMAT:
            raise FormatError(f"{path} is not a calibrator snapshot")
        if int(blob["version"]) != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {int(blob['version'])}")
        boundaries = tuple((int(s), int(e)) for s, e in blob["boundaries"])
        layout = GroupLayout(int(blob["n_groups"]), int(blob["m_bins"]), boundaries)
        params = CalibratorParams(blob["lambda_alpha"], blob["lambda_phi"], layout, str(blob["modulation"]))
        beta1, beta2, eps = (float(x) for x in blob["betas"])
        has_moments = bool(blob["has_moments"])
        opt = OptimizerState(
            kind=str(blob["optimizer"]),
            learning_rate=float(blob["learning_rate"]),
            adam_beta1=beta1,
            adam_beta2=beta2,
            adam_eps=eps,
            step_count=int(blob["step_count"]),
            first_moment=blob["first_moment"].copy() if has_moments else None,
            second_moment=blob["second_moment"].copy() if has_moments else None,
        )
    return params, opt


# Smoke demo: from src/, run `python -m modules.streaming`
if __name__ == "__main__":
    from .backbones import FrozenBackbone, ScalerParams, SeasonalNaive

    cosine = np.cos(2 * np.pi * np.arange(12) / 12.0)[None, :]
    backbone = FrozenBackbone(SeasonalNaive(12), ScalerParams(0.0, 1.0), 12, 12)
    engine = StreamingCalibrator(backbone, 1, optimizer="sgd", learning_rate=0.01, loss="mse")
    result = engine.run_stream([WindowSample(cosine, 2 * cosine, t) for t in range(100)])
    print(f"[STREAM] {result.update_count} updates, tone gain now {1 + engine.params.lambda_alpha[1, 0]:.4f}")
