"""
Spectral Calibrator - Group-wise phase/amplitude modulation of forecast spectra

A forecast block [N x T] is taken to the real half-spectrum, each node's bins
are split into G contiguous frequency groups, and every (group, node) pair
gets one amplitude offset and one phase offset. All functions here are pure.

Transform convention: forward rFFT unnormalized, inverse scaled by 1/T.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyMetric, FormatError, InvalidConfig, InvalidHorizon, ShapeMismatch

LOSS_KINDS = ("mae", "mse")
MODULATIONS = ("both", "amplitude", "phase")
SCALE_SPACES = ("normalized", "original")


@dataclass(frozen=True)
class ForecastBlock:
    """One forecast, N nodes by T horizon steps, float64."""

    values: np.ndarray
    scale_space: str = "normalized"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeMismatch(f"forecast block must be a non-empty [N x T] matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FormatError("forecast block contains NaN or Inf")
        if self.scale_space not in SCALE_SPACES:
            raise InvalidConfig(f"unknown scale space '{self.scale_space}'")
        object.__setattr__(self, "values", values)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Spectrum:
    bins: np.ndarray
    source_horizon: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2:
            raise ShapeMismatch(f"spectrum must be [N x M], got shape {bins.shape}")
        if bins.shape[1] != self.source_horizon // 2 + 1:
            raise ShapeMismatch(
                f"spectrum has {bins.shape[1]} bins, horizon {self.source_horizon} needs {self.source_horizon // 2 + 1}"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def m_bins(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True)
class AmplitudePhase:
    amplitude: np.ndarray
    phase: np.ndarray
    source_horizon: int

    @property
    def m_bins(self) -> int:
        return self.amplitude.shape[1]


@dataclass(frozen=True)
class GroupLayout:
    """G contiguous, half-open bin ranges covering [0, M)."""

    n_groups: int
    m_bins: int
    boundaries: Tuple[Tuple[int, int], ...]

    @property
    def starts(self) -> np.ndarray:
        return np.array([start for start, _ in self.boundaries], dtype=np.intp)

    @property
    def bin_groups(self) -> np.ndarray:
        """Group index of every bin, length M."""
        lengths = [end - start for start, end in self.boundaries]
        return np.repeat(np.arange(self.n_groups), lengths)


@dataclass
class CalibratorParams:
    """Learnable offsets: lambda_alpha (amplitude) and lambda_phi (radians), both [G x N]."""

    lambda_alpha: np.ndarray
    lambda_phi: np.ndarray
    layout: GroupLayout
    modulation: str = "both"

    def __post_init__(self):
        self.lambda_alpha = np.asarray(self.lambda_alpha, dtype=np.float64)
        self.lambda_phi = np.asarray(self.lambda_phi, dtype=np.float64)
        expected = (self.layout.n_groups,)
        if self.lambda_alpha.ndim != 2 or self.lambda_alpha.shape[:1] != expected:
            raise ShapeMismatch(f"lambda_alpha must be [G={self.layout.n_groups} x N], got {self.lambda_alpha.shape}")
        if self.lambda_phi.shape != self.lambda_alpha.shape:
            raise ShapeMismatch(f"lambda_phi {self.lambda_phi.shape} differs from lambda_alpha {self.lambda_alpha.shape}")
        if self.modulation not in MODULATIONS:
            raise InvalidConfig(f"unknown modulation '{self.modulation}' (expected one of {MODULATIONS})")

    @classmethod
    def zeros(cls, n_nodes: int, layout: GroupLayout, modulation: str = "both") -> "CalibratorParams":
        shape = (layout.n_groups, n_nodes)
        return cls(np.zeros(shape), np.zeros(shape), layout, modulation)

    @property
    def n_nodes(self) -> int:
        return self.lambda_alpha.shape[1]

    @property
    def n_params(self) -> int:
        return self.lambda_alpha.size + self.lambda_phi.size

    def copy(self) -> "CalibratorParams":
        return CalibratorParams(self.lambda_alpha.copy(), self.lambda_phi.copy(), self.layout, self.modulation)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.lambda_alpha.ravel(), self.lambda_phi.ravel()])

    def with_vector(self, vector: np.ndarray) -> "CalibratorParams":
        half = self.lambda_alpha.size
        vector = np.asarray(vector, dtype=np.float64)
        return CalibratorParams(
            vector[:half].reshape(self.lambda_alpha.shape),
            vector[half:].reshape(self.lambda_phi.shape),
            self.layout,
            self.modulation,
        )


@dataclass
class ParamGrads:
    d_lambda_alpha: np.ndarray
    d_lambda_phi: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_lambda_alpha.ravel(), self.d_lambda_phi.ravel()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass
class BoundReport:
    delta_norm: float
    bound: float
    first_order_bound: float
    eps_alpha: float
    eps_phi: float
    signal_norm: float
    time_delta_norm: float
    parseval_delta_norm: float
    satisfied: bool
    first_order_satisfied: bool

    def to_dict(self):
        return asdict(self)


def bin_weights(horizon: int) -> np.ndarray:
    """Multiplicity of each half-spectrum bin in the full spectrum."""
    weights = np.full(horizon // 2 + 1, 2.0)
    weights[0] = 1.0
    if horizon % 2 == 0:
        weights[-1] = 1.0
    return weights


def effective_spectrum(bins: np.ndarray, horizon: int) -> np.ndarray:
    """The half-spectrum the inverse transform actually uses (DC/Nyquist imaginary parts dropped)."""
    bins = np.array(bins, dtype=np.complex128)
    bins[..., 0] = bins[..., 0].real
    if horizon % 2 == 0:
        bins[..., -1] = bins[..., -1].real
    return bins


def forward_rfft(block: ForecastBlock) -> Spectrum:
    if block.horizon < 2:
        raise InvalidHorizon(f"horizon must be at least 2, got {block.horizon}")
    return Spectrum(np.fft.rfft(block.values, axis=-1), block.horizon)


def inverse_rfft(spectrum: Spectrum, horizon: int, scale_space: str = "normalized") -> ForecastBlock:
    if spectrum.m_bins != horizon // 2 + 1:
        raise ShapeMismatch(f"{spectrum.m_bins} bins cannot be inverted to horizon {horizon}")
    return ForecastBlock(np.fft.irfft(spectrum.bins, n=horizon, axis=-1), scale_space)


def decompose(spectrum: Spectrum) -> AmplitudePhase:
    amplitude = np.abs(spectrum.bins)
    phase = np.angle(spectrum.bins)
    # arg(0) := 0; keep the range (-pi, pi]
    phase = np.where(amplitude == 0.0, 0.0, phase)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    return AmplitudePhase(amplitude, phase, spectrum.source_horizon)


def build_group_layout(m_bins: int, n_groups: int) -> GroupLayout:
    if m_bins < 1:
        raise InvalidHorizon(f"need at least one frequency bin, got {m_bins}")
    if n_groups < 1:
        raise InvalidConfig(f"number of groups must be positive, got {n_groups}")
    groups = min(n_groups, m_bins)
    size = m_bins // groups
    boundaries = [(g * size, (g + 1) * size) for g in range(groups - 1)]
    boundaries.append(((groups - 1) * size, m_bins))
    return GroupLayout(groups, m_bins, tuple(boundaries))


def _bin_factors(params: CalibratorParams) -> Tuple[np.ndarray, np.ndarray]:
    """Per-bin gain (1 + lambda_alpha) and phase shift, both [N x M]."""
    groups = params.layout.bin_groups
    return 1.0 + params.lambda_alpha[groups].T, params.lambda_phi[groups].T


def _check_against(params: CalibratorParams, n_nodes: int, m_bins: int):
    if m_bins != params.layout.m_bins:
        raise ShapeMismatch(f"{m_bins} bins but calibrator layout expects {params.layout.m_bins}")
    if n_nodes != params.n_nodes:
        raise ShapeMismatch(f"{n_nodes} nodes but calibrator holds {params.n_nodes}")


def modulate(ap: AmplitudePhase, params: CalibratorParams) -> Spectrum:
    _check_against(params, ap.amplitude.shape[0], ap.m_bins)
    gain, shift = _bin_factors(params)
    bins = (ap.amplitude * gain) * np.exp(1j * (ap.phase + shift))
    return Spectrum(bins, ap.source_horizon)


def calibrate(block: ForecastBlock, params: CalibratorParams) -> ForecastBlock:
    spectrum = modulate(decompose(forward_rfft(block)), params)
    return inverse_rfft(spectrum, block.horizon, block.scale_space)


def _unscale_factors(scaler, n_nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    if scaler is None:
        return np.ones((n_nodes, 1)), np.zeros((n_nodes, 1))
    return scaler.node_factors(n_nodes)


def _check_loss(loss: str):
    if loss not in LOSS_KINDS:
        raise InvalidConfig(f"unknown loss '{loss}' (expected one of {LOSS_KINDS})")


def _residual(prediction, target, params, scaler, mask):
    """Calibrated, unscaled residual plus everything the adjoint pass reuses."""
    if prediction.values.shape != target.values.shape:
        raise ShapeMismatch(f"prediction {prediction.values.shape} vs target {target.values.shape}")
    n_nodes, horizon = prediction.values.shape
    _check_against(params, n_nodes, horizon // 2 + 1)

    spectrum = np.fft.rfft(prediction.values, axis=-1)
    gain, shift = _bin_factors(params)
    rotation = np.exp(1j * shift)
    calibrated = spectrum * gain * rotation
    scale, offset = _unscale_factors(scaler, n_nodes)
    output = np.fft.irfft(calibrated, n=horizon, axis=-1) * scale + offset

    weights = np.ones_like(output) if mask is None else np.asarray(mask, dtype=np.float64)
    if weights.shape != output.shape:
        raise ShapeMismatch(f"mask {weights.shape} vs target {output.shape}")
    count = weights.sum()
    if count == 0:
        raise EmptyMetric("every label entry is masked")
    residual = np.where(weights > 0, output - target.values, 0.0)
    return residual, weights, count, spectrum, rotation, calibrated, scale


def calibration_loss(
    prediction: ForecastBlock,
    target: ForecastBlock,
    params: CalibratorParams,
    loss: str = "mae",
    scaler=None,
    mask: Optional[np.ndarray] = None,
) -> float:
    _check_loss(loss)
    residual, weights, count, *_ = _residual(prediction, target, params, scaler, mask)
    if loss == "mse":
        return float(np.sum(weights * residual ** 2) / count)
    return float(np.sum(weights * np.abs(residual)) / count)


def calibrator_gradient(
    prediction: ForecastBlock,
    target: ForecastBlock,
    params: CalibratorParams,
    loss: str = "mae",
    scaler=None,
    mask: Optional[np.ndarray] = None,
) -> Tuple[float, ParamGrads]:
    """
    Loss of the calibrated, unscaled prediction and its exact gradient.

    Reverse mode through the three stages: time-domain loss gradient,
    adjoint of the inverse real transform (bin weights 1 or 2, factor 1/T),
    then per-group accumulation of the bin derivatives.
    """
    _check_loss(loss)
    residual, weights, count, spectrum, rotation, calibrated, scale = _residual(
        prediction, target, params, scaler, mask
    )
    horizon = prediction.horizon

    if loss == "mse":
        value = float(np.sum(weights * residual ** 2) / count)
        d_output = 2.0 * weights * residual / count
    else:
        value = float(np.sum(weights * np.abs(residual)) / count)
        d_output = weights * np.sign(residual) / count  # subgradient 0 at zero residual

    d_time = d_output * scale
    adjoint = np.fft.rfft(d_time, axis=-1) * (bin_weights(horizon) / horizon)

    d_alpha_bins = np.real(np.conj(adjoint) * spectrum * rotation)
    d_phi_bins = np.real(np.conj(adjoint) * 1j * calibrated)

    starts = params.layout.starts
    d_alpha = np.add.reduceat(d_alpha_bins, starts, axis=1).T
    d_phi = np.add.reduceat(d_phi_bins, starts, axis=1).T

    if params.modulation == "amplitude":
        d_phi = np.zeros_like(d_phi)
    elif params.modulation == "phase":
        d_alpha = np.zeros_like(d_alpha)
    return value, ParamGrads(d_alpha, d_phi)


def perturbation_bound_check(block: ForecastBlock, params: CalibratorParams, fault_scale: float = 1.0) -> BoundReport:
    """
    Output perturbation of the calibrator against its offset magnitudes.

    Exact bound: |dY| <= (ea + ep + ea*ep) |Y|, from
    |(1+a)e^{jp} - 1| <= |a| + (1+|a|)|p|. The first-order form (ea + ep) |Y|
    is reported alongside. fault_scale multiplies dY (fault-injection hook).
    """
    horizon = block.horizon
    spectrum = forward_rfft(block).bins
    _check_against(params, spectrum.shape[0], spectrum.shape[-1])
    gain, shift = _bin_factors(params)
    # exactly zero at zero params
    delta = spectrum * (gain * np.exp(1j * shift) - 1.0) * fault_scale

    eps_alpha = float(np.max(np.abs(params.lambda_alpha))) if params.lambda_alpha.size else 0.0
    eps_phi = float(np.max(np.abs(params.lambda_phi))) if params.lambda_phi.size else 0.0
    signal_norm = float(np.linalg.norm(spectrum))
    delta_norm = float(np.linalg.norm(delta))
    bound = (eps_alpha + eps_phi + eps_alpha * eps_phi) * signal_norm
    first_order = (eps_alpha + eps_phi) * signal_norm

    time_delta = np.fft.irfft(delta, n=horizon, axis=-1)
    time_delta_norm = float(np.linalg.norm(time_delta))
    effective = effective_spectrum(delta, horizon)
    parseval = float(np.sqrt(np.sum(bin_weights(horizon) * np.abs(effective) ** 2) / horizon))

    tolerance = 1e-12 * max(signal_norm, 1.0)
    return BoundReport(
        delta_norm=delta_norm,
        bound=bound,
        first_order_bound=first_order,
        eps_alpha=eps_alpha,
        eps_phi=eps_phi,
        signal_norm=signal_norm,
        time_delta_norm=time_delta_norm,
        parseval_delta_norm=parseval,
        satisfied=delta_norm <= bound * (1 + 1e-12) + tolerance,
        first_order_satisfied=delta_norm <= 1.001 * first_order + tolerance,
    )


# Smoke demo: from src/, run `python -m modules.spectral`
if __name__ == "__main__":
    block = ForecastBlock(np.array([[1.0, 0.0, -1.0, 0.0]]))
    layout = build_group_layout(3, 1)
    params = CalibratorParams(np.array([[0.5]]), np.array([[0.0]]), layout)
    print(f"[SPECTRAL] layout: {layout.boundaries}")
    print(f"[SPECTRAL] calibrated: {calibrate(block, params).values}")
