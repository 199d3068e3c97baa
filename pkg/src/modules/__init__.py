"""
Streaming Test-Time Spectral Calibration Modules Package
"""
from .errors import STTCError
from .spectral import CalibratorParams, ForecastBlock, calibrate, forward_rfft, inverse_rfft
from .streaming import StreamingCalibrator, StreamQueue, WindowSample, flash_update
from .backbones import FrozenBackbone, fit_backbone
from .data import SeriesTensor, load_dataset, make_windows, synth_generate
from .metrics import MetricsReport, evaluate
from .settings import RunConfig, load_run_config
from .reporter import Reporter
from .bench import BenchHarness

__all__ = [
    'STTCError',
    'CalibratorParams',
    'ForecastBlock',
    'calibrate',
    'forward_rfft',
    'inverse_rfft',
    'StreamingCalibrator',
    'StreamQueue',
    'WindowSample',
    'flash_update',
    'FrozenBackbone',
    'fit_backbone',
    'SeriesTensor',
    'load_dataset',
    'make_windows',
    'synth_generate',
    'MetricsReport',
    'evaluate',
    'RunConfig',
    'load_run_config',
    'Reporter',
    'BenchHarness',
]
