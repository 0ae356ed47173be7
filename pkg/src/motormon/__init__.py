"""Condition monitoring for three-phase motors.

Simulated or replayed multi-channel acquisition, Kalman preprocessing,
threshold alarms, computed order tracking against a healthy baseline, and a
10 ms SQLite archive with remote replication.
"""

from .config import RunConfig, default_channels, load_config
from .errors import MotorMonError
from .order import (DiagnosisReport, OrderSpectrum, PhaseFitCoeffs, TachPulseTrain, Verdict, diagnose,
                    fit_phase, invert_phase, order_spectrum, resample_grid, resample_signal)
from .pipeline import Pipeline, run_pipeline
from .source import ChannelKind, ChannelSpec, MotorProfile, MotorSimulator

__version__ = "0.1.0"

__all__ = [
    "ChannelKind", "ChannelSpec", "DiagnosisReport", "MotorMonError", "MotorProfile", "MotorSimulator",
    "OrderSpectrum", "PhaseFitCoeffs", "Pipeline", "RunConfig", "TachPulseTrain", "Verdict", "default_channels",
    "diagnose", "fit_phase", "invert_phase", "load_config", "order_spectrum", "resample_grid", "resample_signal",
    "run_pipeline",
]
