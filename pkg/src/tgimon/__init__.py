"""tgimon: photon-level simulation of temporal ghost imaging QKD monitoring.

The package simulates a time-multiplexed QKD session in which the parties
interleave ghost-imaging rounds with key rounds, injects time-shift and
detector-blinding attacks, reconstructs temporal images from single-photon
clicks correlated against a reference waveform, and turns those images into
statistically grounded attack verdicts.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .attacks import BlindingConfig, TimeShiftPlan, calibrate_blinding
from .detector import SpadModel, compose_click, default_spad
from .errors import (CalibrationError, ConfigError, GridMismatch,
                     InsufficientData, InvariantViolation, TgimonError,
                     UndefinedResult)
from .protocol import run_experiment, write_result
from .signal import TimeGrid, TrsConfig, Waveform, make_grid, qkd_pulse
from .tgi import (CorrelationAccumulator, Image, Verdict, detect_blinding,
                  detect_time_shift, differential_image, noise_floor,
                  predicted_image, reconstruct)

__all__ = [
    "BlindingConfig", "CalibrationError", "ConfigError",
    "CorrelationAccumulator", "GridMismatch", "Image", "InsufficientData",
    "InvariantViolation", "SpadModel", "TgimonError", "TimeGrid",
    "TimeShiftPlan", "TrsConfig", "UndefinedResult", "Verdict", "Waveform",
    "calibrate_blinding", "compose_click", "default_spad", "detect_blinding",
    "detect_time_shift", "differential_image", "make_grid", "noise_floor",
    "predicted_image", "qkd_pulse", "reconstruct", "run_experiment",
    "write_result",
]
