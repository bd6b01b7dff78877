"""Time grids, optical waveforms, and the classical signal chain.

Waveform samples are mean photon numbers per grid sample, so a window sum
is the mean photon number delivered into one detection window.  The
thermal reference source (TRS) comes in two flavours: ``uniform_bins``
holds one uniform [0, 1) intensity per coherence-time bin, and
``filtered_gaussian`` low-pass filters i.i.d. exponential intensities so
the ensemble autocorrelation width equals the coherence time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigError, GridMismatch
from .rng import RandomStream

_REL_TOL = 1e-9

# Gaussian kernel std that makes the kernel autocorrelation FWHM equal to
# the coherence time: fwhm = 2.3548 * sigma * sqrt(2).
_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
_ACF_SIGMA_FACTOR = 1.0 / (_FWHM_PER_SIGMA * math.sqrt(2.0))

# Analyzer bandwidth maps to a Gaussian impulse response of this temporal
# sigma (ns per GHz), from the 10-90% rise time ~ 0.35 / BW.
_BANDWIDTH_SIGMA_NS = 0.1325


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling of one detection window."""

    window_ns: float
    dt_ns: float
    n_samples: int

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples) * self.dt_ns

    def index_of(self, t_ns: float) -> int:
        k = int(round(t_ns / self.dt_ns))
        if not 0 <= k < self.n_samples:
            raise GridMismatch(f"time {t_ns} ns outside window [0, {self.window_ns}) ns")
        return k


def make_grid(window_ns: float, dt_ns: float) -> TimeGrid:
    """Build a grid, requiring the window to hold a whole number of samples."""
    if window_ns <= 0 or dt_ns <= 0:
        raise GridMismatch("window_ns and dt_ns must be positive")
    ratio = window_ns / dt_ns
    n = round(ratio)
    if n < 1 or abs(n * dt_ns - window_ns) > _REL_TOL * window_ns:
        raise GridMismatch(
            f"window {window_ns} ns is not an integer number of {dt_ns} ns samples"
        )
    return TimeGrid(window_ns=window_ns, dt_ns=dt_ns, n_samples=n)


def check_same_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a.n_samples != b.n_samples or abs(a.dt_ns - b.dt_ns) > _REL_TOL * a.dt_ns:
        raise GridMismatch(f"grids differ: {a} vs {b}")


@dataclass
class Waveform:
    """Non-negative intensity samples on a grid (mean photons per sample)."""

    grid: TimeGrid
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (self.grid.n_samples,):
            raise GridMismatch(
                f"waveform has {self.samples.shape} samples, grid wants {self.grid.n_samples}"
            )
        if np.any(self.samples < 0) or not np.all(np.isfinite(self.samples)):
            raise ConfigError("waveform samples must be finite and non-negative")

    def total(self) -> float:
        return float(self.samples.sum())


@dataclass(frozen=True)
class TrsConfig:
    """Thermal reference source parameters."""

    mode: str = "uniform_bins"
    coherence_time_ps: float = 80.0
    mean_intensity: float = 1.0

    def __post_init__(self):
        if self.mode not in ("uniform_bins", "filtered_gaussian"):
            raise ConfigError(f"unknown TRS mode: {self.mode!r}")
        if self.coherence_time_ps <= 0:
            raise ConfigError("coherence_time_ps must be positive")
        if self.mean_intensity < 0:
            raise ConfigError("mean_intensity must be non-negative")


def bin_map(grid: TimeGrid, coherence_time_ps: float) -> np.ndarray:
    """Coherence-bin index of every grid sample."""
    tau_ns = coherence_time_ps * 1e-3
    if grid.dt_ns > tau_ns * (1 + _REL_TOL):
        raise ConfigError(
            f"grid step {grid.dt_ns} ns coarser than coherence time {tau_ns} ns"
        )
    # Small epsilon keeps exact bin edges from jittering across one sample.
    return np.floor(grid.times() / tau_ns + 1e-9).astype(np.intp)


def n_bins(grid: TimeGrid, coherence_time_ps: float) -> int:
    return int(bin_map(grid, coherence_time_ps)[-1]) + 1


def trs_scale(grid: TimeGrid, cfg: TrsConfig) -> float:
    """Per-sample factor making the expected window sum equal mean_intensity."""
    if cfg.mode == "uniform_bins":
        return cfg.mean_intensity / (0.5 * grid.n_samples)
    return cfg.mean_intensity / grid.n_samples


def expand_bins(grid: TimeGrid, cfg: TrsConfig, bin_values: np.ndarray) -> np.ndarray:
    """Raw uniform bin values -> intensity samples (uniform_bins mode)."""
    bmap = bin_map(grid, cfg.coherence_time_ps)
    return bin_values[..., bmap] * trs_scale(grid, cfg)


def filtered_kernel_sigma(grid: TimeGrid, coherence_time_ps: float) -> float:
    return coherence_time_ps * 1e-3 * _ACF_SIGMA_FACTOR / grid.dt_ns


def filter_exponentials(grid: TimeGrid, cfg: TrsConfig, raw: np.ndarray) -> np.ndarray:
    """i.i.d. exponential samples -> filtered, rescaled TRS intensities."""
    sigma = filtered_kernel_sigma(grid, cfg.coherence_time_ps)
    # Circular boundary keeps the process stationary across the window.
    smoothed = gaussian_filter1d(raw, sigma, axis=-1, mode="wrap")
    return smoothed * trs_scale(grid, cfg)


def trs_waveform(grid: TimeGrid, cfg: TrsConfig, stream: RandomStream,
                 slot: int | None = None) -> Waveform:
    """One TRS realisation.

    With ``slot`` the draws are read from that addressed slot block, which
    is how per-round simulation keeps scalar and vectorised paths
    identical; by default the stream's sequential draws are consumed.
    """
    if cfg.mode == "uniform_bins":
        nb = n_bins(grid, cfg.coherence_time_ps)
        u = stream.uniforms_at(slot, nb) if slot is not None else stream.uniforms(nb)
        return Waveform(grid, expand_bins(grid, cfg, u))
    bin_map(grid, cfg.coherence_time_ps)  # dt vs coherence precondition
    n = grid.n_samples
    u = stream.uniforms_at(slot, n) if slot is not None else stream.uniforms(n)
    raw = -np.log1p(-u)
    return Waveform(grid, filter_exponentials(grid, cfg, raw))


def qkd_pulse(grid: TimeGrid, mu_a: float, center_ns: float,
              fwhm_ns: float) -> Waveform:
    """Gaussian key pulse carrying mu_a photons on average.

    The window sum is renormalised to exactly mu_a after truncation to the
    grid, so narrow pulses near the window edge stay calibrated.
    """
    if mu_a < 0:
        raise ConfigError("mu_a must be non-negative")
    if fwhm_ns <= 0:
        raise ConfigError("pulse fwhm_ns must be positive")
    if mu_a == 0:
        return Waveform(grid, np.zeros(grid.n_samples))
    sigma = fwhm_ns / _FWHM_PER_SIGMA
    t = grid.times()
    shape = np.exp(-0.5 * ((t - center_ns) / sigma) ** 2)
    total = shape.sum()
    if total <= 0:
        raise ConfigError("pulse lies entirely outside the window")
    return Waveform(grid, shape * (mu_a / total))


def bandwidth_sigma_samples(grid: TimeGrid, bandwidth_ghz: float) -> float:
    return _BANDWIDTH_SIGMA_NS / bandwidth_ghz / grid.dt_ns


def fpd_measure(wf: Waveform, bandwidth_ghz: float) -> Waveform:
    """Reference-arm measurement: Gaussian low-pass of the analyzer chain.

    Infinite bandwidth returns the waveform unchanged.  The kernel is
    normalised and the boundary is reflected, so the window sum is
    preserved.
    """
    if bandwidth_ghz <= 0:
        raise ConfigError("bandwidth_ghz must be positive")
    if math.isinf(bandwidth_ghz):
        return Waveform(wf.grid, wf.samples.copy())
    sigma = bandwidth_sigma_samples(wf.grid, bandwidth_ghz)
    return Waveform(wf.grid, gaussian_filter1d(wf.samples, sigma, mode="reflect"))


def fpd_filter_array(arr: np.ndarray, grid: TimeGrid, bandwidth_ghz: float) -> np.ndarray:
    """fpd_measure on the last axis of a bare array (used by the engine)."""
    if math.isinf(bandwidth_ghz):
        return arr
    sigma = bandwidth_sigma_samples(grid, bandwidth_ghz)
    return gaussian_filter1d(arr, sigma, axis=-1, mode="reflect")
