"""Passive optics: attenuation, delay, and beam splitting.

Everything here acts on intensities, not field amplitudes; photon
statistics enter only through the detector model.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .signal import Waveform


def attenuate(wf: Waveform, loss_db: float) -> Waveform:
    """Apply loss_db of transmission loss (0 dB is the identity)."""
    if loss_db < 0:
        raise ConfigError(f"loss_db must be non-negative, got {loss_db}")
    return Waveform(wf.grid, wf.samples * 10.0 ** (-loss_db / 10.0))


def delay_samples(grid_dt_ns: float, delta_ns: float) -> int:
    return int(round(delta_ns / grid_dt_ns))


def delay(wf: Waveform, delta_ns: float) -> Waveform:
    """Shift by the nearest whole number of samples, zero-filling the gap.

    Content shifted past either window edge is lost, matching a gated
    detector that simply never sees it.
    """
    k = delay_samples(wf.grid.dt_ns, delta_ns)
    out = np.zeros_like(wf.samples)
    if k >= 0:
        if k < wf.grid.n_samples:
            out[k:] = wf.samples[: wf.grid.n_samples - k]
    else:
        if -k < wf.grid.n_samples:
            out[:k] = wf.samples[-k:]
    return Waveform(wf.grid, out)


def beamsplit(wf: Waveform, ratio: float) -> tuple[Waveform, Waveform]:
    """Split into (ratio, 1 - ratio) intensity fractions."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"split ratio must lie in [0, 1], got {ratio}")
    return (Waveform(wf.grid, wf.samples * ratio),
            Waveform(wf.grid, wf.samples * (1.0 - ratio)))
