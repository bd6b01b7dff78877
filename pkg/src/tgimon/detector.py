"""Gated single-photon detector model and click composition.

The SPAD is a Poissonian threshold detector: within one gate the click
probability for incident mean photon numbers mu(t) is

    p = 1 - (1 - dark_prob) * exp(-sum_t eta(t) * mu(t))

which factorises over independent light sources.  Click composition
combines per-source Bernoulli bits into the single binary outcome the
bucket detector reports, with and without a blinding adversary driving
the diode in linear mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridMismatch, InvariantViolation, UndefinedResult
from .rng import RandomStream
from .signal import TimeGrid, Waveform, check_same_grid

_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class SpadModel:
    """Gated SPAD: per-sample efficiency profile plus dark counts."""

    grid: TimeGrid
    eta: np.ndarray = field(repr=False)
    dark_prob: float = 5e-5
    gate_period_ns: float = 100.0

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=np.float64)
        object.__setattr__(self, "eta", eta)
        if eta.shape != (self.grid.n_samples,):
            raise GridMismatch("eta profile length does not match the grid")
        if np.any(eta < 0) or np.any(eta > 1) or not np.all(np.isfinite(eta)):
            raise ConfigError("eta must lie in [0, 1] everywhere")
        if not 0.0 <= self.dark_prob < 1.0:
            raise ConfigError("dark_prob must lie in [0, 1)")
        if self.gate_period_ns <= 0:
            raise ConfigError("gate_period_ns must be positive")


def default_spad(grid: TimeGrid, peak: float = 0.214, fwhm_ns: float = 0.27,
                 center_ns: float | None = None, dark_prob: float = 5e-5,
                 gate_period_ns: float = 100.0) -> SpadModel:
    """Gaussian efficiency profile centred in the window (10 MHz gate)."""
    if center_ns is None:
        center_ns = grid.window_ns / 2.0
    sigma = fwhm_ns / _FWHM_PER_SIGMA
    t = grid.times()
    eta = peak * np.exp(-0.5 * ((t - center_ns) / sigma) ** 2)
    return SpadModel(grid=grid, eta=eta, dark_prob=dark_prob,
                     gate_period_ns=gate_period_ns)


def load_eta_profile(path: str, grid: TimeGrid, dark_prob: float = 5e-5,
                     gate_period_ns: float = 100.0) -> SpadModel:
    """SPAD from a two-column text file (time_ns, eta).

    The tabulated profile is linearly resampled onto the grid; times
    outside the tabulated range get zero efficiency.
    """
    data = np.loadtxt(path, ndmin=2)
    if data.ndim != 2 or data.shape[1] != 2 or data.shape[0] < 2:
        raise ConfigError(f"{path}: expected two columns (time_ns, eta)")
    t, eta = data[:, 0], data[:, 1]
    if np.any(np.diff(t) <= 0):
        raise ConfigError(f"{path}: time column must be strictly increasing")
    resampled = np.interp(grid.times(), t, eta, left=0.0, right=0.0)
    return SpadModel(grid=grid, eta=resampled, dark_prob=dark_prob,
                     gate_period_ns=gate_period_ns)


def click_probability(spad: SpadModel, incident: Waveform) -> float:
    check_same_grid(spad.grid, incident.grid)
    x = float(spad.eta @ incident.samples)
    return 1.0 - (1.0 - spad.dark_prob) * math.exp(-x)


def sample_click(spad: SpadModel, incident: Waveform, stream: RandomStream,
                 slot: int | None = None) -> int:
    """Bernoulli click for one gate."""
    p = click_probability(spad, incident)
    u = stream.uniform() if slot is None else stream.uniform_at(slot)
    return int(u < p)


@dataclass(frozen=True)
class ClickSources:
    """Per-source click bits for one gate.

    i_tb: ghost-imaging light, i_ta: key pulse light, i_td: dark count.
    i_te1 / i_te0 are the blinding adversary's forced-click and forced-
    silence controls; she can assert at most one of them per gate.
    """

    i_tb: int = 0
    i_ta: int = 0
    i_td: int = 0
    i_te0: int = 0
    i_te1: int = 0

    def __post_init__(self):
        for name in ("i_tb", "i_ta", "i_td", "i_te0", "i_te1"):
            if getattr(self, name) not in (0, 1):
                raise InvariantViolation(f"{name} must be a 0/1 bit")
        if self.i_te0 and self.i_te1:
            raise InvariantViolation("i_te0 and i_te1 cannot both be set")


def compose_click(sources: ClickSources, blinded: bool) -> int:
    """Combine source bits into the detector's single binary outcome.

    Unblinded, any light source or a dark count fires the gate and the
    adversary bits are inert.  Blinded, the diode is in linear mode: a
    forced-silence bit vetoes everything, a forced-click bit fires it, and
    the legitimate key pulse never reaches the diode at all.
    """
    s = sources
    if not blinded:
        return 1 - (1 - s.i_tb) * (1 - s.i_ta) * (1 - s.i_td)
    return (1 - (1 - s.i_tb) * (1 - s.i_te1) * (1 - s.i_td)) * (1 - s.i_te0)


def mismatch_ratio(spad_a: SpadModel, spad_b: SpadModel, t_ns: float) -> float:
    """Efficiency mismatch eta_a / (eta_a + eta_b) at one instant.

    This is the quantity a time-shift attacker steers between 0 and 1 on
    paired gated detectors.
    """
    check_same_grid(spad_a.grid, spad_b.grid)
    k = spad_a.grid.index_of(t_ns)
    ea, eb = float(spad_a.eta[k]), float(spad_b.eta[k])
    if ea + eb == 0.0:
        raise UndefinedResult(f"both efficiencies vanish at t = {t_ns} ns")
    return ea / (ea + eb)
