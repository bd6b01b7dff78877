"""Channel attacks: time-shift plans and detector blinding.

A time-shift attacker inserts one of a small set of delays into the
quantum channel each round.  A blinding attacker intercepts every round,
drives the receiver diode into linear mode, and resends bright pulses on
a calibrated fraction of rounds so the receiver's count rate matches the
legitimate one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import CalibrationError, ConfigError
from .rng import RandomStream

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class TimeShiftPlan:
    """One or two channel delays with selection probabilities."""

    delays_ns: tuple[float, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self):
        if not 1 <= len(self.delays_ns) <= 2:
            raise ConfigError("a time-shift plan holds one or two delays")
        if len(self.probabilities) != len(self.delays_ns):
            raise ConfigError("need one probability per delay")
        if any(p < 0 for p in self.probabilities):
            raise ConfigError("delay probabilities must be non-negative")
        if abs(sum(self.probabilities) - 1.0) > _PROB_TOL:
            raise ConfigError("delay probabilities must sum to 1")


def sample_delay(plan: TimeShiftPlan, stream: RandomStream,
                 slot: int | None = None) -> float:
    """Delay applied this round."""
    if len(plan.delays_ns) == 1:
        return plan.delays_ns[0]
    u = stream.uniform() if slot is None else stream.uniform_at(slot)
    return plan.delays_ns[0] if u < plan.probabilities[0] else plan.delays_ns[1]


@dataclass(frozen=True)
class BlindingConfig:
    """Blinding attack: resend probability and basis-match statistics."""

    attack_prob: float
    basis_match_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.attack_prob <= 1.0:
            raise ConfigError("attack_prob must lie in [0, 1]")
        if not 0.0 < self.basis_match_prob <= 1.0:
            raise ConfigError("basis_match_prob must lie in (0, 1]")

    def forced_click_rate(self) -> float:
        """Expected per-round forced-click probability <I_te1>."""
        return self.attack_prob * self.basis_match_prob


@dataclass(frozen=True)
class BlindingOutcome:
    """Eve's action in one round."""

    attacked: bool
    i_te0: int
    i_te1: int


def blinding_round(cfg: BlindingConfig, stream: RandomStream,
                   attack_slot: int | None = None,
                   basis_slot: int | None = None) -> BlindingOutcome:
    """Sample Eve's per-round behaviour.

    When she resends, a basis match forces a click (i_te1) and a mismatch
    forces silence (i_te0); when she does not resend she stays passive.
    """
    ua = stream.uniform() if attack_slot is None else stream.uniform_at(attack_slot)
    if ua >= cfg.attack_prob:
        return BlindingOutcome(attacked=False, i_te0=0, i_te1=0)
    ub = stream.uniform() if basis_slot is None else stream.uniform_at(basis_slot)
    if ub < cfg.basis_match_prob:
        return BlindingOutcome(attacked=True, i_te0=0, i_te1=1)
    return BlindingOutcome(attacked=True, i_te0=1, i_te1=0)


def blinding_target_rate(loss_db: float, mu_a: float, eta: float) -> float:
    """Forced-click rate Eve must hit: the legitimate detection rate.

    ``eta`` is the detection efficiency she assumes; with the linear
    channel transmission alpha this is 1 - exp(-alpha * mu_a * eta).
    """
    if loss_db < 0:
        raise ConfigError("loss_db must be non-negative")
    if mu_a < 0:
        raise ConfigError("mu_a must be non-negative")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("eta must lie in [0, 1]")
    alpha = 10.0 ** (-loss_db / 10.0)
    return 1.0 - math.exp(-alpha * mu_a * eta)


def calibrate_blinding(loss_db: float, mu_a: float, eta: float,
                       basis_match_prob: float = 0.5) -> BlindingConfig:
    """Attack probability that camouflages Eve's count rate.

    Only a basis-matched resend clicks, so she attacks on
    target / basis_match_prob of the rounds.  By default ``eta`` is the
    peak detection efficiency; pass ``effective_efficiency`` of the actual
    pulse instead to calibrate against what the receiver truly measures.
    """
    target = blinding_target_rate(loss_db, mu_a, eta)
    attack_prob = target / basis_match_prob
    if attack_prob > 1.0:
        raise CalibrationError(
            f"forced-click target {target:.6g} unreachable with "
            f"basis_match_prob {basis_match_prob}"
        )
    return BlindingConfig(attack_prob=attack_prob,
                          basis_match_prob=basis_match_prob)


def effective_efficiency(spad, pulse) -> float:
    """Pulse-weighted detection efficiency seen by a given key pulse.

    For a pulse with window sum mu the no-dark click probability is
    1 - exp(-eff * mu) with eff = sum(eta * pulse) / mu, which is what a
    careful Eve would calibrate against instead of the quoted peak.
    """
    mu = pulse.total()
    if mu <= 0:
        raise ConfigError("pulse carries no light")
    return float(spad.eta @ pulse.samples) / mu
