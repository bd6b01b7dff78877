"""Adversary models: delay plans and calibrated blinding."""

import math

import numpy as np
import pytest
from scipy import stats

from tgimon.attacks import (BlindingConfig, TimeShiftPlan, blinding_round,
                            blinding_target_rate, calibrate_blinding,
                            effective_efficiency, sample_delay)
from tgimon.detector import default_spad
from tgimon.errors import CalibrationError, ConfigError
from tgimon.rng import round_keys, slot_uniform, stream_for_round
from tgimon.signal import qkd_pulse


def test_plan_validation():
    TimeShiftPlan((0.3,), (1.0,))
    TimeShiftPlan((0.3, -0.3), (0.5, 0.5))
    with pytest.raises(ConfigError):
        TimeShiftPlan((), ())
    with pytest.raises(ConfigError):
        TimeShiftPlan((0.1, 0.2, 0.3), (0.3, 0.3, 0.4))
    with pytest.raises(ConfigError):
        TimeShiftPlan((0.3, -0.3), (0.7, 0.4))
    with pytest.raises(ConfigError):
        TimeShiftPlan((0.3, -0.3), (1.2, -0.2))


def test_single_delay_deterministic():
    plan = TimeShiftPlan((1.0,), (1.0,))
    for i in range(5):
        assert sample_delay(plan, stream_for_round(1, i)) == 1.0


def test_two_delay_frequencies_and_support():
    plan = TimeShiftPlan((0.3, -0.3), (0.5, 0.5))
    n = 1_000_000
    u = slot_uniform(round_keys(21, np.arange(n, dtype=np.uint64)), 2)
    draws = np.where(u < 0.5, 0.3, -0.3)
    frac = (draws == 0.3).mean()
    assert abs(frac - 0.5) < 0.0015
    # scalar API agrees with the vector embodiment on support
    seen = {sample_delay(plan, stream_for_round(21, i)) for i in range(200)}
    assert seen == {0.3, -0.3}


def test_delay_distribution_chi_square():
    plan = TimeShiftPlan((1.0, -1.0), (0.25, 0.75))
    n = 100_000
    counts = [0, 0]
    for i in range(n):
        d = sample_delay(plan, stream_for_round(31, i))
        counts[0 if d == 1.0 else 1] += 1
    chi2 = sum((c - n * p) ** 2 / (n * p)
               for c, p in zip(counts, plan.probabilities))
    assert stats.chi2.sf(chi2, df=1) > 0.001


def test_blinding_round_outcomes():
    off = BlindingConfig(attack_prob=0.0)
    for i in range(50):
        out = blinding_round(off, stream_for_round(2, i))
        assert (out.i_te0, out.i_te1) == (0, 0) and not out.attacked

    cfg = BlindingConfig(attack_prob=1.0, basis_match_prob=0.5)
    n = 1_000_000
    te0 = te1 = 0
    for i in range(n):
        out = blinding_round(cfg, stream_for_round(41, i))
        assert out.i_te0 * out.i_te1 == 0
        te0 += out.i_te0
        te1 += out.i_te1
    assert abs(te1 / n - 0.5) < 0.0015
    assert abs(te0 / n - 0.5) < 0.0015
    assert te0 + te1 == n


def test_blinding_rate_partial():
    cfg = BlindingConfig(attack_prob=0.4, basis_match_prob=0.5)
    assert cfg.forced_click_rate() == pytest.approx(0.2)
    n = 200_000
    te1 = sum(blinding_round(cfg, stream_for_round(51, i)).i_te1
              for i in range(n))
    bound = 3.0 * math.sqrt(0.2 * 0.8 / n)
    assert abs(te1 / n - 0.2) < bound


def test_calibration_closed_form():
    target = blinding_target_rate(7.0, 0.5, 0.214)
    assert target == pytest.approx(1.0 - math.exp(-(10 ** -0.7) * 0.5 * 0.214),
                                   rel=1e-12)
    assert target == pytest.approx(0.021124, abs=2e-6)
    cfg = calibrate_blinding(7.0, 0.5, 0.214)
    assert cfg.attack_prob == pytest.approx(0.042248, abs=4e-6)
    assert cfg.basis_match_prob == 0.5
    assert cfg.forced_click_rate() == pytest.approx(target, rel=1e-12)

    t20 = blinding_target_rate(20.0, 0.5, 0.214)
    assert t20 == pytest.approx(1.0 - math.exp(-0.01 * 0.5 * 0.214), rel=1e-12)
    assert t20 == pytest.approx(0.0010694, abs=1e-7)

    assert blinding_target_rate(math.inf, 0.5, 0.214) == 0.0
    assert calibrate_blinding(math.inf, 0.5, 0.214).attack_prob == 0.0


def test_calibration_unreachable_target():
    # a transparent channel needs a forced-click rate above what a 50%
    # basis coin can deliver
    with pytest.raises(CalibrationError):
        calibrate_blinding(0.0, 20.0, 0.9)


def test_calibration_input_validation():
    with pytest.raises(ConfigError):
        blinding_target_rate(-1.0, 0.5, 0.214)
    with pytest.raises(ConfigError):
        blinding_target_rate(7.0, -0.5, 0.214)
    with pytest.raises(ConfigError):
        blinding_target_rate(7.0, 0.5, 1.5)


def test_calibration_identity_empirical(grid):
    # forced-click rate equals the legitimate no-attack click rate; use the
    # pulse-weighted efficiency so both sides integrate the same profile
    spad = default_spad(grid, dark_prob=0.0)
    pulse = qkd_pulse(grid, 0.5, 2.0, 0.05)
    loss = 7.0
    eta_eff = effective_efficiency(spad, pulse)
    cfg = calibrate_blinding(loss, 0.5, eta_eff)

    alpha = 10.0 ** (-loss / 10.0)
    legit = 1.0 - math.exp(-alpha * float(spad.eta @ pulse.samples))

    n = 1_000_000
    u_atk = slot_uniform(round_keys(61, np.arange(n, dtype=np.uint64)), 3)
    u_basis = slot_uniform(round_keys(61, np.arange(n, dtype=np.uint64)), 4)
    te1 = ((u_atk < cfg.attack_prob) & (u_basis < 0.5)).mean()
    se = math.sqrt(legit * (1 - legit) / n)
    assert abs(te1 - legit) < 3 * se


def test_effective_efficiency_below_peak(grid):
    spad = default_spad(grid)
    pulse = qkd_pulse(grid, 0.5, 2.0, 0.05)
    eff = effective_efficiency(spad, pulse)
    assert 0.9 * 0.214 < eff < 0.214
    with pytest.raises(ConfigError):
        effective_efficiency(spad, qkd_pulse(grid, 0.0, 2.0, 0.05))
