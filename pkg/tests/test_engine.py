"""Chunked engine: resolution, chunk invariance, worker determinism."""

import numpy as np
import pytest

from tgimon import engine
from tgimon.attacks import BlindingConfig, TimeShiftPlan
from tgimon.detector import default_spad
from tgimon.errors import ConfigError
from tgimon.signal import TrsConfig, make_grid, qkd_pulse


def resolved(mode="uniform_bins", plan=None, blinding=None, seed=7,
             duty_joint=0.1, duty_local=0.1, mu_a=0.5, loss_db=3.0,
             cap=32768, chunk_rounds=engine.DEFAULT_CHUNK_ROUNDS,
             dark_prob=5e-5):
    grid = make_grid(4.0, 0.01)
    trs = TrsConfig(mode=mode, coherence_time_ps=80.0, mean_intensity=1.0)
    spad = default_spad(grid, dark_prob=dark_prob)
    if mu_a > 0:
        pulse = qkd_pulse(grid, mu_a, 2.0, 0.05).samples * 10 ** (-loss_db / 10)
    else:
        pulse = np.zeros(grid.n_samples)
    return engine.resolve_run(
        grid=grid, trs=trs, spad=spad, loss_db=loss_db, mu_t=0.6,
        mu_t_local=0.6, qkd_pulse_bob=pulse, duty_joint=duty_joint,
        duty_local=duty_local, plan=plan, blinding=blinding,
        bandwidth_ghz=12.5, reservoir_cap=cap, master_seed=seed,
        chunk_rounds=chunk_rounds)


def counts_tuple(res):
    return (res.n_rounds, res.n_joint, res.n_local, res.n_qkd,
            res.n_abandoned, res.qkd_clicks, res.truth_te0, res.truth_te1,
            tuple(sorted(res.truth_delay_counts.items())))


def assert_acc_equal(a, b, rtol=0.0):
    assert a.n == b.n
    assert a.sum_test == b.sum_test
    if rtol:
        np.testing.assert_allclose(a.sum_ref, b.sum_ref, rtol=rtol, atol=1e-12)
        np.testing.assert_allclose(a.sum_cross, b.sum_cross, rtol=rtol, atol=1e-12)
    else:
        assert np.array_equal(a.sum_ref, b.sum_ref)
        assert np.array_equal(a.sum_cross, b.sum_cross)
    ra, ca, pa = a._reservoir_with_priorities()
    rb, cb, pb = b._reservoir_with_priorities()
    oa, ob = np.argsort(pa), np.argsort(pb)
    assert np.array_equal(pa[oa], pb[ob])
    assert np.array_equal(ca[oa], cb[ob])
    assert np.array_equal(ra[oa], rb[ob])


def test_resolve_run_validation():
    with pytest.raises(ConfigError):
        resolved(duty_joint=1.5)
    with pytest.raises(ConfigError):
        resolved(loss_db=-1.0)
    with pytest.raises(ConfigError):
        resolved(chunk_rounds=0)
    grid = make_grid(4.0, 0.01)
    trs = TrsConfig(mode="uniform_bins", coherence_time_ps=80.0,
                    mean_intensity=1.0)
    with pytest.raises(ConfigError):
        engine.resolve_run(grid=grid, trs=trs, spad=default_spad(grid),
                           loss_db=3.0, mu_t=-0.1, mu_t_local=0.6,
                           qkd_pulse_bob=np.zeros(grid.n_samples),
                           duty_joint=0.1, duty_local=0.1, plan=None,
                           blinding=None, bandwidth_ghz=12.5,
                           reservoir_cap=1024, master_seed=1)


def test_resolved_feature_layout():
    run = resolved()
    assert run.n_features == 50
    assert run.bin_of_sample is not None
    assert run.feature_grid.n_samples == 50
    assert run.filter_sigma == 0.0
    assert run.slot_trs_bob == engine.SLOT_TRS_ALICE + 50

    run_f = resolved(mode="filtered_gaussian")
    assert run_f.n_features == 400
    assert run_f.bin_of_sample is None
    assert run_f.filter_sigma > 0


def test_resolved_qkd_exponent():
    # x_qkd is the efficiency-weighted mean photon number of the key
    # pulse as it arrives, one entry per attack delay.
    run = resolved(loss_db=3.0)
    grid = make_grid(4.0, 0.01)
    pulse = qkd_pulse(grid, 0.5, 2.0, 0.05).samples * 10 ** -0.3
    expected = float(default_spad(grid).eta @ pulse)
    assert run.x_qkd.shape == (1,)
    assert run.x_qkd[0] == pytest.approx(expected, rel=1e-12)

    run0 = resolved(mu_a=0.0)
    assert run0.x_qkd[0] == 0.0


def test_resolved_delay_rows_shift_the_overlap():
    plan = TimeShiftPlan((0.0, 1.0), (0.5, 0.5))
    run = resolved(plan=plan)
    base = resolved()
    assert run.s_joint.shape == (2, 50)
    assert np.array_equal(run.s_joint[0], base.s_joint[0])
    assert not np.array_equal(run.s_joint[1], run.s_joint[0])
    # 1 ns late means less light under the efficiency peak.
    assert run.s_joint[1].sum() < run.s_joint[0].sum()


def test_chunk_size_does_not_change_results():
    n = 12000
    a = engine.run_phase(resolved(chunk_rounds=1024), n)
    b = engine.run_phase(resolved(chunk_rounds=65536), n)
    assert counts_tuple(a) == counts_tuple(b)
    assert_acc_equal(a.joint, b.joint, rtol=1e-12)
    assert_acc_equal(a.local, b.local, rtol=1e-12)


def test_workers_bit_identical():
    n = 12288
    run = resolved(chunk_rounds=4096)
    seq = engine.run_phase(run, n, workers=1)
    par = engine.run_phase(run, n, workers=2)
    assert counts_tuple(seq) == counts_tuple(par)
    assert_acc_equal(seq.joint, par.joint)
    assert_acc_equal(seq.local, par.local)


def test_phase_offset_separates_streams():
    run_m = resolved()
    run_c = resolved()
    run_c.phase_offset = engine.PHASE_CAL_JOINT << 48
    a = engine.run_phase(run_m, 4000)
    b = engine.run_phase(run_c, 4000)
    assert (a.n_joint, a.n_local) != (b.n_joint, b.n_local) or \
        not np.array_equal(a.joint.sum_ref, b.joint.sum_ref)


def test_run_phase_rejects_empty():
    with pytest.raises(ConfigError):
        engine.run_phase(resolved(), 0)


def test_to_grid_accumulator_preserves_counts():
    run = resolved(cap=4096)
    res = engine.run_phase(run, 4000)
    acc = engine.to_grid_accumulator(res.joint, run)
    assert acc.n == res.joint.n
    assert acc.sum_test == res.joint.sum_test
    assert acc.grid.n_samples == 400
    assert acc.sum_ref.shape == (400,)
    refs, clicks = acc.reservoir()
    assert refs.shape[1] == 400
    assert np.array_equal(np.sort(clicks), np.sort(res.joint.reservoir()[1]))
