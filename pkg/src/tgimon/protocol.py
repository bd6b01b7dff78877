"""Session orchestration: scheduling, sifting, experiments.

Both parties flip a private per-round coin: Alice between key pulses and
channel-probe light, Bob between normal detection and self-test light in
front of his own detector.  After the session the labels are announced
and rounds are sifted into joint-probe, self-test, key, and abandoned
(both probed) sets.  The channel-probe image watches for time-shift
attacks; the self-test image, compared against its no-attack prediction,
watches for detector blinding.

``run_experiment`` runs trusted calibration phases (attack off) before
the monitored session so the verdicts have baselines; calibration rounds
live at a disjoint range of the round counter.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from . import engine, presets
from .attacks import BlindingConfig, TimeShiftPlan, blinding_round
from .detector import ClickSources, SpadModel, compose_click
from .errors import ConfigError, InvariantViolation
from .rng import round_keys, slot_uniform, stream_for_round
from .signal import TimeGrid, TrsConfig, Waveform, make_grid, qkd_pulse
from .tgi import (CorrelationAccumulator, Image, Verdict, detect_blinding,
                  detect_time_shift, differential_image, image_to_csv,
                  predicted_image, reconstruct)

ALICE_QKD, ALICE_JOINT_TGI = "QKD", "JOINT_TGI"
BOB_QKD, BOB_LOCAL_TGI = "QKD", "LOCAL_TGI"


@dataclass(frozen=True)
class SessionSchedule:
    """Per-round party labels; True marks the TGI choice."""

    n_rounds: int
    alice_labels: np.ndarray  # bool, True = JOINT_TGI
    bob_labels: np.ndarray    # bool, True = LOCAL_TGI
    duty_joint: float
    duty_local: float


def schedule(n: int, duty_joint: float, duty_local: float,
             master_seed: int, phase_id: int = engine.PHASE_MONITOR) -> SessionSchedule:
    """Independent per-round Bernoulli labels for both parties.

    Labels are read from the same slots the chunked engine uses, so a
    schedule regenerated from the seed matches the engine's rounds.
    """
    for name, duty in (("duty_joint", duty_joint), ("duty_local", duty_local)):
        if not 0.0 <= duty <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1]")
    if n < 1:
        raise ConfigError("schedule needs at least one round")
    idx = np.arange(n, dtype=np.uint64) + np.uint64(phase_id << 48)
    keys = round_keys(master_seed, idx)
    alice = slot_uniform(keys, engine.SLOT_ALICE_LABEL) < duty_joint
    bob = slot_uniform(keys, engine.SLOT_BOB_LABEL) < duty_local
    for name, labels, duty in (("alice", alice, duty_joint), ("bob", bob, duty_local)):
        dev = abs(labels.mean() - duty)
        bound = 5.0 * np.sqrt(duty * (1.0 - duty) / n)
        if dev > bound and bound > 0:
            raise InvariantViolation(f"{name} duty deviates {dev:.2g} > 5 sd")
    return SessionSchedule(n, alice, bob, duty_joint, duty_local)


@dataclass(frozen=True)
class SiftResult:
    """Announced-label partition of the session's round indices."""

    joint_rounds: np.ndarray
    local_rounds: np.ndarray
    qkd_rounds: np.ndarray
    abandoned: np.ndarray


def sift(sched: SessionSchedule) -> SiftResult:
    """Partition rounds by the announced labels (pure and rerunnable)."""
    a, b = sched.alice_labels, sched.bob_labels
    return SiftResult(
        joint_rounds=np.flatnonzero(a & ~b),
        local_rounds=np.flatnonzero(b & ~a),
        qkd_rounds=np.flatnonzero(~a & ~b),
        abandoned=np.flatnonzero(a & b),
    )


@dataclass(frozen=True)
class GroundTruth:
    """What the adversary actually did this round (validation only).

    Detection operates on images and accumulators and never sees this.
    """

    delay_ns: float | None
    i_te0: int
    i_te1: int


@dataclass
class RoundRecord:
    index: int
    alice_label: str
    bob_label: str
    ref_waveform: Waveform | None
    click: int
    truth: GroundTruth | None = None


def run_round(index: int, sched: SessionSchedule,
              run: engine.ResolvedRun) -> RoundRecord:
    """One round, scalar path.

    Reads the same addressed random slots as the chunked engine, so for a
    schedule generated from the same seed the record's source light,
    adversary action, and click bit match the engine's round exactly.
    """
    alice_tgi = bool(sched.alice_labels[index])
    bob_tgi = bool(sched.bob_labels[index])
    stream = stream_for_round(run.master_seed, run.phase_offset + index)

    if len(run.delays_ns) > 1:
        row = 0 if stream.uniform_at(engine.SLOT_DELAY) < run.delay_split else 1
    else:
        row = 0

    blinded = run.blinding is not None
    te0 = te1 = 0
    if blinded:
        outcome = blinding_round(run.blinding, stream,
                                 attack_slot=engine.SLOT_EVE_ATTACK,
                                 basis_slot=engine.SLOT_EVE_BASIS)
        te0, te1 = outcome.i_te0, outcome.i_te1

    feats_a = feats_b = None
    tb_joint = tb_local = 0
    if alice_tgi:
        u = stream.uniforms_at(engine.SLOT_TRS_ALICE, run.n_features)
        feats_a = _features_from_uniforms(run, u)
        if not blinded:
            x = run.coef_joint * float(np.einsum("ij,ij->i", feats_a[None],
                                                 run.s_joint[row][None])[0])
            tb_joint = int(stream.uniform_at(engine.SLOT_CLICK_TB_JOINT)
                           < -np.expm1(-x))
    if bob_tgi:
        u = stream.uniforms_at(run.slot_trs_bob, run.n_features)
        feats_b = _features_from_uniforms(run, u)
        x = run.coef_local * float(np.einsum("ij,ij->i", feats_b[None],
                                             run.s_local[None])[0])
        tb_local = int(stream.uniform_at(engine.SLOT_CLICK_TB_LOCAL)
                       < -np.expm1(-x))

    ta = 0
    if not blinded and not alice_tgi:
        p_ta = -np.expm1(-run.x_qkd[row])
        ta = int(stream.uniform_at(engine.SLOT_CLICK_TA) < p_ta)
    td = int(stream.uniform_at(engine.SLOT_CLICK_TD) < run.dark_prob)

    if blinded:
        sources = ClickSources(i_tb=tb_local, i_ta=0, i_td=td,
                               i_te0=te0, i_te1=te1)
    else:
        sources = ClickSources(i_tb=tb_joint | tb_local, i_ta=ta, i_td=td)
    click = compose_click(sources, blinded=blinded)

    feats = feats_a if alice_tgi else feats_b
    ref = None
    if feats is not None:
        ref = Waveform(run.grid, engine.lift_reference(run, feats * run.ref_scale))

    plan_active = len(run.delays_ns) > 1 or run.delays_ns[0] != 0.0
    truth = GroundTruth(delay_ns=float(run.delays_ns[row]) if plan_active else None,
                        i_te0=te0, i_te1=te1)
    return RoundRecord(index=index,
                       alice_label=ALICE_JOINT_TGI if alice_tgi else ALICE_QKD,
                       bob_label=BOB_LOCAL_TGI if bob_tgi else BOB_QKD,
                       ref_waveform=ref, click=click, truth=truth)


def _features_from_uniforms(run: engine.ResolvedRun, u: np.ndarray) -> np.ndarray:
    if run.bin_of_sample is not None:
        return u
    from scipy.ndimage import gaussian_filter1d
    return gaussian_filter1d(-np.log1p(-u), run.filter_sigma, mode="wrap")


# -- experiment assembly ----------------------------------------------------

@dataclass
class ExperimentResult:
    preset: str | None
    config: dict
    config_digest: str
    images: dict            # name -> Image
    verdicts: dict          # "time_shift" / "blinding" -> Verdict
    summary: dict
    runtime_s: float

    @property
    def any_attacked(self) -> bool:
        return any(v.attacked for v in self.verdicts.values())


def _build_common(cfg: dict):
    grid = make_grid(cfg["grid"]["window_ns"], cfg["grid"]["dt_ns"])
    trs = TrsConfig(mode=cfg["source"]["mode"],
                    coherence_time_ps=cfg["source"]["coherence_time_ps"],
                    mean_intensity=cfg["source"]["mean_intensity"])
    spad = config_mod._build_spad(cfg, grid)
    return grid, trs, spad


def _pulse_at_bob(cfg: dict, grid: TimeGrid, mu_a: float) -> np.ndarray:
    if mu_a == 0:
        return np.zeros(grid.n_samples)
    pulse = qkd_pulse(grid, mu_a, cfg["qkd"]["pulse_center_ns"],
                      cfg["qkd"]["pulse_fwhm_ns"])
    return pulse.samples * 10.0 ** (-cfg["channel"]["loss_db"] / 10.0)


def _attack_objects(cfg: dict):
    atk = cfg["attack"]
    if atk["kind"] == "time_shift":
        return TimeShiftPlan(tuple(atk["delays_ns"]),
                             tuple(atk["probabilities"])), None
    if atk["kind"] == "blinding":
        return None, BlindingConfig(atk["attack_prob"], atk["basis_match_prob"])
    return None, None


def _resolve_phase(cfg, grid, trs, spad, *, duty_joint, duty_local, mu_a,
                   dark_prob, plan, blinding, phase_id) -> engine.ResolvedRun:
    spad_phase = spad if dark_prob == spad.dark_prob else SpadModel(
        grid=grid, eta=spad.eta, dark_prob=dark_prob,
        gate_period_ns=spad.gate_period_ns)
    return engine.resolve_run(
        grid=grid, trs=trs, spad=spad_phase,
        loss_db=cfg["channel"]["loss_db"],
        mu_t=cfg["source"]["mu_t"], mu_t_local=cfg["source"]["mu_t_local"],
        qkd_pulse_bob=_pulse_at_bob(cfg, grid, mu_a),
        duty_joint=duty_joint, duty_local=duty_local,
        plan=plan, blinding=blinding,
        bandwidth_ghz=REFERENCE_BANDWIDTH_GHZ,
        reservoir_cap=cfg["analysis"]["reservoir_cap"],
        master_seed=cfg["master_seed"], phase_id=phase_id,
        chunk_rounds=cfg["protocol"]["chunk_rounds"])


# Analyzer chain bandwidth for the reference arm recording.
REFERENCE_BANDWIDTH_GHZ = 12.5

# ia_est prefers the session's own key rounds once they can pin the rate
# to a few percent; tiny demos fall back to the configured expectation.
_MIN_QKD_ROUNDS_FOR_RATE = 1000


def run_experiment(preset: str | None = None, overrides: dict | None = None,
                   master_seed: int | None = None, workers: int = 1,
                   n_rounds: int | None = None) -> ExperimentResult:
    """Calibrate, run the monitored session, reconstruct, and judge."""
    user: dict = {}
    if preset is not None:
        user = config_mod.deep_merge(user, presets.overrides(preset))
    if overrides:
        user = config_mod.deep_merge(user, overrides)
    if master_seed is not None:
        user["master_seed"] = master_seed
    if n_rounds is not None:
        user.setdefault("protocol", {})["n_rounds"] = n_rounds
    cfg, digest = config_mod.finalize(user)

    t0 = time.monotonic()
    grid, trs, spad = _build_common(cfg)
    plan, blinding = _attack_objects(cfg)
    proto = cfg["protocol"]
    resamples = cfg["analysis"]["resamples"]
    do_joint = proto["duty_joint"] > 0
    do_local = proto["duty_local"] > 0
    if not do_joint and not do_local:
        raise ConfigError("protocol duties disable both monitors; nothing to run")

    images: dict[str, Image] = {}
    verdicts: dict[str, Verdict] = {}
    summary: dict = {"preset": preset, "master_seed": cfg["master_seed"],
                     "config_digest": digest, "config": cfg}

    if do_joint:
        cal = _resolve_phase(cfg, grid, trs, spad, duty_joint=1.0, duty_local=0.0,
                             mu_a=cfg["qkd"]["mu_a"], dark_prob=spad.dark_prob,
                             plan=None, blinding=None,
                             phase_id=engine.PHASE_CAL_JOINT)
        res = engine.run_phase(cal, proto["calib_rounds"], workers)
        acc = engine.to_grid_accumulator(res.joint, cal)
        images["joint_baseline"] = reconstruct(acc, resamples)
    if do_local:
        # Trusted self-characterisation: key light off, darks excluded.
        cal = _resolve_phase(cfg, grid, trs, spad, duty_joint=0.0, duty_local=1.0,
                             mu_a=0.0, dark_prob=0.0, plan=None, blinding=None,
                             phase_id=engine.PHASE_CAL_LOCAL)
        res = engine.run_phase(cal, proto["calib_rounds"], workers)
        acc = engine.to_grid_accumulator(res.local, cal)
        images["local_base"] = reconstruct(acc, resamples)

    mon = _resolve_phase(cfg, grid, trs, spad,
                         duty_joint=proto["duty_joint"],
                         duty_local=proto["duty_local"],
                         mu_a=cfg["qkd"]["mu_a"], dark_prob=spad.dark_prob,
                         plan=plan, blinding=blinding,
                         phase_id=engine.PHASE_MONITOR)
    res = engine.run_phase(mon, proto["n_rounds"], workers)

    counts = {"n_rounds": res.n_rounds, "joint": res.n_joint,
              "local": res.n_local, "qkd": res.n_qkd,
              "abandoned": res.n_abandoned,
              "calib_rounds": proto["calib_rounds"]}
    rates: dict = {}
    truth = {"te0_rounds": res.truth_te0, "te1_rounds": res.truth_te1,
             "delay_rounds": {str(k): v for k, v in
                              sorted(res.truth_delay_counts.items())}}

    analytic_ia = float(-np.expm1(-mon.x_qkd[0]))
    if res.n_qkd >= _MIN_QKD_ROUNDS_FOR_RATE:
        qkd_rate = res.qkd_clicks / res.n_qkd
        dark = spad.dark_prob
        ia_est = max(0.0, (qkd_rate - dark) / (1.0 - dark))
        rates["qkd_click_rate"] = qkd_rate
        rates["ia_source"] = "measured"
    else:
        ia_est = analytic_ia
        rates["ia_source"] = "expected"
    rates["ia_est"] = ia_est

    if do_joint:
        acc = engine.to_grid_accumulator(res.joint, mon)
        images["joint"] = reconstruct(acc, resamples)
        rates["joint_click_rate"] = acc.sum_test / acc.n
        verdicts["time_shift"] = detect_time_shift(
            images["joint"], images["joint_baseline"],
            k=cfg["analysis"]["k_sigma"],
            coherence_ns=cfg["source"]["coherence_time_ps"] / 1000.0,
            config_digest=digest)
    if do_local:
        acc = engine.to_grid_accumulator(res.local, mon)
        images["local"] = reconstruct(acc, resamples)
        rates["local_click_rate"] = acc.sum_test / acc.n
        images["local_predicted"] = predicted_image(images["local_base"],
                                                    ia_est, spad.dark_prob)
        images["local_diff"] = differential_image(images["local_predicted"],
                                                  images["local"])
        verdicts["blinding"] = detect_blinding(
            images["local_diff"], images["local_base"],
            k=cfg["analysis"]["k_sigma"],
            shape_gate=cfg["analysis"]["shape_gate"],
            config_digest=digest)

    summary["counts"] = counts
    summary["rates"] = rates
    summary["truth"] = truth
    summary["images"] = sorted(images)
    return ExperimentResult(preset=preset, config=cfg, config_digest=digest,
                            images=images, verdicts=verdicts, summary=summary,
                            runtime_s=time.monotonic() - t0)


def write_result(result: ExperimentResult, out_dir: str,
                 create: bool = False) -> None:
    """images/*.csv + verdicts.json + summary.json, byte-stable per seed.

    Wall-clock runtime deliberately stays out of the files so reruns from
    the same seed and config are byte-identical.
    """
    if not os.path.isdir(out_dir):
        if not create:
            raise FileNotFoundError(
                f"output directory {out_dir!r} does not exist (use create)")
        os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    for name, image in sorted(result.images.items()):
        image_to_csv(image, os.path.join(img_dir, f"{name}.csv"),
                     digest=result.config_digest)
    verdicts = {name: v.as_dict() for name, v in result.verdicts.items()}
    with open(os.path.join(out_dir, "verdicts.json"), "w") as fh:
        json.dump(verdicts, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
