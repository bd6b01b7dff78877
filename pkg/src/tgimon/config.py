"""Run configuration: JSON schema, defaults, validation, digest.

A config is a nested dict with the sections below.  Every key has a
default, an empty file is a valid config, and any key not in the schema
is rejected with its path (and source line when the text is available),
so typos fail loudly before a long run starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math

from . import attacks, detector, signal
from .errors import ConfigError

DEFAULTS: dict = {
    "grid": {
        "window_ns": 4.0,
        "dt_ns": 0.01,
    },
    "source": {
        "mode": "uniform_bins",          # or "filtered_gaussian"
        "coherence_time_ps": 80.0,
        "mean_intensity": 1.0,
        "mu_t": 0.6,                      # joint test arm, photons/window at channel input
        "mu_t_local": 0.6,                # Bob's self-test arm, photons/window
    },
    "channel": {
        "loss_db": 3.0,
    },
    "detector": {
        "eta_peak": 0.214,
        "eta_fwhm_ns": 0.27,
        "eta_center_ns": None,            # null -> window centre
        "dark_prob": 5e-5,
        "gate_period_ns": 100.0,
        "eta_profile_path": None,         # two-column file overrides the Gaussian
    },
    "qkd": {
        "mu_a": 0.5,
        "pulse_fwhm_ns": 0.05,
        "pulse_center_ns": None,          # null -> window centre
    },
    "attack": {
        "kind": "none",                   # none | time_shift | blinding
        "delays_ns": [],
        "probabilities": [],
        "attack_prob": "auto",            # blinding resend probability, or "auto"
        "basis_match_prob": 0.5,
        "calibration_mode": "peak",       # peak | effective
    },
    "protocol": {
        "n_rounds": 1_000_000,
        "duty_joint": 0.1,
        "duty_local": 0.1,
        "calib_rounds": None,             # null -> n_rounds
        "chunk_rounds": 65536,
    },
    "analysis": {
        "k_sigma": 5.0,
        "shape_gate": 0.8,
        "resamples": 100,
        "reservoir_cap": 32768,
    },
    "master_seed": 1,
}

_MODES = ("uniform_bins", "filtered_gaussian")
_ATTACK_KINDS = ("none", "time_shift", "blinding")
_CAL_MODES = ("peak", "effective")


def load_config(path: str) -> dict:
    """Parse a JSON config file; an empty file means all defaults."""
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    data["_raw_text"] = text
    return data


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _line_of(raw: str, key: str) -> str:
    if raw:
        leaf = key.split(".")[-1]
        for ln, line in enumerate(raw.splitlines(), start=1):
            if f'"{leaf}"' in line:
                return f" (line {ln})"
    return ""


def _check_unknown(user: dict, schema: dict, prefix: str, raw: str) -> None:
    for key, val in user.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{_line_of(raw, path)}")
        if isinstance(schema[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: expected an object")
            _check_unknown(val, schema[key], path + ".", raw)


def _number(cfg, path, lo=None, hi=None, lo_open=False, hi_open=False):
    sec, key = path.split(".")
    val = cfg[sec][key]
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ConfigError(f"{path}: expected a finite number")
    if lo is not None and (val <= lo if lo_open else val < lo):
        raise ConfigError(f"{path}: must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (val >= hi if hi_open else val > hi):
        raise ConfigError(f"{path}: must be {'<' if hi_open else '<='} {hi}")
    return float(val)


def _count(cfg, path, minimum):
    sec, key = path.split(".")
    val = cfg[sec][key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{path}: expected an integer")
    if val < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return val


def _choice(cfg, path, allowed):
    sec, key = path.split(".")
    val = cfg[sec][key]
    if val not in allowed:
        raise ConfigError(f"{path}: must be one of {', '.join(allowed)}")
    return val


def finalize(user: dict | None = None) -> tuple[dict, str]:
    """Merge over defaults, validate everything, resolve derived values.

    Returns the fully resolved config (the run's echo) and its digest.
    Raises ConfigError naming the offending key path.
    """
    user = dict(user or {})
    raw = user.pop("_raw_text", "")
    _check_unknown(user, DEFAULTS, "", raw)
    cfg = deep_merge(DEFAULTS, user)

    window = _number(cfg, "grid.window_ns", lo=0, lo_open=True)
    dt = _number(cfg, "grid.dt_ns", lo=0, lo_open=True)
    grid = signal.make_grid(window, dt)

    _choice(cfg, "source.mode", _MODES)
    _number(cfg, "source.coherence_time_ps", lo=0, lo_open=True)
    _number(cfg, "source.mean_intensity", lo=0, lo_open=True)
    _number(cfg, "source.mu_t", lo=0)
    _number(cfg, "source.mu_t_local", lo=0)
    _number(cfg, "channel.loss_db", lo=0)

    _number(cfg, "detector.eta_peak", lo=0, hi=1)
    _number(cfg, "detector.eta_fwhm_ns", lo=0, lo_open=True)
    if cfg["detector"]["eta_center_ns"] is None:
        cfg["detector"]["eta_center_ns"] = window / 2.0
    _number(cfg, "detector.eta_center_ns")
    _number(cfg, "detector.dark_prob", lo=0, hi=1, hi_open=True)
    _number(cfg, "detector.gate_period_ns", lo=0, lo_open=True)
    prof = cfg["detector"]["eta_profile_path"]
    if prof is not None and not isinstance(prof, str):
        raise ConfigError("detector.eta_profile_path: expected a path or null")

    _number(cfg, "qkd.mu_a", lo=0)
    _number(cfg, "qkd.pulse_fwhm_ns", lo=0, lo_open=True)
    if cfg["qkd"]["pulse_center_ns"] is None:
        cfg["qkd"]["pulse_center_ns"] = window / 2.0
    _number(cfg, "qkd.pulse_center_ns")

    kind = _choice(cfg, "attack.kind", _ATTACK_KINDS)
    if kind == "time_shift":
        delays = cfg["attack"]["delays_ns"]
        if not isinstance(delays, list) or not 1 <= len(delays) <= 2:
            raise ConfigError("attack.delays_ns: expected one or two delays")
        probs = cfg["attack"]["probabilities"]
        if not probs:
            probs = [1.0 / len(delays)] * len(delays)
            cfg["attack"]["probabilities"] = probs
        # TimeShiftPlan re-validates lengths and the probability sum.
        attacks.TimeShiftPlan(tuple(float(d) for d in delays),
                              tuple(float(p) for p in probs))
    _number(cfg, "attack.basis_match_prob", lo=0, lo_open=True, hi=1)
    _choice(cfg, "attack.calibration_mode", _CAL_MODES)
    ap = cfg["attack"]["attack_prob"]
    if ap == "auto":
        if kind == "blinding":
            spad = _build_spad(cfg, grid)
            if cfg["attack"]["calibration_mode"] == "peak":
                eta = cfg["detector"]["eta_peak"]
            else:
                probe = signal.qkd_pulse(grid, 1.0, cfg["qkd"]["pulse_center_ns"],
                                         cfg["qkd"]["pulse_fwhm_ns"])
                eta = attacks.effective_efficiency(spad, probe)
            blind = attacks.calibrate_blinding(
                cfg["channel"]["loss_db"], cfg["qkd"]["mu_a"], eta,
                cfg["attack"]["basis_match_prob"])
            cfg["attack"]["attack_prob"] = blind.attack_prob
    else:
        _number(cfg, "attack.attack_prob", lo=0, hi=1)

    _count(cfg, "protocol.n_rounds", 2)
    _number(cfg, "protocol.duty_joint", lo=0, hi=1)
    _number(cfg, "protocol.duty_local", lo=0, hi=1)
    if cfg["protocol"]["calib_rounds"] is None:
        cfg["protocol"]["calib_rounds"] = cfg["protocol"]["n_rounds"]
    _count(cfg, "protocol.calib_rounds", 2)
    _count(cfg, "protocol.chunk_rounds", 1)

    _number(cfg, "analysis.k_sigma", lo=0, lo_open=True)
    _number(cfg, "analysis.shape_gate", lo=0, hi=1)
    _count(cfg, "analysis.resamples", 20)
    _count(cfg, "analysis.reservoir_cap", 2)

    seed = cfg["master_seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("master_seed: expected a non-negative integer")

    return cfg, config_digest(cfg)


def _build_spad(cfg: dict, grid) -> detector.SpadModel:
    det = cfg["detector"]
    if det["eta_profile_path"]:
        return detector.load_eta_profile(det["eta_profile_path"], grid,
                                         det["dark_prob"], det["gate_period_ns"])
    return detector.default_spad(grid, det["eta_peak"], det["eta_fwhm_ns"],
                                 det["eta_center_ns"], det["dark_prob"],
                                 det["gate_period_ns"])


def config_digest(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
