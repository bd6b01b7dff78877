"""Named experiment presets.

Each preset is a set of overrides onto the config defaults.  The ids are
part of the CLI interface; descriptions say what each run does.  The
self-test intensities 3.341405 and 14.617916 put the mean self-test
click rate at 0.050 and 0.20 per gate for the default detector profile.
"""

from __future__ import annotations

import copy

from .errors import ConfigError

_MU_TB_005 = 3.341405
_MU_TB_020 = 14.617916


def _joint(loss_db, n_rounds, attack=None):
    ov = {
        "channel": {"loss_db": loss_db},
        "source": {"mu_t": 0.6},
        "protocol": {"n_rounds": n_rounds, "duty_joint": 1.0, "duty_local": 0.0},
    }
    if attack:
        ov["attack"] = attack
    return ov


def _local_blinding(loss_db, n_rounds, attack_prob, mu_tb=_MU_TB_005):
    return {
        "channel": {"loss_db": loss_db},
        "source": {"mu_t_local": mu_tb},
        "protocol": {"n_rounds": n_rounds, "duty_joint": 0.0, "duty_local": 1.0},
        "attack": {"kind": "blinding", "attack_prob": attack_prob},
    }


def _shift(delays, probabilities=None):
    atk = {"kind": "time_shift", "delays_ns": delays}
    if probabilities:
        atk["probabilities"] = probabilities
    return atk


PRESETS: dict[str, dict] = {
    "fig2g": {
        "description": "channel-probe image, no attack, 3 dB loss, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000),
    },
    "fig2h": {
        "description": "channel-probe image, no attack, 7 dB loss, 5e6 rounds",
        "overrides": _joint(7.0, 5_000_000),
    },
    "fig3a": {
        "description": "time-shift attack, +1.0 ns delay, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([1.0])),
    },
    "fig3b": {
        "description": "time-shift attack, +0.3 ns delay, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([0.3])),
    },
    "fig3c": {
        "description": "time-shift attack, -0.3 ns delay, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([-0.3])),
    },
    "fig3d": {
        "description": "time-shift attack, -1.0 ns delay, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([-1.0])),
    },
    "fig3e": {
        "description": "two-delay attack, +/-0.3 ns at 50/50, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([0.3, -0.3], [0.5, 0.5])),
    },
    "fig3f": {
        "description": "two-delay attack, +/-1.0 ns at 50/50, 3 dB, 5e6 rounds",
        "overrides": _joint(3.0, 5_000_000, _shift([1.0, -1.0], [0.5, 0.5])),
    },
    "fig4": {
        "description": "self-test under full blinding (resend every round), 3 dB, 5e6 rounds",
        "overrides": _local_blinding(3.0, 5_000_000, 1.0),
    },
    "fig5c1": {
        "description": "calibrated partial blinding, 7 dB, 5e6 rounds (below detection power)",
        "overrides": _local_blinding(7.0, 5_000_000, "auto"),
    },
    "fig5c2": {
        "description": "calibrated partial blinding, 7 dB, 5e8 rounds",
        "overrides": _local_blinding(7.0, 500_000_000, "auto"),
    },
    "fig5c3": {
        "description": "calibrated partial blinding, 20 dB, 5e8 rounds (below detection power)",
        "overrides": _local_blinding(20.0, 500_000_000, "auto"),
    },
    "fig5c4": {
        "description": "calibrated partial blinding, 20 dB, 5e9 rounds (long-running)",
        "overrides": _local_blinding(20.0, 5_000_000_000, "auto"),
    },
    "fig5c4_surrogate": {
        "description": "20 dB blinding with self-test rate raised to 0.20, 1e9 rounds",
        "overrides": _local_blinding(20.0, 1_000_000_000, "auto", mu_tb=_MU_TB_020),
    },
    "protocol_demo": {
        "description": "interleaved session, 10%/10% duty, no attack, 1e6 rounds",
        "overrides": {"protocol": {"n_rounds": 1_000_000}},
    },
}


def names() -> list[str]:
    return list(PRESETS)


def describe() -> dict[str, str]:
    return {name: entry["description"] for name, entry in PRESETS.items()}


def overrides(name: str) -> dict:
    if name not in PRESETS:
        known = ", ".join(PRESETS)
        raise ConfigError(f"unknown preset {name!r}; known presets: {known}")
    return copy.deepcopy(PRESETS[name]["overrides"])
