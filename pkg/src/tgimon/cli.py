"""Command-line front end.

Exit codes follow a monitoring-probe convention: 0 clean, 2 when any
verdict reports an attack, 1 on errors.  That lets shell pipelines alarm
on the return status alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as config_mod
from . import presets, protocol
from .errors import TgimonError
from .tgi import (csv_metadata, detect_blinding, detect_time_shift,
                  differential_image, image_from_csv)

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_ATTACKED = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgimon",
        description="Temporal-ghost-imaging link monitor: simulate QKD "
                    "sessions under attack and analyse the images.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an experiment and write artifacts")
    _add_run_args(sim)
    sim.add_argument("--out", help="output directory for images and JSON")
    sim.add_argument("--create", action="store_true",
                     help="create the output directory if missing")
    sim.add_argument("--workers", type=int, default=1,
                     help="parallel simulation processes (default 1)")

    det = sub.add_parser("detect", help="re-run detection on stored images")
    det.add_argument("--image", required=True, help="measured image CSV")
    det.add_argument("--baseline", required=True, help="baseline image CSV")
    det.add_argument("--mode", required=True,
                     choices=("time_shift", "blinding"))
    det.add_argument("--predicted",
                     help="predicted-image CSV; blinding mode subtracts the "
                          "measured image from this instead of the baseline")
    det.add_argument("--k", type=float, default=5.0,
                     help="significance threshold in noise-floor units")
    det.add_argument("--coherence-ns", type=float, default=0.08,
                     help="source coherence time for shift significance")
    det.add_argument("--shape-gate", type=float, default=0.8,
                     help="minimum shape correlation for a blinding verdict")

    lst = sub.add_parser("presets", help="list available presets")
    lst.set_defaults(command="presets")

    val = sub.add_parser("validate", help="check a config without running")
    _add_run_args(val)
    return parser


def _add_run_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--preset", help="named preset (see: tgimon presets)")
    sub.add_argument("--seed", type=int, help="override master_seed")
    sub.add_argument("--rounds", type=int,
                     help="override the monitored round count")


def _merged_overrides(args) -> dict:
    user: dict = {}
    if args.config:
        user = config_mod.load_config(args.config)
    return user


def cmd_simulate(args) -> int:
    # fail on a bad output directory before burning simulation time
    if args.out and not args.create and not os.path.isdir(args.out):
        raise FileNotFoundError(
            f"output directory {args.out!r} does not exist (use --create)")
    result = protocol.run_experiment(
        preset=args.preset, overrides=_merged_overrides(args),
        master_seed=args.seed, workers=args.workers, n_rounds=args.rounds)
    if args.out:
        protocol.write_result(result, args.out, create=args.create)

    counts = result.summary["counts"]
    rates = result.summary["rates"]
    print(f"preset:   {result.preset or '-'}")
    print(f"digest:   {result.config_digest[:16]}")
    print(f"rounds:   {counts['n_rounds']} monitored "
          f"(+{counts['calib_rounds']} calibration per phase)")
    print(f"sifted:   joint={counts['joint']} local={counts['local']} "
          f"qkd={counts['qkd']} abandoned={counts['abandoned']}")
    for name in ("joint_click_rate", "local_click_rate", "qkd_click_rate"):
        if name in rates:
            print(f"{name.split('_')[0]} rate: {rates[name]:.6f}")
    for kind, verdict in sorted(result.verdicts.items()):
        flag = "ATTACKED" if verdict.attacked else "clean"
        print(f"{kind}: {flag} (statistic {verdict.statistic:.2f} sigma, "
              f"estimate {verdict.estimate:+.4g})")
    if args.out:
        print(f"artifacts: {args.out}")
    print(f"runtime:  {result.runtime_s:.1f} s")
    return EXIT_ATTACKED if result.any_attacked else EXIT_CLEAN


def cmd_detect(args) -> int:
    image = image_from_csv(args.image)
    baseline = image_from_csv(args.baseline)
    digest = csv_metadata(args.image).get("digest", "")
    if args.mode == "time_shift":
        verdict = detect_time_shift(image, baseline, k=args.k,
                                    coherence_ns=args.coherence_ns,
                                    config_digest=digest)
    else:
        predicted = (image_from_csv(args.predicted) if args.predicted
                     else baseline)
        diff = differential_image(predicted, image)
        verdict = detect_blinding(diff, baseline, k=args.k,
                                  shape_gate=args.shape_gate,
                                  config_digest=digest)
    print(json.dumps(verdict.as_dict(), indent=2, sort_keys=True))
    return EXIT_ATTACKED if verdict.attacked else EXIT_CLEAN


def cmd_presets() -> int:
    for name, text in presets.describe().items():
        print(f"{name:18s} {text}")
    return EXIT_CLEAN


def cmd_validate(args) -> int:
    user: dict = {}
    if args.preset:
        user = config_mod.deep_merge(user, presets.overrides(args.preset))
    loaded = _merged_overrides(args)
    if loaded:
        user = config_mod.deep_merge(user, loaded)
    if args.seed is not None:
        user["master_seed"] = args.seed
    if args.rounds is not None:
        user.setdefault("protocol", {})["n_rounds"] = args.rounds
    _, digest = config_mod.finalize(user)
    print(f"ok (digest {digest[:16]})")
    return EXIT_CLEAN


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "detect":
            return cmd_detect(args)
        if args.command == "presets":
            return cmd_presets()
        return cmd_validate(args)
    except (TgimonError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
