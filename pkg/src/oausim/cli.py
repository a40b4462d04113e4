"""Command line entry point: ``oausim {acquire,stress,characterize,budget}``.

Outputs land in the run directory as ``report.json``, ``frames/``, ``csv/``
and ``images/``. Exit codes: 0 success, 2 configuration, 10 front end,
11 link, 12 acquisition, 13 transport, 14 analysis, 15 output, 1 other.
"""

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig
from .pipeline import StageError, run

EXIT_CODES = dict(config=2, afe=10, link=11, acquisition=12, transport=13, analysis=14, output=15)


def build_parser():
    p = argparse.ArgumentParser(prog="oausim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="TOML run configuration")
        sp.add_argument("-o", "--output", help="run directory (default from config, else ./run)")
        sp.add_argument("--seed", type=int, help="random seed for every stage")
        sp.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. trigger.delay=80")

    a = sub.add_parser("acquire", help="end-to-end acquisition (pulse-echo or optoacoustic)")
    common(a)
    a.add_argument("--mode", choices=("us", "oa"), default=None, help="pulse-echo (us, default) or optoacoustic (oa)")
    a.add_argument("--frames", type=int, help="number of triggers / frames (default 1)")
    a.add_argument("--batch", type=int, help="WRITEs per posted batch (default 8)")
    a.add_argument("--delay", type=int, help="trigger delay in sample clocks (default 60)")
    a.add_argument("--window", type=int, help="samples per channel per frame (default 3072)")

    s = sub.add_parser("stress", help="transport throughput over payload x batch")
    common(s)
    s.add_argument("--repeats", type=int, help="runs per grid point (default 10)")

    ch = sub.add_parser("characterize", help="swept-sine gain, -3 dB corners and SNR")
    common(ch)
    ch.add_argument("--step", type=float, help="tone step in Hz (default 0.2 MHz)")

    b = sub.add_parser("budget", help="leaky-bucket frame length / frame rate table")
    common(b)
    return p


def _overrides(args):
    sets = list(args.set)
    if args.output:
        sets.append(f"output={json.dumps(args.output)}")
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    flag_keys = dict(frames="trigger.frames", batch="transport.batch", delay="trigger.delay", window="trigger.window", repeats="stress.repeats", step="characterize.step")
    for name, key in flag_keys.items():
        v = getattr(args, name, None)
        if v is not None:
            sets.append(f"{key}={v}")
    return sets


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    mode = {"stress": "stress", "characterize": "characterize", "budget": "budget"}.get(args.command)
    if args.command == "acquire":
        mode = "acquire_oa" if args.mode == "oa" else ("acquire_us" if args.mode == "us" else None)
    try:
        cfg = RunConfig.load(args.config, _overrides(args), mode=mode)
        if args.command == "acquire" and not cfg.mode.startswith("acquire"):
            cfg.mode = "acquire_us"
            cfg.validate()
    except (ConfigError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        report = run(cfg)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.stage, 1)
    except OSError as e:
        print(f"output error: {e}", file=sys.stderr)
        return EXIT_CODES["output"]
    print(json.dumps(_summary(report), sort_keys=True))
    return 0


def _summary(report):
    keep = ("mode", "frames", "rdma", "f_lo", "f_hi", "reference", "reference_2000", "monotone_in_payload", "monotone_in_batch", "rows")
    out = {k: report[k] for k in keep if k in report}
    if "frames" in out:
        out["frames"] = [dict(frame_id=f["frame_id"], match_afe=f["match_afe"], brightest_depth_mm=f["brightest_depth_mm"]) for f in out["frames"]]
    return out


if __name__ == "__main__":
    sys.exit(main())
