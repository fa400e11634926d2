"""Command line entry point: ``regcl run | eval | synth``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .data import FeatureFilter, apply_filter, load_sparse_text, write_sparse_text
from .errors import ConfigurationError, RegclError
from .harness import build_stream, run
from .metrics import DIL_CLASSES, flip_rates
from .nn import ModelSnapshot, predict
from .synth import materialize

log = logging.getLogger("regcl")


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def cmd_run(args):
    overrides = {}
    if args.seeds:
        overrides["run.seeds"] = args.seeds
    if args.out:
        overrides["run.out"] = args.out
    if args.keep_all:
        overrides["run.keep_all"] = True
    config = parse_config(args.config, overrides)
    manifest = run(config)
    print(f"config digest {config.digest}")
    print(f"report: {manifest.reports['summary']}")
    for s in manifest.failed:
        print(f"seed {s.seed} failed: {s.error}", file=sys.stderr)
    if manifest.failed:
        return manifest.failed[0].exit_code
    return 0


def cmd_eval(args):
    old = ModelSnapshot.load(args.old)
    new = ModelSnapshot.load(args.new)
    if old.shape != new.shape:
        raise ConfigurationError(f"snapshot shapes differ: {old.shape} vs {new.shape}")
    if args.filter:
        filt = FeatureFilter.load(args.filter)
        test = load_sparse_text(args.test, class_count=new.output_dim)
        test = apply_filter(filt, test)
        if test.feature_dim != new.input_dim:
            raise ConfigurationError(f"filter keeps {test.feature_dim} features, snapshot expects {new.input_dim}")
    else:
        test = load_sparse_text(args.test, feature_dim=new.input_dim, class_count=new.output_dim)
    cls = None if args.cls == "all" else DIL_CLASSES[args.cls]
    old_pred = predict(old, test)
    new_pred = predict(new, test)
    fr = flip_rates(old_pred, new_pred, test.labels, cls)
    fmt = lambda v: "absent" if v is None else f"{100 * v:.2f}%"
    print(f"class={args.cls} n={fr.n}")
    print(f"old accuracy={np.mean(old_pred == test.labels) * 100:.2f}% "
          f"new accuracy={np.mean(new_pred == test.labels) * 100:.2f}%")
    print(f"negative flips={fr.nf} NFR={fmt(fr.nfr)}")
    print(f"positive flips={fr.pf} PFR={fmt(fr.pfr)}")
    return 0


def cmd_synth(args):
    # same stream that `regcl run` trains on for this master seed (before feature filtering)
    overrides = {"scenario": args.scenario.upper(), "data.source": "synth"}
    config = parse_config(args.config, overrides)
    stream = build_stream(config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.scenario.lower()}.txt"
    data = materialize(stream.experiences)
    write_sparse_text(data, path, header=[f"synthetic {config.scenario} stream, master seed {args.seed}",
                                          f"feature_dim={data.feature_dim} classes={data.class_count}"])
    print(f"wrote {len(data)} samples to {path}")
    return 0


def build_parser():
    # argparse exits with 2 on usage errors, matching the configuration-error code
    p = argparse.ArgumentParser(prog="regcl", description="Continual learning with negative-flip measurement.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate a configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", type=_seeds)
    r.add_argument("--out")
    r.add_argument("--keep-all", action="store_true", help="keep every snapshot, not just the last two")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="flip audit between two snapshots")
    e.add_argument("--old", required=True)
    e.add_argument("--new", required=True)
    e.add_argument("--test", required=True, help="sparse text test set")
    e.add_argument("--class", dest="cls", choices=("mw", "gw", "all"), default="all")
    e.add_argument("--filter", help="feature filter file saved next to the snapshots")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic dataset as sparse text")
    s.add_argument("--scenario", required=True, type=str.lower, choices=("dil", "cil"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="master seed, as in run.seeds")
    s.add_argument("--config", help="optional config file for synth.* keys")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RegclError as exc:
        print(f"regcl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"regcl: numeric error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"regcl: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
