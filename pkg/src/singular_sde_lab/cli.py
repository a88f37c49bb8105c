"""Command-line front end: ``singular-sde-lab <subcommand> [options]``.

Every experiment subcommand accepts ``--config FILE`` (INI format, see
:mod:`singular_sde_lab.config`), one flag per config key and repeated
``--set section.key=value``; flags win over the file.  Exit status is 0
when the run produced no acceptance-relevant warning, 1 when it did and 2
for invalid configuration.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from .config import EXPERIMENTS, SCHEMA, ConfigError, ConfigIssue, parse_config
from .suite import CHECKS, SCALES

_SKIP = {("experiment", "name"), ("experiment", "output")}
_DRIFT_ALIASES = {"inverse_square": "inverse-square", "bounded_smooth": "bounded-smooth"}


def _flag_names():
    """Map ``--flag`` -> "section.key"; keys present in two sections get a section prefix."""
    seen = {}
    for sec, keys in SCHEMA.items():
        for key in keys:
            seen.setdefault(key, []).append(sec)
    out = {}
    for sec, keys in SCHEMA.items():
        for key in keys:
            if (sec, key) in _SKIP:
                continue
            flag = key if len(seen[key]) == 1 else f"{sec}-{key}"
            out[flag] = f"{sec}.{key}"
    return out


FLAGS = _flag_names()


def parse_drift_spec(text):
    """``inverse-square:d=3:delta=1`` -> {"drift.kind": ..., "drift.d": ..., ...}."""
    kind, *parts = text.split(":")
    out = {"drift.kind": _DRIFT_ALIASES.get(kind, kind)}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"drift option {part!r} is not key=value")
        out[f"drift.{key.strip()}"] = value.strip()
    return out


def _add_common(p):
    p.add_argument("--out", help="output directory (default: experiment.output, or ./out)")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker threads for Monte Carlo ensembles (fallback: $SSL_LAB_JOBS)")


def build_parser():
    parser = argparse.ArgumentParser(prog="singular-sde-lab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for exp in EXPERIMENTS:
        p = sub.add_parser(exp, help=f"run the {exp} experiment")
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--drift", type=parse_drift_spec, metavar="KIND[:key=value...]",
                       help="drift spec, e.g. inverse-square:d=3:delta=1")
        for flag, dotted in FLAGS.items():
            if dotted == "drift.kind":
                continue
            p.add_argument(f"--{flag}", dest=f"cfg:{dotted}", metavar="VALUE")
        if exp == "energy":
            p.add_argument("--explain", action="store_true",
                           help="print the term-by-term breakdown of every energy report")
        _add_common(p)
    p = sub.add_parser("suite", help="run the acceptance checks")
    p.add_argument("--scale", choices=SCALES, default="full")
    p.add_argument("--criterion", type=int, action="append", choices=sorted(CHECKS),
                   help="run only this criterion (repeatable)")
    _add_common(p)
    return parser


def collect_overrides(args):
    over = {}
    if getattr(args, "drift", None):
        over.update(args.drift)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([ConfigIssue("<cli>", f"--set {item!r}: expected SECTION.KEY=VALUE")])
        over[key.strip()] = value.strip()
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            over[name[4:]] = value
    return over


def main(argv=None):
    args = build_parser().parse_args(argv)
    jobs = args.jobs
    if jobs is None and os.environ.get("SSL_LAB_JOBS"):
        jobs = int(os.environ["SSL_LAB_JOBS"])
    from . import runner

    if args.command == "suite":
        manifest, _ = runner.run_suite(args.out or "out/suite", args.scale, args.criterion, jobs)
        print(f"manifest {manifest.config_hash}: {len(manifest.warnings)} warning(s), "
              f"{manifest.wall_time:.1f} s")
        return manifest.exit_code

    text = ""
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    try:
        over = collect_overrides(args)
        over["experiment.name"] = args.command
        cfg = parse_config(text, over)
    except ConfigError as exc:
        for issue in exc.issues:
            print(f"config error: {issue}", file=sys.stderr)
        return 2
    manifest = runner.run(cfg, out_dir=args.out, jobs=jobs,
                          explain=getattr(args, "explain", False))
    print(f"manifest {manifest.config_hash}: wrote {', '.join(manifest.files)} "
          f"({manifest.wall_time:.1f} s, {len(manifest.warnings)} warning(s))")
    return manifest.exit_code


if __name__ == "__main__":
    sys.exit(main())
