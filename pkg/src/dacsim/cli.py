"""Command line entry point: ``dacsim run`` and ``dacsim compare``.

Each run directory holds ``run.csv``, ``observability.csv``, ``metrics.kv``,
``config.resolved`` and, with ``--emit-plots``, ``plots/*.svg``.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .scenario import ConfigError, SimulationAbort, load_scenario, run, write_resolved

log = logging.getLogger("dacsim")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def _scenario(args):
    sc = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = int(args.seed)
    if args.duration is not None:
        if args.duration <= 0:
            raise ConfigError("duration: must be positive")
        changes["duration"] = float(args.duration)
    if changes:
        resolved = copy.deepcopy(sc.resolved)
        resolved.update(changes)
        sc = sc.with_overrides(resolved=resolved, **changes)
    return sc


def _dump_abort(exc, out):
    out.mkdir(parents=True, exist_ok=True)
    if exc.dump is not None:
        path = out / "abort_dump.csv"
        header = ",".join(exc.columns) if exc.columns is not None else ""
        np.savetxt(path, exc.dump, delimiter=",", header=header, comments="")
        log.error("last %d rows written to %s", len(exc.dump), path)


def _write_run(record, sc, out, emit_plots):
    out.mkdir(parents=True, exist_ok=True)
    record.write_csv(out / "run.csv")
    record.write_observability_csv(out / "observability.csv")
    metrics.write_kv(metrics.summarize(record), out / "metrics.kv")
    write_resolved(sc, out)
    if emit_plots:
        from .plots import emit_plots as _emit

        _emit(record, out / "plots")


def cmd_run(args):
    sc = _scenario(args)
    out = Path(args.out)
    try:
        record = run(sc, args.mode)
    except SimulationAbort as exc:
        log.error("run aborted: %s", exc)
        _dump_abort(exc, out)
        return EXIT_ABORT
    _write_run(record, sc, out, args.emit_plots)
    return EXIT_OK


def cmd_compare(args):
    sc = _scenario(args)
    out = Path(args.out)
    records = {}
    for mode in ("mbc", "dac"):
        try:
            records[mode] = run(sc, mode)
        except SimulationAbort as exc:
            log.error("%s run aborted: %s", mode, exc)
            _dump_abort(exc, out / mode)
            return EXIT_ABORT
        _write_run(records[mode], sc, out / mode, args.emit_plots)
    metrics.write_kv(metrics.compare(records["mbc"], records["dac"]), out / "compare.kv")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dacsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="single closed-loop run")
    p.add_argument("--scenario", required=True, help="JSON file or bundled scenario name")
    p.add_argument("--mode", choices=("mbc", "dac"), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--emit-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="paired mbc and dac runs")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--emit-plots", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
