"""Command-line entry point: ``efzo-run``.

Examples::

    efzo-run --scenario tracking --compressor qsgd1b-ef --compressor sgdm --runs 10 --out results/
    efzo-run --scenario tracking --sweep lambda=0,1,5,10 --runs 20
    efzo-run --scenario tracking --sweep n_agents=5,10,15,20,25 --sweep eta=0.5,0.71,0.87,1,1.12
    efzo-run --config experiment.json --runs 3

Flags override the matching config-file fields.  On failure a single JSON
line ``{"error": ..., "message": ...}`` goes to stderr and the exit code is
non-zero (2 for bad input, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigurationError, InputError
from .harness import SCENARIOS, ExperimentConfig, Sweep, converged, load_config, run_experiment

EXIT_USAGE = 2
EXIT_RUNTIME = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, EXIT_USAGE)


def _fail(kind: str, message: str, code: int):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(code)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efzo-run", description="Run seeded tracking, coverage or synthetic-stream experiments.")
    p.add_argument("--config", help="JSON experiment file; flags override its fields")
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--compressor", action="append", dest="methods", metavar="METHOD",
                   help="method name (e.g. qsgd1b-ef, sgdm) or compressor string (e.g. topk:0.5, qsgd:2/noef); repeatable")
    p.add_argument("--runs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--n-agents", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--normalize", choices=("none", "global", "per-agent"))
    p.add_argument("--seed", type=int, help="base seed; run r uses seed + r")
    p.add_argument("--sweep", action="append", default=[], metavar="NAME=V1,V2,...",
                   help="swept parameter; several --sweep flags are zipped")
    p.add_argument("--out", help="output directory for CSV files")
    p.add_argument("--workers", type=int, help="worker processes (results do not depend on this)")
    return p


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = load_config(args.config).to_dict() if args.config else {}
    data = dict(base)
    if args.scenario:
        data["scenario"] = args.scenario
    if args.methods:
        data["methods"] = args.methods
    if args.runs is not None:
        data["runs"] = args.runs
    if args.seed is not None:
        data["base_seed"] = args.seed
    if args.out:
        data["output"] = args.out
    if args.workers is not None:
        data["workers"] = args.workers
    params = dict(data.get("params", {}))
    for key, value in (("steps", args.steps), ("lambda", args.lam), ("n_agents", args.n_agents),
                       ("eta", args.eta), ("mu", args.mu), ("normalize", args.normalize)):
        if value is not None:
            params[key] = value
    data["params"] = params
    if args.sweep:
        data["sweep"] = [Sweep.parse(s) for s in args.sweep]
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        results = run_experiment(cfg)
    except (ConfigurationError, InputError) as exc:
        _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    except OSError as exc:
        _fail("OSError", str(exc), EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)

    print(f"{'label':<40} {'runs':>5} {'div':>4} {'conv':>5} {'final_error':>12} {'collisions':>11}")
    for res in results:
        m = res.summary.mean
        n_conv = sum(converged(s.tracking_error) for s in res.series if not s.diverged)
        print(f"{res.label:<40} {res.summary.runs:>5} {res.summary.diverged:>4} {n_conv:>5} "
              f"{m['tracking_error'][-1]:>12.4g} {m['cumulative_collisions'][-1]:>11.4g}")
    if cfg.output:
        print(f"wrote {cfg.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
