"""Command-line entry point: ``seqint test`` and ``seqint simulate``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure,
4 internal error.
"""

from __future__ import annotations

import argparse
import secrets
import sys
from datetime import datetime, timezone

from .calibration import stream
from .errors import DataError, MissingColumn, NumericalError
from .io import RunConfig, load_csv, make_document, mc_to_dict, resolve_config, sequence_to_dict, write_document
from .sequential import METHODS, run_sequence, run_sequence_exploratory
from .simgen import MethodRun, generate, mc_study

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _common(parser: argparse.ArgumentParser):
    add = parser.add_argument
    add("--config", metavar="PATH", help="YAML config file (flags override it)")
    add("--recipe", choices=("rct", "dr"))
    add("--method", choices=METHODS)
    add("--alpha", type=float, metavar="F")
    add("--steps", type=int, metavar="N", help="maximum number of steps")
    add("--B", type=int, metavar="N", help="bootstrap replicates per resample size")
    add("--d", type=float, metavar="F", help="geometric ratio of the m grid")
    add("--c", type=float, metavar="F", help="pre-test constant")
    add("--seed", type=int, metavar="U64")
    add("--entropy-seed", action="store_true", help="draw a fresh random seed and record it")
    add("--workers", type=int, metavar="N")
    add("--out", metavar="PATH")
    add("--format", choices=("json", "csv"))
    add("--timestamps", action="store_true", default=None, help="record start and end times in the report")
    add("--scenario", metavar="NAME", help="canonical scenario (N1, S1, S2, D1-null, D1, D2-null, D2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    test = sub.add_parser("test", help="run the sequential test on a dataset")
    _common(test)
    test.add_argument("--data", metavar="PATH", help="CSV file with a header row")
    test.add_argument("--outcome", metavar="NAME")
    test.add_argument("--treatment", metavar="NAME")
    test.add_argument("--propensity", metavar="NAME|none")
    test.add_argument("--covariates", metavar="A,B,...", help="covariate columns (default: all remaining)")
    test.add_argument("--drop-incomplete", action="store_true", default=None)
    test.add_argument("--fixed-steps", type=int, metavar="N", help="run exactly N steps, ignoring the stop rule")
    sim = sub.add_parser("simulate", help="Monte Carlo study on a simulated scenario")
    _common(sim)
    sim.add_argument("--reps", type=int, metavar="N")
    sim.add_argument("--methods", metavar="M1,M2,...", help="methods to compare (default: --method)")
    return parser


def _flags(args: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("mode", "config", "entropy_seed")}
    for key in ("covariates", "methods"):
        if flags.get(key):
            flags[key] = [v.strip() for v in flags[key].split(",") if v.strip()]
    if args.entropy_seed:
        flags["seed"] = secrets.randbits(63)
    return flags


def print_steps(result: dict, out=None):
    out = out or sys.stdout
    print(f"{'step':>4}  {'covariate':<14} {'coef':>10} {'m_hat':>6} {'r_hat':>5} {'p':>8}", file=out)
    for s in result["steps"]:
        cal = s["calibration"]
        print(f"{s['step']:>4}  {s['name']:<14} {s['coef']:>10.4f} {cal['m_hat']:>6} {cal['r_hat']:>5} "
              f"{cal['p_value']:>8.4f}", file=out)
    print(f"stop: {result['stop_reason']}", file=out)


def print_rates(result: dict, out=None):
    out = out or sys.stdout
    print(f"{'method':<8} {'step':>4} {'rate':>7} {'se':>7}", file=out)
    for m in result["methods"]:
        for s in m["steps"]:
            print(f"{m['label']:<8} {s['step']:>4} {s['rate']:>7.3f} {s['se']:>7.3f}", file=out)


def cmd_test(cfg: RunConfig) -> int:
    started = _now() if cfg.timestamps else None
    if cfg.data is not None:
        if cfg.recipe == "rct" and cfg.propensity is None:
            raise MissingColumn("the rct recipe needs a known propensity column; pass --propensity NAME "
                                "or use --recipe dr")
        propensity = cfg.propensity if cfg.recipe == "rct" else None
        dataset, dropped = load_csv(cfg.data, cfg.outcome, cfg.treatment, propensity, cfg.covariates,
                                    cfg.drop_incomplete)
        if dropped:
            print(f"dropped {dropped} incomplete rows", file=sys.stderr)
    else:
        dataset = generate(cfg.build_scenario(), stream(cfg.seed, 0, 0))
    seq = cfg.sequence_config()
    if cfg.fixed_steps is not None:
        result = run_sequence_exploratory(dataset, seq, cfg.fixed_steps)
    else:
        result = run_sequence(dataset, seq)
    body = sequence_to_dict(result)
    doc = make_document("sequence", body, cfg, started, _now() if started else None)
    write_document(doc, cfg.out, cfg.format)
    print_steps(body)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    started = _now() if cfg.timestamps else None
    scenario = cfg.build_scenario()
    methods = cfg.methods or [cfg.method]
    runs = [MethodRun(m, cfg.sequence_config(m, workers=1)) for m in methods]
    report = mc_study(scenario, runs, cfg.reps, seed=cfg.seed, workers=cfg.workers, max_steps=cfg.steps,
                      config=cfg.semantic_dict())
    body = mc_to_dict(report)
    doc = make_document("simulation", body, cfg, started, _now() if started else None)
    write_document(doc, cfg.out, cfg.format)
    print_rates(body)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.config, _flags(args), mode=args.mode)
        return cmd_test(cfg) if cfg.mode == "test" else cmd_simulate(cfg)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - reported, never swallowed silently
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
