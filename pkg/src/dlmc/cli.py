"""Command-line entry point.

Subcommands:

* ``run`` — execute one experiment config; exit 0 on convergence, 2 when the
  iteration budget ran out, 1 on error.
* ``compare`` — merge several finished runs' summaries into one table.
* ``oracle`` — precompute and store the reference moments a config implies.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DlmcError
from .harness import (
    build_target,
    load_config,
    reference_to_dict,
    resolve_reference,
    run_experiment,
)

log = logging.getLogger(__name__)

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_MAX_ITERATIONS = 2


def _apply_overrides(args, overrides: dict) -> dict:
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.cost_per_call_seconds is not None:
        overrides["cost_per_likelihood_call"] = args.cost_per_call_seconds
    if args.max_iterations is not None:
        overrides["max_iterations"] = args.max_iterations
    return overrides


def _load_with_overrides(args):
    from .harness import resolve_config

    with open(args.config) as fh:
        raw = json.load(fh)
    return resolve_config(_apply_overrides(args, raw))


def cmd_run(args) -> int:
    cfg = _load_with_overrides(args)
    artifacts = run_experiment(cfg)
    summary = artifacts.summary
    b2 = summary.get("b2_mean")
    print(
        f"{summary['method']} on {summary['target']}: "
        f"converged={summary['converged']} iterations={summary['iterations']} "
        f"likelihood_calls={summary['likelihood_calls']}"
        + (f" b2={b2:.3e}" if b2 is not None else "")
    )
    print(f"artifacts in {artifacts.output_dir}")
    return EXIT_CONVERGED if summary["converged"] else EXIT_MAX_ITERATIONS


def cmd_compare(args) -> int:
    columns = [
        "method",
        "target",
        "seed",
        "converged",
        "iterations",
        "likelihood_calls",
        "b2_mean",
        "b2_max",
        "parallel_seconds",
        "sequential_seconds",
    ]
    rows = []
    for run_dir in args.runs:
        path = Path(run_dir)
        summary_file = path / "summary.json" if path.is_dir() else path
        with open(summary_file) as fh:
            summary = json.load(fh)
        rows.append([summary.get(c, "") for c in columns])
    widths = [
        max(len(str(col)), *(len(_fmt(r[i])) for r in rows)) if rows else len(col)
        for i, col in enumerate(columns)
    ]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)))
    return EXIT_CONVERGED


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def cmd_oracle(args) -> int:
    cfg = _load_with_overrides(args)
    target = build_target(cfg)
    reference = resolve_reference(cfg, target)
    if reference is None:
        print("config requests no reference moments")
        return EXIT_ERROR
    out = Path(args.store) if args.store else cfg.output_dir / "reference_moments.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump(reference_to_dict(reference), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{reference.provenance} reference for {cfg['target']} stored in {out}")
    return EXIT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlmc",
        description="particle sampler benchmark harness",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="worker count for particle blocks")
    common.add_argument("--output-dir", help="override the config output directory")
    common.add_argument(
        "--cost-per-call-seconds",
        type=float,
        help="simulated seconds per likelihood call",
    )
    common.add_argument("--max-iterations", type=int)

    p_run = sub.add_parser("run", parents=[common], help="execute one experiment")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="merge run summaries into a table")
    p_cmp.add_argument("runs", nargs="+", help="run directories or summary files")
    p_cmp.set_defaults(func=cmd_compare)

    p_oracle = sub.add_parser(
        "oracle", parents=[common], help="precompute reference moments"
    )
    p_oracle.add_argument("--store", help="where to write the reference JSON")
    p_oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DlmcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
