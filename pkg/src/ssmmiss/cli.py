"""Command-line harness: run the study, emit tables and plots, calibrate."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .missingness import Mechanism, calibrate_intercept, default_spec
from .rng import seed_sequence
from .ssm import make_condition
from .study import emit_tables, load_config, read_records, run_study


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmmiss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the Monte-Carlo grid")
    run_p.add_argument("--config", required=True, help="JSON config file (empty file = defaults)")
    run_p.add_argument("--cells", default=None, help="filter, e.g. 'alpha=0.7;mechanism=TMAR|MNAR'")
    run_p.add_argument("--reps", type=int, default=None, help="override replication count")
    run_p.add_argument("--resume", action="store_true", help="resume from the journal")
    run_p.add_argument("--progress", action="store_true", help="print per-item progress")

    tab_p = sub.add_parser("tables", help="emit CSV tables from saved records")
    tab_p.add_argument("--records", required=True, help="records file or study output directory")
    tab_p.add_argument("--out", default=None, help="output directory (default: records dir)")

    plot_p = sub.add_parser("plots", help="emit bias box plots from saved records")
    plot_p.add_argument("--records", required=True)
    plot_p.add_argument("--out", default=None)

    cal_p = sub.add_parser("calibrate", help="calibrate a missingness intercept")
    cal_p.add_argument("--mechanism", required=True, choices=[m.value for m in Mechanism if m != Mechanism.MCAR])
    cal_p.add_argument("--rate", type=float, required=True)
    cal_p.add_argument("--sigma2", type=float, default=0.25)
    cal_p.add_argument("--alpha", type=float, default=0.2)
    cal_p.add_argument("--gamma", type=float, default=0.0)
    cal_p.add_argument("--slope", type=float, default=None, help="override the default slope")
    cal_p.add_argument("--seed", type=int, default=1)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "run":
        config = load_config(args.config)
        if args.reps is not None:
            config = replace(config, replications=args.reps)
        records, summaries = run_study(
            config, cells=args.cells, resume=args.resume, progress=args.progress
        )
        emit_tables(records, config.output_dir)
        print(f"wrote {len(records)} records over {len(summaries)} cells to {config.output_dir}")
        return 0

    if args.command == "tables":
        records = read_records(args.records)
        out = args.out or args.records
        emit_tables(records, out)
        print(f"tables written to {out}")
        return 0

    if args.command == "plots":
        from .plots import emit_plots

        records = read_records(args.records)
        out = args.out or args.records
        written = emit_plots(records, out)
        print(f"{len(written)} figures written to {out}")
        return 0

    if args.command == "calibrate":
        mech = Mechanism(args.mechanism)
        params = make_condition(args.sigma2, args.alpha, args.gamma)
        slope = args.slope
        if slope is None:
            slope = default_spec(mech, args.rate).beta_slope
        seed = seed_sequence(args.seed, "calibrate", args.sigma2, args.alpha, args.gamma, mech.value, args.rate)
        beta0 = calibrate_intercept(mech, params, args.rate, slope, seed)
        print(
            f"{mech.value} rate={args.rate:g} slope={slope:g} "
            f"(sigma2={args.sigma2:g}, alpha={args.alpha:g}, gamma={args.gamma:g}): beta0={beta0:.6f}"
        )
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
