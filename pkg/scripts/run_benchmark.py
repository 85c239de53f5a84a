#!/usr/bin/env python3
"""Run a paired accuracy benchmark: deterministic Laplace fits vs long MCMC chains.

Simulates count datasets (Poisson/log-normal or BYM spatial), fits each with the
nested-Laplace engine and with the adaptive Metropolis-within-Gibbs sampler, and
reports percent-error agreement between the two posteriors plus percent-change
against the generating values.

Example:
    python scripts/run_benchmark.py --kind poisson --scale desk --seed 7 \
        --workers 4 --out results/poisson_desk
"""
from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lgmbench import harness


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--kind", choices=("poisson", "bym"), default="poisson")
    parser.add_argument("--scale", choices=harness.SCALES, default="desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--datasets", type=int, default=None,
                        help="override the number of simulated datasets")
    parser.add_argument("--out", type=Path, default=None,
                        help="directory for CSV tables and report.json")
    args = parser.parse_args()

    overrides = {"workers": args.workers}
    if args.datasets is not None:
        overrides["n_datasets"] = args.datasets
    config = harness.study_config(args.kind, scale=args.scale, seed=args.seed,
                                  **overrides)

    t0 = time.perf_counter()
    report = harness.run_study(config)
    elapsed = time.perf_counter() - t0

    results = report.table("results")
    pe_rows = report.table("pe_long").rows
    failures = report.table("failures").rows
    print(f"{args.kind} study, scale={args.scale}, "
          f"{len(results.rows)} fitted datasets in {elapsed:.1f}s")
    by_param: dict[str, list[float]] = {}
    for row in pe_rows:
        by_param.setdefault(str(row["parameter"]), []).append(abs(float(row["pe"])))
    for param, values in sorted(by_param.items()):
        print(f"  median |PE| {param:<16} {statistics.median(values):8.2f}%"
              f"   (max {max(values):.2f}%)")
    verdicts = [str(row["mcmc_verdict"]) for row in results.rows]
    print("  MCMC verdicts:",
          {v: verdicts.count(v) for v in sorted(set(verdicts))})
    if failures:
        print(f"  WARNING: {len(failures)} failed fits")

    if args.out is not None:
        written = harness.emit_report(report, args.out)
        print(f"  wrote {len(written)} files to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
