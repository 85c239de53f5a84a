#!/usr/bin/env python3
"""Run the WAIC model-selection experiment.

Simulates datasets from a known family (Poisson/log-normal or BYM spatial),
fits both candidate models with each inference engine, and tabulates how often
WAIC picks the generating family, per engine.

Example:
    python scripts/run_selection.py --family bym --scale desk --seed 3 \
        --workers 4 --out results/selection_bym
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from lgmbench import harness


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--family", choices=("poisson", "bym"), default="poisson",
                        help="generating family the selector should recover")
    parser.add_argument("--scale", choices=harness.SCALES, default="desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--datasets", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()

    overrides = {"workers": args.workers, "selection_family": args.family}
    if args.datasets is not None:
        overrides["n_datasets"] = args.datasets
    config = harness.study_config("selection", scale=args.scale, seed=args.seed,
                                  **overrides)

    t0 = time.perf_counter()
    report = harness.run_study(config)
    elapsed = time.perf_counter() - t0

    rows = report.table("selection").rows
    print(f"selection study (generating={args.family}, scale={args.scale}) "
          f"in {elapsed:.1f}s")
    for engine in ("laplace", "mcmc"):
        picks = [str(r["selected"]) for r in rows if r["engine"] == engine]
        if not picks:
            continue
        correct = sum(p == args.family for p in picks)
        print(f"  {engine:<8} picked generating family "
              f"{correct}/{len(picks)} times "
              f"({100.0 * correct / len(picks):.0f}%)")
    failures = report.table("failures").rows
    if failures:
        print(f"  WARNING: {len(failures)} failed fits")

    if args.out is not None:
        written = harness.emit_report(report, args.out)
        print(f"  wrote {len(written)} files to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
