#!/usr/bin/env python3
"""Verify byte-identical reproducibility of a study configuration.

Re-runs the study several times at different worker counts and compares every
emitted CSV/JSON artifact byte for byte. Exits nonzero and prints the first
differing file/line if any run diverges.

Example:
    python scripts/run_audit.py --kind poisson --seed 0 --datasets 4
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
    parser.add_argument("--kind", choices=harness.STUDY_KINDS, default="poisson")
    parser.add_argument("--scale", choices=harness.SCALES, default="desk")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--datasets", type=int, default=4)
    parser.add_argument("--workers", type=int, nargs="+", default=(1, 4),
                        help="worker counts to cross-check")
    parser.add_argument("--repeats", type=int, default=2,
                        help="repeated runs per worker count")
    parser.add_argument("--iterations", type=int, default=2_000,
                        help="MCMC iterations per chain for the audit runs")
    args = parser.parse_args()

    config = harness.study_config(
        args.kind, scale=args.scale, seed=args.seed,
        n_datasets=args.datasets,
        mcmc_iterations=args.iterations,
        mcmc_burn_in=args.iterations // 4,
        mcmc_thin=max(1, args.iterations // 1_000),
    )

    t0 = time.perf_counter()
    audit = harness.reproducibility_audit(
        config, worker_counts=tuple(args.workers), repeats=args.repeats)
    elapsed = time.perf_counter() - t0

    status = "PASS" if audit.passed else "FAIL"
    print(f"audit {status}: {len(audit.runs)} runs of {args.kind}/"
          f"{args.datasets} datasets in {elapsed:.1f}s")
    if not audit.passed and audit.first_diff is not None:
        diff = audit.first_diff
        print(f"  first difference in {diff['file']} line {diff['line']}"
              f" ({diff['run_a']} vs {diff['run_b']}):")
        print(f"    {diff['content_a']!r}")
        print(f"    {diff['content_b']!r}")
    return 0 if audit.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
