"""Command-line entry point.

Subcommands:

* ``generate`` — materialize a study's synthetic datasets as CSV files
  (plus the adjacency edge list and the resolved config).
* ``run`` — paired engine study (poisson or bym kind) with report files.
* ``select`` — model-selection study over the two candidate models.
* ``zinb`` — zero-inflated negative binomial study with rate ratios.
* ``audit`` — reproducibility audit (two repeats x worker counts 1 and
  4, byte-compared); the process exits nonzero when the audit fails.
* ``report`` — regenerate the CSV tables from a saved report.json.

Studies are configured by a JSON file (see ``--config``); the
``--seed``, ``--workers``, and ``--scale`` flags override the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import harness


def _add_common(parser: argparse.ArgumentParser, default_kind: str | None) -> None:
    parser.add_argument("--config", help="JSON study config file")
    if default_kind is None:
        parser.add_argument("--kind", choices=harness.STUDY_KINDS, help="study kind")
    parser.add_argument("--scale", choices=harness.SCALES, default=None, help="preset sizes")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--workers", type=int, default=None, help="process pool size")
    parser.add_argument("--out", default="lgmbench_out", help="output directory")


def _resolve_config(args, default_kind: str | None) -> harness.StudyConfig:
    if args.config:
        config = harness.config_from_json(args.config)
        if getattr(args, "kind", None):
            config = replace(config, kind=args.kind)
    else:
        kind = getattr(args, "kind", None) or default_kind
        if kind is None:
            raise SystemExit("either --config or --kind is required")
        config = harness.study_config(kind, scale=args.scale or "desk", seed=args.seed or 0)
    if args.scale is not None and args.config:
        preset = harness.study_config(config.kind, scale=args.scale, seed=config.master_seed)
        config = replace(
            config,
            scale=args.scale,
            n_datasets=preset.n_datasets,
            n_areas=preset.n_areas,
            mcmc_iterations=preset.mcmc_iterations,
            mcmc_burn_in=preset.mcmc_burn_in,
            mcmc_thin=preset.mcmc_thin,
        )
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    return config


def _cmd_generate(args) -> int:
    config = _resolve_config(args, default_kind=None)
    written = harness.write_datasets(config, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def _run_and_emit(config: harness.StudyConfig, out_dir: str) -> int:
    report = harness.run_study(config)
    paths = harness.emit_report(report, out_dir)
    failures = report.table("failures").rows
    print(f"{config.kind} study: {config.n_datasets} datasets, {len(failures)} failures")
    for path in paths:
        print(f"  {path}")
    return 0


def _cmd_run(args) -> int:
    config = _resolve_config(args, default_kind="poisson")
    if config.kind not in ("poisson", "bym"):
        raise SystemExit("run covers the poisson and bym kinds; see select/zinb")
    return _run_and_emit(config, args.out)


def _cmd_select(args) -> int:
    config = _resolve_config(args, default_kind="selection")
    config = replace(config, kind="selection")
    return _run_and_emit(config, args.out)


def _cmd_zinb(args) -> int:
    config = _resolve_config(args, default_kind="zinb")
    config = replace(config, kind="zinb")
    return _run_and_emit(config, args.out)


def _cmd_audit(args) -> int:
    config = _resolve_config(args, default_kind="poisson")
    worker_counts = (1, args.workers) if args.workers else (1, 4)
    report = harness.reproducibility_audit(config, worker_counts=worker_counts)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "audit.json")
    report.to_json(path)
    if report.passed:
        print(f"audit PASS ({len(report.runs)} runs byte-identical); report at {path}")
        return 0
    diff = report.first_diff or {}
    print(
        "audit FAIL: first difference in "
        f"{diff.get('file')} line {diff.get('line')} ({diff.get('run_a')} vs {diff.get('run_b')}); "
        f"report at {path}"
    )
    return 1


def _cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    tables = [
        harness.Table(name, t["columns"], t["rows"]) for name, t in sorted(payload["tables"].items())
    ]
    report = harness.ComparisonReport(
        kind=payload["kind"],
        config=payload["config"],
        tables=tables,
        version=payload["version"],
        config_digest=payload["config_hash"],
    )
    paths = harness.emit_report(report, args.out)
    print(f"re-emitted {len(paths)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgmbench", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic datasets to CSV")
    _add_common(p, default_kind=None)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("run", help="paired engine study (poisson/bym)")
    _add_common(p, default_kind="poisson")
    p.add_argument("--kind", choices=("poisson", "bym"), default=None)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("select", help="model-selection study")
    _add_common(p, default_kind="selection")
    p.set_defaults(fn=_cmd_select)

    p = sub.add_parser("zinb", help="zero-inflated negative binomial study")
    _add_common(p, default_kind="zinb")
    p.set_defaults(fn=_cmd_zinb)

    p = sub.add_parser("audit", help="byte-level reproducibility audit")
    _add_common(p, default_kind="poisson")
    p.add_argument("--kind", choices=harness.STUDY_KINDS, default=None)
    p.set_defaults(fn=_cmd_audit)

    p = sub.add_parser("report", help="re-emit tables from report.json")
    p.add_argument("--report", required=True, help="path to report.json")
    p.add_argument("--out", default="lgmbench_out")
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
