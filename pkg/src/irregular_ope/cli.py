"""Command-line entry point: truth, run, report, fit-renewal, validate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ContractError, DomainError, validate_trajectory
from .experiment import ExperimentConfig, report, run_experiment, run_truth
from .io import FormatError, read_trajectories
from .renewal import CovariateBuilder, fit_renewal

log = logging.getLogger("irregular_ope")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        overrides["output"] = args.out
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def cmd_truth(args) -> int:
    cfg = _load_config(args)
    truths = run_truth(cfg)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "truth.json").write_text(json.dumps(truths, indent=2, sort_keys=True))
    for mode, t in truths.items():
        print(f"{cfg.scenario} {mode}: {t['value']:.4f} (MC SE {t['mc_standard_error']:.4f}, N={t['N']})")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = run_experiment(cfg)
    print(f"results written to {out}")
    return 0


def cmd_report(args) -> int:
    out = report(args.summaries, args.out or ".")
    print(f"table written to {Path(out) / 'table.csv'}")
    return 0


def cmd_fit_renewal(args) -> int:
    ds = read_trajectories(args.data)
    fit = fit_renewal(ds, CovariateBuilder(args.scheme), tau_quantile=args.tau_quantile)
    print(json.dumps(fit.summary(), indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "renewal.json").write_text(json.dumps(fit.summary(), indent=2))
        fit.write_jump_table(out / "baseline.csv")
    return 0


def cmd_validate(args) -> int:
    ds = read_trajectories(args.data)
    problems = 0
    for i, tr in enumerate(ds.trajectories):
        issues = validate_trajectory(tr, ds.m)
        if issues:
            problems += 1
            for msg in issues:
                print(f"trajectory {i}: {msg}")
    print(f"{ds.n} trajectories, {ds.n_transitions} transitions, {problems} invalid")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irregular-ope",
                                description="Off-policy evaluation with irregularly spaced decision times.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def study(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--out", type=str)
        s.set_defaults(func=func)
        return s

    study("truth", cmd_truth, "Monte Carlo truth for the configured policy")
    study("run", cmd_run, "run a replicate study")

    r = sub.add_parser("report", help="merge summary.csv files into one table")
    r.add_argument("summaries", nargs="*", type=Path)
    r.add_argument("--out", type=str)
    r.set_defaults(func=cmd_report)

    f = sub.add_parser("fit-renewal", help="fit the gap-time model to a trajectory file")
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--scheme", default="scheme1", choices=["scheme1", "scheme2"])
    f.add_argument("--tau-quantile", type=float, default=1.0)
    f.add_argument("--out", type=str)
    f.set_defaults(func=cmd_fit_renewal)

    v = sub.add_parser("validate", help="check a trajectory file")
    v.add_argument("--data", type=Path, required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FormatError, ContractError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
