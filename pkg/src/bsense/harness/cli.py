"""Command-line entry point: ``bsense run | verify | scenarios``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from bsense.harness.config import CONTROLLERS, MODES, ExperimentConfig, load_config
from bsense.harness.scenarios import SCENARIO_NAMES


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.controller is not None:
        cfg = replace(cfg, controller=replace(cfg.controller, kind=args.controller))
    if args.mode is not None:
        cfg = replace(cfg, mode=args.mode)
    return cfg.validate()


def _cmd_run(args) -> int:
    from bsense.harness.experiment import run_experiment

    cfg = _apply_overrides(load_config(args.config) if args.config else ExperimentConfig(), args)
    result = run_experiment(cfg, args.out)
    final = result.final
    if final is not None:
        print(f"steps={len(result.records)} entropy={final.entropy:.6g} pcd={final.pcd} pug={final.pug} "
              f"max_boundary_energy={result.max_boundary_energy():.3e} threshold={result.energy_max_scaled:.3e}")
    if result.cycles:
        print(f"cycles={result.cycles} detached={result.detached}")
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return 1
    return 0


def _cmd_verify(args) -> int:
    from bsense.harness.verify import run_checks

    return 0 if run_checks(seed=args.seed or 0) else 1


def _cmd_scenarios(args) -> int:
    for name in SCENARIO_NAMES:
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsense", description="Boundary stiffness estimation and active sensing.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a YAML config")
    run.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--controller", choices=CONTROLLERS)
    run.add_argument("--mode", choices=MODES)
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="run the built-in invariant and oracle checks")
    ver.add_argument("--seed", type=int)
    ver.set_defaults(func=_cmd_verify)

    sc = sub.add_parser("scenarios", help="list attachment layouts")
    sc.set_defaults(func=_cmd_scenarios)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"bsense: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
