"""Command line front end.

Exit codes: 0 success, 2 configuration error, 3 infeasibility abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ExperimentConfig, preset
from .coordinator import Mode, run_lloyd_periodic, run_mpc
from .errors import BudgetDomain, ConfigError, CoverageError, PlannerInfeasible, TrackerInfeasible
from .planner import coupling_budget
from .tracker import finite_update_bounds, n_star

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3

_DEFAULT_PRESET = {
    "lloyd": "lloyd_desk",
    "run-periodic": "periodic_desk",
    "run-nonperiodic": "nonperiodic_desk",
    "bounds": "nonperiodic_waypoints_K30",
    "validate-config": "periodic_circle",
}
_MODE = {"lloyd": Mode.LLOYD_PERIODIC, "run-periodic": Mode.PERIODIC_MPC, "run-nonperiodic": Mode.NONPERIODIC_MPC}


def load_config(spec: str) -> ExperimentConfig:
    """A preset name or a path to a ``.toml`` / ``.json`` file."""
    if spec in PRESETS:
        return preset(spec)
    return ExperimentConfig.load(spec)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covmpc", description="Coverage control with tracking MPC.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in _DEFAULT_PRESET:
        s = sub.add_parser(name)
        s.add_argument("--config", default=_DEFAULT_PRESET[name], help=f"preset ({', '.join(PRESETS)}) or config file")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None, help="output directory")
        s.add_argument("--steps", type=int, default=None)
        s.add_argument("--no-plots", action="store_true")
    return p


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    if args.out is not None:
        cfg.out = args.out
    if args.no_plots:
        cfg.plots = False
    return cfg


def _bounds(cfg: ExperimentConfig) -> dict:
    model = cfg.model.build()
    consts = cfg.constants(model)
    V_eps, tau = finite_update_bounds(consts, cfg.eps, float(np.linalg.norm(model.C, 2)))
    t = cfg.tracker
    table = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        V = frac * t.V_max
        table.append((V, coupling_budget(V, t.V_max, t.L_V, consts.decay, cfg.K).value))
    return dict(
        n_star=n_star(consts),
        N=cfg.N,
        lipschitz_f=model.lipschitz_f,
        decay=consts.decay,
        V_eps=V_eps,
        tau=tau,
        budget=table,
    )


def _print_bounds(b: dict, cfg: ExperimentConfig):
    t = cfg.tracker
    print(f"n_star = {b['n_star']}  (N = {b['N']}, L_f = {b['lipschitz_f']:.6g}, lambda = {b['decay']:.6g})")
    print(f"V_eps = {b['V_eps']:.6g}  tau = {b['tau']}")
    print(f"coupling budget  (V_max = {t.V_max:g}, L_V = {t.L_V:g}, K = {cfg.K})")
    print(f"{'V':>12}  {'C(V)':>12}")
    for V, c in b["budget"]:
        print(f"{V:12.6g}  {c:12.5f}")


def _run(cfg: ExperimentConfig, command: str) -> int:
    cfg.mode = _MODE[command].value
    fleet = cfg.fleet()
    out = Path(cfg.out)
    if command == "lloyd":
        log = run_lloyd_periodic(fleet)
    else:
        log = run_mpc(fleet, steps=cfg.steps)
    log.write(out)
    if cfg.plots and len(log):
        from .plots import emit_plots

        emit_plots(log, out, cfg.T, fleet.arena)
    summary = log.summary()
    summary.pop("config", None)
    print(json.dumps(summary, sort_keys=True))
    if log.aborted:
        print(f"aborted: {log.aborted}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "validate-config":
            cfg.validate()
            cfg.fleet()
            print(f"{cfg.name}: ok")
            return EXIT_OK
        if args.command == "bounds":
            cfg.validate()
            _print_bounds(_bounds(cfg), cfg)
            return EXIT_OK
        return _run(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrackerInfeasible, PlannerInfeasible, BudgetDomain) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CoverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
