"""Command line entry point: ``tubeamp <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..design import save_design
from .artifacts import emit_artifacts
from .runner import RunFailed, RunLog, replay, run_closed_loop
from .scenario import build_setup, load_scenario
from .studies import DEFAULT_GAMMAS, VARIANTS, beta_vs_convergence, convergence_mc, gamma_sweep

DEFAULT_CONFIG = {
    "design": "bundled:second_order", "run": "bundled:second_order",
    "sweep-gamma": "bundled:second_order", "mc-converge": "bundled:convergence",
    "beta-study": "bundled:third_order", "replay": "bundled:second_order",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="scenario file, or bundled:<name>")
    p.add_argument("--seed", type=int, help="master seed (overrides the scenario)")
    p.add_argument("--out", help="output directory (overrides the scenario)")
    p.add_argument("--ensemble", type=int, help="ensemble size (overrides the scenario)")
    p.add_argument("--full-scale", action="store_true",
                   help="use the full-size ensemble from the scenario's study block")
    p.add_argument("--workers", type=int, help="worker processes (also capped by TUBEAMP_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tubeamp", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("design", help="offline synthesis of T, K and the tube coefficients")
    _common(p)
    p = sub.add_parser("run", help="single closed loop")
    _common(p)
    p.add_argument("--ic", type=int, default=0, help="index into the initial conditions")
    p.add_argument("--all", action="store_true", help="run every initial condition")
    p = sub.add_parser("sweep-gamma", help="weighting sweep with shared disturbance tapes")
    _common(p)
    p.add_argument("--gammas", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    p.add_argument("--long-steps", type=int, default=None,
                   help="run the largest weight this many steps as well")
    p = sub.add_parser("mc-converge", help="identification Monte Carlo")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, default="fixed")
    p.add_argument("--steps", type=int, default=None)
    p = sub.add_parser("beta-study", help="excitation against set size on random systems")
    _common(p)
    p.add_argument("--excitation", choices=("feedback", "zero"), default=None)
    p = sub.add_parser("replay", help="re-run a logged closed loop and compare bit for bit")
    _common(p)
    p.add_argument("--log", required=True, help="runlog.json written by 'run'")
    return ap


def _load(args):
    cfg = load_scenario(args.config or DEFAULT_CONFIG[args.command])
    study = dict(cfg.study)
    if args.full_scale:
        study.update(study.pop("full_scale", {}))
    else:
        study.pop("full_scale", None)
    return cfg.with_overrides(seed=args.seed, out=args.out, ensemble=args.ensemble, study=study)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load(args)
    out = Path(cfg.out)
    cmd = args.command
    if cmd == "design":
        setup = build_setup(cfg)
        out.mkdir(parents=True, exist_ok=True)
        save_design(setup.design, out / "design.json")
        print(out / "design.json")
        return 0
    if cmd == "run":
        ics = range(len(cfg.initial_conditions)) if args.all else [args.ic]
        setup = build_setup(cfg)
        logs = []
        for e in range(cfg.ensemble if args.ensemble else 1):
            for ic in ics:
                dest = out / f"ic{ic}_seed{cfg.seed + e}"
                try:
                    lg = run_closed_loop(cfg, ic, cfg.seed + e, setup, out=dest)
                except RunFailed as exc:
                    print(f"run failed: {exc}", file=sys.stderr)
                    return 1
                emit_artifacts(lg, dest)
                logs.append(lg)
                _print({"ic": ic, "seed": cfg.seed + e, "dir": str(dest), **lg.meta["summary"]})
        return 0
    if cmd == "sweep-gamma":
        res = gamma_sweep(cfg, args.gammas, long_steps=args.long_steps, workers=args.workers)
        emit_artifacts(res, out)
        _print({"table": res.table(), "shared_tapes": res.shared_tapes(),
                "vol_long_median": None if res.vol_long is None else
                float(sorted(res.vol_long)[len(res.vol_long) // 2])})
        return 0
    if cmd == "mc-converge":
        res = convergence_mc(cfg, args.variant, steps=args.steps, workers=args.workers)
        emit_artifacts(res, out)
        _print({"variant": res.variant, "runs": len(res.runs),
                "fraction_diameter_le_eps": res.fraction_below(res.epsilon),
                "containment_fraction": res.containment_fraction(),
                "inexact_fraction": res.inexact_fraction(),
                "flagged_runs": res.flagged_runs()})
        return 0
    if cmd == "beta-study":
        res = beta_vs_convergence(cfg, excitation=args.excitation, workers=args.workers)
        emit_artifacts(res, out)
        _print({"samples": len(res.rows), "spearman_volume": res.spearman_volume,
                "spearman_side": res.spearman_side})
        return 0
    if cmd == "replay":
        log = RunLog.load(args.log)
        try:
            res = replay(cfg, log)
        except ValueError as exc:
            print(f"replay refused: {exc}", file=sys.stderr)
            return 2
        _print({"identical": res.identical, "mismatches": [str(m) for m in res.mismatches[:10]]})
        return 0 if res.identical else 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
