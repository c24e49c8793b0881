"""Closed-loop simulation, run logs and bit-exact replay."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..mpc import Controller, tube_pe_coefficient
from ..estimator import ParamSet
from ..system import make_rng, step_truth
from .scenario import ScenarioConfig, Setup, build_setup

TIMING_FIELDS = ("assembly_s", "solve_s")
CONSTRAINT_TOL = 1e-7


@dataclass
class StepRow:
    t: int
    x: list
    u: list
    status: str
    assembly_s: float
    solve_s: float
    cost: float
    beta_star: float
    beta1: float
    vol_pct: float
    mu: list
    theta_bar: list
    alpha1: list
    degraded: bool
    verified: bool | None


@dataclass
class RunLog:
    """Append-only per-step record of one closed-loop run."""

    meta: dict
    rows: list = field(default_factory=list)

    def append(self, row: StepRow) -> None:
        if self.rows and row.t != self.rows[-1].t + 1:
            raise ValueError("run log rows must be consecutive")
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def states(self) -> np.ndarray:
        """``x_0 .. x_T`` including the state after the last input."""
        xs = [r.x for r in self.rows]
        if "x_final" in self.meta:
            xs.append(self.meta["x_final"])
        return np.array(xs, dtype=float)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.rows], dtype=float)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d) -> "RunLog":
        return cls(d["meta"], [StepRow(**r) for r in d["rows"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_dict())))

    @classmethod
    def load(cls, path) -> "RunLog":
        return cls.from_dict(json.loads(Path(path).read_text(), parse_constant=_nan_const))


def _nan_const(name):
    return {"NaN": math.nan, "Infinity": math.inf, "-Infinity": -math.inf}[name]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def tape_hash(tape: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(tape, dtype=float).tobytes()).hexdigest()[:16]


def disturbance_tape(setup: Setup, seed: int, ic_index: int, steps: int) -> np.ndarray:
    """Disturbances for one run; depends only on the seed and the initial condition."""
    rng = make_rng(seed, ic_index)
    return setup.disturbance.make_sampler().tape(rng, steps)


class RunFailed(RuntimeError):
    """Controller error during a run; carries the partial log."""

    def __init__(self, message, log: RunLog):
        super().__init__(message)
        self.log = log


def run_closed_loop(cfg: ScenarioConfig, ic_index: int = 0, seed: int | None = None,
                    setup: Setup | None = None, verify: bool = True, audit: bool = True,
                    out=None) -> RunLog:
    """Simulate the truth model under the adaptive tube controller.

    The t = 0 tube cross-sections are kept in ``meta["tube0"]``.  On a
    controller error the partial log is written to ``out`` (if given) and
    attached to the raised :class:`RunFailed`.
    """
    setup = build_setup(cfg) if setup is None else setup
    seed = cfg.seed if seed is None else int(seed)
    m, design = setup.model, setup.design
    ccfg = cfg.controller_config()
    x = np.array(cfg.initial_conditions[ic_index], dtype=float)
    tape = disturbance_tape(setup, seed, ic_index, cfg.steps)
    ctl = Controller(m, design, setup.disturbance.W, ccfg,
                     theta_set0=ParamSet.from_polytope(m.theta0), verify=verify)
    log = RunLog({
        "scenario": cfg.name, "config_hash": cfg.config_hash, "seed": seed,
        "ic_index": ic_index, "x0": x.tolist(), "steps": cfg.steps, "gamma": ccfg.gamma,
        "N": ccfg.N, "N_u": ccfg.N_u, "tape_hash": tape_hash(tape),
        "theta_star": m.theta_star.tolist(), "n_x": m.n_x, "n_u": m.n_u,
        "r": int(m.theta0.rows),
    })
    try:
        for t in range(cfg.steps):
            rec = ctl.step(x)
            sol = rec.solution
            if t == 0:
                log.meta["tube0"] = {
                    "alpha": sol.alpha.tolist(),
                    "vertices": [design.shape.vertices(a).tolist() for a in sol.alpha],
                }
            beta1 = math.nan
            if audit and not rec.degraded:
                beta1 = tube_pe_coefficient(m, design, sol.v, sol.alpha, ccfg.N_u)
            est = ctl.state.estimator
            log.append(StepRow(
                t=t, x=x.tolist(), u=rec.u.tolist(), status=rec.status,
                assembly_s=rec.assembly_s, solve_s=rec.solve_s,
                cost=float(sol.cost),
                beta_star=math.nan if sol.beta is None else float(sol.beta),
                beta1=float(beta1), vol_pct=float(est.volume_pct()),
                mu=est.theta.mu.tolist(), theta_bar=ctl.state.theta_bar.tolist(),
                alpha1=sol.alpha[1].tolist(), degraded=bool(rec.degraded),
                verified=None if rec.verification is None else bool(rec.verification.ok)))
            x = step_truth(m, x, rec.u, tape[t])
        log.meta["x_final"] = x.tolist()
    except Exception as exc:
        log.meta["x_final"] = x.tolist()
        log.meta["error"] = f"{type(exc).__name__}: {exc}"
        if out is not None:
            Path(out).mkdir(parents=True, exist_ok=True)
            log.save(Path(out) / "runlog.json")
        raise RunFailed(str(exc), log) from exc
    log.meta["summary"] = summarize(log, setup)
    return log


# --------------------------------------------------------------------------
# Metrics computable from a log

def constraint_violations(log: RunLog, setup: Setup, tol: float = CONSTRAINT_TOL) -> int:
    m = setup.model
    count = 0
    for r in log.rows:
        if m.F.shape[0] and np.any(m.F @ np.array(r.x) + m.G @ np.array(r.u) > 1.0 + tol):
            count += 1
    return count


def tube_violations(log: RunLog, setup: Setup, tol: float = CONSTRAINT_TOL) -> int:
    """Steps whose successor state leaves the predicted first tube section."""
    T = setup.design.shape.T
    xs = log.states
    count = 0
    for i, r in enumerate(log.rows):
        if r.degraded or i + 1 >= len(xs):
            continue
        if np.any(T @ xs[i + 1] > np.array(r.alpha1) + tol):
            count += 1
    return count


def truth_violations(log: RunLog, setup: Setup, tol: float = 1e-9) -> int:
    M = setup.model.theta0.normals
    M = M / np.linalg.norm(M, axis=1)[:, None]
    ts = setup.model.theta_star
    return sum(1 for r in log.rows if np.any(M @ ts > np.array(r.mu) + tol))


def mu_increases(log: RunLog, tol: float = 0.0) -> int:
    mus = np.array([r.mu for r in log.rows])
    if len(mus) < 2:
        return 0
    return int(np.sum(np.any(np.diff(mus, axis=0) > tol, axis=1)))


def summarize(log: RunLog, setup: Setup) -> dict:
    statuses = [r.status for r in log.rows]
    xs = log.states
    return {
        "steps": len(log.rows),
        "infeasible_steps": sum(1 for s in statuses[1:] if s == "Infeasible"),
        "degraded_steps": sum(1 for r in log.rows if r.degraded),
        "unverified_steps": sum(1 for r in log.rows if r.verified is False),
        "constraint_violations": constraint_violations(log, setup),
        "tube_violations": tube_violations(log, setup),
        "truth_violations": truth_violations(log, setup),
        "mu_increases": mu_increases(log),
        "final_vol_pct": log.rows[-1].vol_pct if log.rows else math.nan,
        "max_state_norm": float(np.max(np.linalg.norm(xs, axis=1))) if len(xs) else math.nan,
    }


# --------------------------------------------------------------------------
# Replay

@dataclass
class ReplayResult:
    identical: bool
    mismatches: list
    log: RunLog


def _same(a, b) -> bool:
    if isinstance(a, list):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def compare_logs(a: RunLog, b: RunLog) -> list:
    """Field-level differences, ignoring wall-clock timing."""
    out = []
    if len(a.rows) != len(b.rows):
        out.append(("length", len(a.rows), len(b.rows)))
    for ra, rb in zip(a.rows, b.rows):
        for name in ra.__dataclass_fields__:
            if name in TIMING_FIELDS:
                continue
            va, vb = getattr(ra, name), getattr(rb, name)
            if not _same(va, vb):
                out.append((ra.t, name, va, vb))
    for key in ("x_final", "tape_hash", "seed", "ic_index"):
        if not _same(a.meta.get(key), b.meta.get(key)):
            out.append(("meta", key, a.meta.get(key), b.meta.get(key)))
    return out


def replay(cfg: ScenarioConfig, log: RunLog, setup: Setup | None = None) -> ReplayResult:
    if log.meta.get("config_hash") != cfg.config_hash:
        raise ValueError("config hash of the log does not match the scenario")
    again = run_closed_loop(cfg.with_overrides(steps=len(log.rows)),
                            ic_index=int(log.meta["ic_index"]), seed=int(log.meta["seed"]),
                            setup=setup, verify=any(r.verified is not None for r in log.rows),
                            audit=not all(math.isnan(r.beta1) for r in log.rows))
    mism = compare_logs(log, again)
    return ReplayResult(not mism, mism, again)
