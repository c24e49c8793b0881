"""Ensemble studies: weighting sweeps, convergence Monte Carlo, excitation vs set size."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from ..design import lqr_gain
from ..estimator import (ParamSet, SetEstimator, intersection_support, pe_coefficient,
                         remove_redundant, unfalsified, unfalsified_noisy)
from ..geometry import (HPolytope, chebyshev_center, enclosing_radius, enumerate_vertices,
                        inf_ball, support, volume)
from ..system import (DisturbanceModel, SetSampler, UncertainModel, closed_loop, inexact_pair,
                      make_rng, regressor, step_truth)
from .pool import ordered_map
from .runner import disturbance_tape, run_closed_loop, tape_hash
from .scenario import ScenarioConfig, build_setup

DEFAULT_GAMMAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
VARIANTS = ("minimal", "fixed", "inexact", "noisy")


# --------------------------------------------------------------------------
# Weighting sweep

@dataclass
class SweepResult:
    gammas: np.ndarray
    vol20: np.ndarray            # (members, gammas)
    beta_star_mean: np.ndarray
    beta1_mean: np.ndarray
    tape_hashes: list            # per member, per gamma
    vol_long: np.ndarray | None = None    # largest gamma at the long horizon, per member
    long_steps: int | None = None
    eval_step: int = 20

    def table(self) -> list:
        """Rows ``(gamma, median vol %, mean beta*, mean beta1)`` across the ensemble."""
        return [(float(g), float(np.median(self.vol20[:, i])),
                 float(np.nanmean(self.beta_star_mean[:, i])),
                 float(np.nanmean(self.beta1_mean[:, i])))
                for i, g in enumerate(self.gammas)]

    def shared_tapes(self) -> bool:
        return all(len(set(h)) == 1 for h in self.tape_hashes)


def _sweep_member(args):
    cfg_dict, base_dir, gammas, steps, eval_step, long_steps, member, ic = args
    cfg = ScenarioConfig.from_dict(cfg_dict, base_dir)
    setup = build_setup(cfg)
    seed = cfg.seed + member
    out = []
    for g in gammas:
        n = long_steps if (long_steps and g == max(gammas)) else steps
        ctrl = dict(cfg.controller, gamma=float(g))
        run_cfg = cfg.with_overrides(controller=ctrl, steps=n)
        log = run_closed_loop(run_cfg, ic_index=ic, seed=seed, setup=setup, verify=False)
        rows = log.rows
        bs = np.array([r.beta_star for r in rows[:eval_step]], dtype=float)
        b1 = np.array([r.beta1 for r in rows[:eval_step]], dtype=float)
        out.append({
            "vol20": rows[eval_step].vol_pct if len(rows) > eval_step else rows[-1].vol_pct,
            "beta_star": float(np.nanmean(bs)) if np.any(~np.isnan(bs)) else math.nan,
            "beta1": float(np.nanmean(b1)),
            # longer runs extend the same stream; compare the common prefix
            "tape": tape_hash(disturbance_tape(setup, seed, ic, n)[:steps]),
            "vol_long": rows[-1].vol_pct if n == long_steps else None,
            "degraded": log.meta["summary"]["degraded_steps"],
        })
    return out


def gamma_sweep(cfg: ScenarioConfig, gammas=DEFAULT_GAMMAS, ensemble: int | None = None,
                eval_step: int = 20, long_steps: int | None = None, ic_index: int | None = None,
                workers: int | None = None) -> SweepResult:
    """Closed loops over a grid of weights sharing initial state and disturbance tape.

    Member ``e`` uses seed ``cfg.seed + e``; its tape is identical for every weight.
    With ``long_steps`` the largest weight runs that long and its final volume
    is reported separately.
    """
    gammas = np.asarray(sorted(gammas), dtype=float)
    ensemble = cfg.ensemble if ensemble is None else ensemble
    ic = int(cfg.study.get("sweep_ic", 0)) if ic_index is None else ic_index
    steps = eval_step + 1
    args = [(cfg.to_dict(), cfg.base_dir, tuple(gammas), steps, eval_step, long_steps, e, ic)
            for e in range(ensemble)]
    res = ordered_map(_sweep_member, args, workers)
    vol = np.array([[c["vol20"] for c in r] for r in res])
    bs = np.array([[c["beta_star"] for c in r] for r in res])
    b1 = np.array([[c["beta1"] for c in r] for r in res])
    hashes = [[c["tape"] for c in r] for r in res]
    vl = None
    if long_steps:
        vl = np.array([r[-1]["vol_long"] for r in res])
    return SweepResult(gammas, vol, bs, b1, hashes, vl, long_steps, eval_step)


def monotone_violations(values, rtol: float = 1e-9) -> int:
    """Adjacent pairs where a sequence that should not increase goes up."""
    v = np.asarray(values, dtype=float)
    return int(np.sum(v[1:] > v[:-1] * (1 + rtol) + 1e-12))


# --------------------------------------------------------------------------
# Convergence Monte Carlo

@dataclass
class ConvergenceRun:
    diameter: np.ndarray
    gap: np.ndarray
    contained: np.ndarray
    tau: float
    beta: float
    zero_windows: int
    final_gaps: np.ndarray
    p_w: float


@dataclass
class ConvergenceResult:
    variant: str
    runs: list
    epsilon: float
    window: int
    rho: float
    bound_box: np.ndarray        # inexact-bound radius per run
    checkpoints: np.ndarray
    empirical: np.ndarray        # exceedance frequency per checkpoint
    theoretical: np.ndarray      # mean geometric bound per checkpoint

    @property
    def final_diameters(self) -> np.ndarray:
        return np.array([r.diameter[-1] for r in self.runs])

    def fraction_below(self, eps: float) -> float:
        return float(np.mean(self.final_diameters <= eps))

    def containment_fraction(self) -> float:
        return float(np.mean([np.all(r.contained) for r in self.runs]))

    def inexact_fraction(self, inflate: float = 1e-6) -> float:
        ok = [np.all(r.final_gaps <= b + inflate) for r, b in zip(self.runs, self.bound_box)]
        return float(np.mean(ok))

    def flagged_runs(self) -> int:
        return sum(1 for r in self.runs if r.zero_windows > 0)


def _box_half_width(P: HPolytope) -> float:
    return float(support(P, np.eye(P.dim)[0]))


def _dither(rng, n, low, high):
    mag = low + (high - low) * rng.random(n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign * mag


def _facet_near_fraction(W: HPolytope, tape: np.ndarray, delta: float) -> float:
    """Smallest fraction of samples within ``delta`` of a facet (per facet normal)."""
    n = np.linalg.norm(W.normals, axis=1)
    slack = (W.offsets[:, None] - W.normals @ tape.T) / n[:, None]
    return float(np.min(np.mean(slack <= delta, axis=1)))


def _sliding_beta(Ds, window):
    if len(Ds) < window:
        return 0.0, 0
    grams = [D.T @ D for D in Ds]
    vals = []
    for s in range(len(Ds) - window + 1):
        vals.append(float(np.linalg.eigvalsh(sum(grams[s:s + window]))[0]))
    vals = np.array(vals)
    return float(max(np.min(vals), 0.0)), int(np.sum(vals <= 1e-12))


def _convergence_run(args):
    cfg_dict, base_dir, variant, run, steps = args
    cfg = ScenarioConfig.from_dict(cfg_dict, base_dir)
    setup = build_setup(cfg, with_design=False)
    m = setup.model
    st = cfg.study
    window = int(st.get("window", 1))
    low, high = st.get("dither", [0.5, 1.0])
    rho = float(st.get("rho", 0.02))
    noise = float(st.get("noise", 0.05))
    kind = setup.disturbance.sampler
    K = np.atleast_2d(np.array(st.get("gain", np.zeros((m.n_u, m.n_x))), dtype=float))
    K = K.reshape(m.n_u, m.n_x)
    W = setup.disturbance.W
    if variant == "inexact":
        W, omega = inexact_pair(_box_half_width(W), rho, m.n_x)
    else:
        omega = W
    rng = make_rng(cfg.seed, run)
    wtape = SetSampler(omega, kind).tape(rng, steps)
    S = inf_ball(noise, m.n_x) if variant == "noisy" else None
    stape = SetSampler(S, kind).tape(rng, steps + 1) if S is not None else np.zeros((steps + 1, m.n_x))
    Sv = enumerate_vertices(S).vertices if S is not None else None
    rtape = np.array([_dither(rng, m.n_u, low, high) for _ in range(steps)])

    theta0 = ParamSet.from_polytope(m.theta0)
    M = theta0.M
    ts = m.theta_star
    est = SetEstimator(theta0, window=window)
    exact = theta0.polytope

    def record(theta_poly, mu=None):
        if mu is None:
            sup = np.array([support(theta_poly, row) for row in M])
        else:
            sup = np.asarray(mu)
        widths = []
        for i, row in enumerate(M):
            j = np.flatnonzero(np.all(np.isclose(M, -row), axis=1))
            widths.append(sup[i] + (sup[j[0]] if len(j) else support(theta_poly, -row)))
        return float(max(widths)), sup - M @ ts

    x = np.array(cfg.initial_conditions[0] if cfg.initial_conditions else np.zeros(m.n_x),
                 dtype=float)
    y = x + stape[0]
    diam, gaps, cont, Ds = [], [], [], []
    d0, g0 = record(None, theta0.mu)
    diam.append(d0); gaps.append(float(np.max(g0))); cont.append(True)
    final_gaps = g0
    for t in range(steps):
        u = K @ y + rtape[t]
        x_next = step_truth(m, x, u, wtape[t])
        y_next = x_next + stape[t + 1]
        if variant == "noisy":
            delta = unfalsified_noisy(m, W, S, Sv, y, u, y_next)
        else:
            delta = unfalsified(m, W, y, u, y_next)
        D, _ = regressor(m, y, u)
        Ds.append(D)
        if variant == "minimal":
            exact = remove_redundant(exact.intersect(HPolytope(delta.P, delta.q)))
            dd, gg = record(exact)
            inside = bool(np.all(exact.normals @ ts <= exact.offsets + 1e-9))
        else:
            est.observe(delta, D)
            dd, gg = record(None, est.theta.mu)
            inside = est.theta.contains(ts, 1e-9)
        diam.append(dd); gaps.append(float(np.max(gg))); cont.append(inside)
        final_gaps = gg
        x, y = x_next, y_next
    tau = max(float(np.linalg.norm(D, 2)) for D in Ds)
    beta, zero = _sliding_beta(Ds, window)
    eps = float(st.get("epsilon", 0.05))
    delta_pw = eps * beta / (window * tau) if tau > 0 else 0.0
    pw = _facet_near_fraction(omega, wtape, delta_pw)
    return ConvergenceRun(np.array(diam), np.array(gaps), np.array(cont), tau, beta, zero,
                          np.asarray(final_gaps), pw)


def theorem_bound(p_w: float, window: int, t: int) -> float:
    """Geometric bound ``{1 - p_w^Nu}^floor(t/Nu)`` on exceeding the accuracy level."""
    return float((1.0 - p_w ** window) ** (t // window))


def convergence_mc(cfg: ScenarioConfig, variant: str, ensemble: int | None = None,
                   steps: int | None = None, workers: int | None = None) -> ConvergenceResult:
    """Open-loop identification runs with a dithered input through the truth model.

    Each run draws its disturbance, noise and dither from the stream
    ``(cfg.seed, run)``.  Runs with windows of zero excitation are flagged.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    ensemble = cfg.ensemble if ensemble is None else ensemble
    steps = cfg.steps if steps is None else steps
    args = [(cfg.to_dict(), cfg.base_dir, variant, r, steps) for r in range(ensemble)]
    runs = ordered_map(_convergence_run, args, workers)
    st = cfg.study
    window = int(st.get("window", 1))
    rho = float(st.get("rho", 0.02)) if variant == "inexact" else 0.0
    eps = float(st.get("epsilon", 0.05))
    bound = np.array([rho * window * r.tau / r.beta if r.beta > 0 else np.inf for r in runs])
    cps = np.unique(np.linspace(0, steps, 11).astype(int))
    emp = np.array([np.mean([r.gap[c] > eps for r in runs]) for c in cps])
    theo = np.array([np.mean([theorem_bound(r.p_w, window, c) for r in runs]) for c in cps])
    return ConvergenceResult(variant, runs, eps, window, rho, bound, cps, emp, theo)


# --------------------------------------------------------------------------
# Excitation level vs identified set size

@dataclass
class BetaStudy:
    rows: list                  # dicts per sample
    spearman_volume: float
    spearman_side: float

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)


def random_third_order(rng, theta_box: float = 0.25, scale: float = 0.1,
                       max_tries: int = 100) -> tuple[UncertainModel, np.ndarray]:
    """Random ``(A_i, B_i, theta*)`` with a gain stabilizing every vertex of the box."""
    nx, nu, p = 3, 2, 3
    theta0 = inf_ball(theta_box, p)
    verts = enumerate_vertices(theta0).vertices
    for _ in range(max_tries):
        A0 = rng.standard_normal((nx, nx))
        A0 *= rng.uniform(0.6, 1.1) / max(abs(np.linalg.eigvals(A0)))
        B0 = rng.standard_normal((nx, nu))
        Ai = scale * rng.standard_normal((p, nx, nx))
        Bi = scale * rng.standard_normal((p, nx, nu))
        ts = theta_box * (2 * rng.random(p) - 1)
        m = UncertainModel(np.concatenate([A0[None], Ai]), np.concatenate([B0[None], Bi]),
                           ts, theta0)
        try:
            K = lqr_gain(A0, B0, np.eye(nx), np.eye(nu))
        except (np.linalg.LinAlgError, ValueError, linalg.LinAlgError):
            continue
        if all(max(abs(np.linalg.eigvals(closed_loop(m, v, K)))) < 1 for v in verts):
            return m, K
    raise RuntimeError("no stabilizable random system found")


def _beta_sample(args):
    seed, i, sequences, steps, window, w_half, theta_box, ic_low, ic_high, excitation = args
    rng = make_rng(seed, i)
    m, K = random_third_order(rng, theta_box)
    W = inf_ball(w_half, m.n_x)
    if excitation == "zero":
        x0 = np.zeros(m.n_x)
        K = np.zeros_like(K)
    else:
        d = rng.standard_normal(m.n_x)
        x0 = d / np.linalg.norm(d) * rng.uniform(ic_low, ic_high)
    sampler = SetSampler(W)
    theta0 = ParamSet.from_polytope(m.theta0)
    b1, vol, side, rin, rout = [], [], [], [], []
    for s in range(sequences):
        srng = make_rng(seed, i, s + 1)
        x = x0.copy()
        est = SetEstimator(theta0, window=window)
        Ds = []
        for t in range(steps):
            u = K @ x
            D, _ = regressor(m, x, u)
            Ds.append(D)
            x_next = step_truth(m, x, u, sampler.sample(srng))
            if t < steps - 1:
                est.observe(unfalsified(m, W, x, u, x_next), D)
            x = x_next
        b1.append(pe_coefficient(Ds).beta1)
        P = est.theta.polytope
        widths = est.theta.mu[:m.p] + est.theta.mu[m.p:]
        vol.append(volume(P))
        side.append(float(np.mean(widths)))
        rin.append(chebyshev_center(P)[1])
        rout.append(enclosing_radius(enumerate_vertices(P).vertices))
    return {"sample": i, "beta1": float(np.mean(b1)), "side": float(np.mean(side)),
            "inner_radius": float(np.mean(rin)), "outer_radius": float(np.mean(rout)),
            "volume": float(np.mean(vol)), "x0_norm": float(np.linalg.norm(x0))}


def beta_vs_convergence(cfg: ScenarioConfig, n_samples: int | None = None,
                        sequences: int | None = None, excitation: str | None = None,
                        workers: int | None = None) -> BetaStudy:
    """Random third-order systems under ``u = Kx``: mean excitation vs set size after the window.

    Each sample is one random system with one random initial state; averages
    run over ``sequences`` disturbance tapes.  Side length is the mean of the
    axis-aligned widths.
    """
    st = cfg.study
    n_samples = int(st.get("samples", 50)) if n_samples is None else n_samples
    sequences = int(st.get("sequences", 20)) if sequences is None else sequences
    excitation = st.get("excitation", "feedback") if excitation is None else excitation
    window = int(st.get("window", 10))
    steps = int(st.get("steps", window))
    args = [(cfg.seed, i, sequences, steps, window, float(st.get("w_half", 0.1)),
             float(st.get("theta_box", 0.25)), float(st.get("ic_low", 0.5)),
             float(st.get("ic_high", 5.0)), excitation) for i in range(n_samples)]
    rows = ordered_map(_beta_sample, args, workers)
    b = np.array([r["beta1"] for r in rows])
    sv = stats.spearmanr(b, [r["volume"] for r in rows]).statistic
    ss = stats.spearmanr(b, [r["side"] for r in rows]).statistic
    return BetaStudy(rows, float(sv), float(ss))
