"""Online tube MPC: problem assembly, solve, audit and the receding-horizon law."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import conic
from .design import Design, TubeShape, tube_coefficients, theta_vertices
from .estimator import (ParamSet, SetEstimator, EmptyIntersection, project_nominal,
                        unfalsified)
from .geometry import HPolytope, chebyshev_center
from .system import UncertainModel, assemble, closed_loop, regressor

VERIFY_FACTOR = 10.0


class MPCError(RuntimeError):
    pass


class UnstableClosedLoop(MPCError):
    pass


class InfeasibleAtStart(MPCError):
    pass


class EmptyParameterSet(MPCError):
    pass


# --------------------------------------------------------------------------
# Cost ingredients

def lyapunov_weight(m: UncertainModel, K, Q, R, theta) -> np.ndarray:
    """``P - Phi' P Phi = Q + K'RK`` by one vectorized linear solve."""
    K = np.atleast_2d(K)
    phi = closed_loop(m, theta, K)
    if np.max(np.abs(np.linalg.eigvals(phi))) >= 1.0:
        raise UnstableClosedLoop("closed loop is not Schur stable at the nominal parameter")
    return _lyap(phi, np.atleast_2d(Q) + K.T @ np.atleast_2d(R) @ K)


def _lyap(phi, S):
    n = phi.shape[0]
    # vec(Phi' P Phi) = kron(Phi', Phi') vec(P)  (column-major vec)
    lhs = np.eye(n * n) - np.kron(phi.T, phi.T)
    P = np.linalg.solve(lhs, S.reshape(-1, order="F")).reshape(n, n, order="F")
    return 0.5 * (P + P.T)


def lyapunov_residual(phi, P, S) -> float:
    return float(np.max(np.abs(P - phi.T @ P @ phi - S)))


def nominal_cost(xbar, v, K, Q, R, P) -> float:
    """Finite-horizon quadratic cost with terminal weight on a nominal trajectory."""
    xbar = np.atleast_2d(xbar)
    v = np.atleast_2d(v)
    K = np.atleast_2d(K)
    u = xbar[:-1] @ K.T + v
    return float(np.einsum("ki,ij,kj->", xbar[:-1], Q, xbar[:-1])
                 + np.einsum("ki,ij,kj->", u, R, u) + xbar[-1] @ P @ xbar[-1])


def simulate_nominal(m: UncertainModel, theta, K, x0, v) -> np.ndarray:
    A, B = assemble(m, theta)
    K = np.atleast_2d(K)
    x = [np.asarray(x0, dtype=float)]
    for vk in np.atleast_2d(v):
        x.append(A @ x[-1] + B @ (K @ x[-1] + vk))
    return np.array(x)


def _cost_factor(Q, R, K, P, N, nx, nu):
    """``L`` with cost = ||L' z||^2 for ``z = [xbar_0..xbar_N, v_0..v_{N-1}]``."""
    sQ = _sqrt_psd(Q)
    sR = _sqrt_psd(R)
    sP = _sqrt_psd(P)
    blocks_x = []
    blocks_v = []
    for k in range(N):
        rows_q = sp.hstack([sp.csr_matrix((nx, k * nx)), sp.csr_matrix(sQ.T),
                            sp.csr_matrix((nx, (N - k) * nx))])
        blocks_x.append(rows_q)
        blocks_v.append(sp.csr_matrix((nx, N * nu)))
        rows_r = sp.hstack([sp.csr_matrix((nu, k * nx)), sp.csr_matrix(sR.T @ K),
                            sp.csr_matrix((nu, (N - k) * nx))])
        blocks_x.append(rows_r)
        ev = np.zeros((nu, N * nu))
        ev[:, k * nu:(k + 1) * nu] = sR.T
        blocks_v.append(sp.csr_matrix(ev))
    blocks_x.append(sp.hstack([sp.csr_matrix((nx, N * nx)), sp.csr_matrix(sP.T)]))
    blocks_v.append(sp.csr_matrix((nx, N * nu)))
    return sp.vstack(blocks_x).tocsr(), sp.vstack(blocks_v).tocsr()


def _sqrt_psd(S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return V * np.sqrt(np.clip(w, 0.0, None))   # S = L L'


def _epigraph_rows(Lx, Lv, cols_x, cols_v, col_t, n):
    """Rotated cone ``(t+1, t-1, 2 L'z)``: ``t >= ||L'z||^2``."""
    k = Lx.shape[0]
    top = sp.csr_matrix(([-1.0, -1.0], ([0, 1], [col_t, col_t])), shape=(2, n))
    body = sp.hstack([sp.csr_matrix((k, cols_x)), -2.0 * Lx,
                      sp.csr_matrix((k, cols_v - cols_x - Lx.shape[1])), -2.0 * Lv,
                      sp.csr_matrix((k, n - cols_v - Lv.shape[1]))]).tocsr()
    return conic.block("soc", sp.vstack([top, body]), np.r_[1.0, -1.0, np.zeros(k)])


# --------------------------------------------------------------------------
# References

def initial_reference(m: UncertainModel, K, Q, R, theta_bar0, x0, N: int, P=None):
    """Nominal constrained problem from ``x0``: returns ``(xhat, uhat)``."""
    K = np.atleast_2d(K)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    nx, nu = m.n_x, m.n_u
    if P is None:
        P = lyapunov_weight(m, K, Q, R, theta_bar0)
    A, B = assemble(m, theta_bar0)
    phi = A + B @ K
    nX, nV = (N + 1) * nx, N * nu
    n = nX + nV + 1
    # nominal dynamics and x_0 = x0
    dyn = sp.lil_matrix((nX, n))
    rhs = np.zeros(nX)
    dyn[:nx, :nx] = np.eye(nx)
    rhs[:nx] = x0
    for k in range(N):
        r = slice((k + 1) * nx, (k + 2) * nx)
        dyn[r, (k + 1) * nx:(k + 2) * nx] = np.eye(nx)
        dyn[r, k * nx:(k + 1) * nx] = -phi
        dyn[r, nX + k * nu:nX + (k + 1) * nu] = -B
    blocks = [conic.block("zero", dyn.tocsr(), rhs)]
    nc = m.F.shape[0]
    if nc:
        FGK = m.F + m.G @ K
        con = sp.hstack([sp.kron(sp.eye(N), FGK), sp.csr_matrix((N * nc, nx)),
                         sp.kron(sp.eye(N), m.G), sp.csr_matrix((N * nc, 1))])
        blocks.append(conic.block("nonneg", con, np.ones(N * nc)))
    Lx, Lv = _cost_factor(Q, R, K, P, N, nx, nu)
    blocks.append(_epigraph_rows(Lx, Lv, 0, nX, n - 1, n))
    c = np.zeros(n)
    c[-1] = 1.0
    prog = conic.program(c, blocks)
    rep = conic.solve(prog, tol=1e-9)
    if rep.status == conic.NUMERICAL_FAILURE:
        rep = conic.solve(prog, tol=1e-7)
    if rep.status == conic.INFEASIBLE:
        raise InfeasibleAtStart("nominal reference problem infeasible at x0")
    if not rep.optimal:
        raise MPCError(f"reference problem failed: {rep.status}")
    v = rep.x[nX:nX + nV].reshape(N, nu)
    xhat = simulate_nominal(m, theta_bar0, K, x0, v)
    uhat = xhat[:-1] @ K.T + v
    return xhat, uhat


def shift_reference(prev_v_star, theta_bar_t, x_t, K, N: int, m: UncertainModel):
    """Shifted previous inputs with a zero tail, simulated under the nominal model."""
    K = np.atleast_2d(K)
    prev = np.atleast_2d(prev_v_star)
    vhat = np.zeros((N, K.shape[0]))
    vhat[:N - 1] = prev[1:N]
    xhat = simulate_nominal(m, theta_bar_t, K, x_t, vhat)
    uhat = xhat[:-1] @ K.T + vhat
    return xhat, uhat


# --------------------------------------------------------------------------
# Problem assembly

@dataclass(frozen=True)
class ControllerConfig:
    N: int = 10
    N_u: int = 2
    gamma: float = 0.0
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    tol: float = 1e-8
    periodic: bool = False
    pe_iterations: int = 1
    gamma_off: int | None = None     # gamma forced to zero from this step on
    estimate: bool = True
    window: int | None = None        # identification window, defaults to N_u
    retry_tol: float = 1e-6

    def weights(self, nx, nu):
        Q = np.eye(nx) if self.Q is None else np.atleast_2d(np.asarray(self.Q, float))
        R = np.eye(nu) if self.R is None else np.atleast_2d(np.asarray(self.R, float))
        return Q, R

    def gamma_at(self, t: int) -> float:
        if self.gamma_off is not None and t >= self.gamma_off:
            return 0.0
        return float(self.gamma)


@dataclass(frozen=True)
class Layout:
    """Column offsets of the decision blocks."""

    N: int
    N_u: int
    nx: int
    nu: int
    na: int
    m: int
    r: int
    p: int
    pe: bool

    @property
    def v(self):
        return 0

    @property
    def alpha(self):
        return self.N * self.nu

    @property
    def lam(self):
        return self.alpha + (self.N + 1) * self.na

    @property
    def lam_size(self):
        return self.na * self.r

    @property
    def xbar(self):
        return self.lam + (self.N + 1) * self.m * self.lam_size

    @property
    def t(self):
        return self.xbar + (self.N + 1) * self.nx

    @property
    def beta(self):
        return self.t + 1

    @property
    def mk(self):
        return self.beta + 1

    @property
    def n(self):
        base = self.t + 1
        if self.pe:
            base += 1 + self.N_u * conic.svec_size(self.p)
        return base


@dataclass
class TubeProblem:
    program: conic.ConicProgram
    layout: Layout
    x: np.ndarray
    theta_set: ParamSet
    theta_bar: np.ndarray
    P: np.ndarray
    gamma: float
    xhat: np.ndarray
    uhat: np.ndarray
    assembly_time: float = 0.0
    skeleton: "Skeleton | None" = None


def _kron_eye(k, M):
    return sp.kron(sp.eye(k, format="csr"), sp.csr_matrix(M), format="csr")


def _place(rows, col0, M, n):
    """Embed ``M`` (rows x w) at column ``col0`` of an ``n``-column matrix."""
    M = sp.csr_matrix(M)
    return sp.hstack([sp.csr_matrix((rows, col0)), M,
                      sp.csr_matrix((rows, n - col0 - M.shape[1]))], format="csr")


def _pe_coefficients(m: UncertainModel, shape: TubeShape, K):
    """``D(U_j a, K U_j a + v)`` as tensors ``Ea[j] (nx, p, na)`` and ``Ev (nx, p, nu)``."""
    K = np.atleast_2d(K)
    AK = np.stack([m.A[i] + m.B[i] @ K for i in range(1, m.p + 1)])     # (p, nx, nx)
    Ea = np.einsum("inx,jxa->jnia", AK, shape.U)
    Ev = np.transpose(m.B[1:], (1, 0, 2))                                # (nx, p, nu)
    return Ea, Ev


def _sym_svec_rows(E, Dhat):
    """Rows mapping ``z`` to ``svec(E(z)'Dhat + Dhat'E(z))`` for linear ``E``.

    ``E`` has shape (nx, p, nz).
    """
    S = np.einsum("nic,nk->ikc", E, Dhat)
    S = S + np.transpose(S, (1, 0, 2))
    i, j = conic.svec_index(Dhat.shape[1])
    scale = np.where(i == j, 1.0, np.sqrt(2.0))
    return S[i, j, :] * scale[:, None]


@dataclass(frozen=True)
class Skeleton:
    """Parts of the tube program that do not change from step to step."""

    layout: Layout
    eq_tube: sp.csr_matrix       # multiplier equalities, rhs zero
    in_static: sp.csr_matrix     # recursion rows without the mu terms, then the rest
    in_rhs: np.ndarray
    n_rec: int                   # leading recursion rows of in_static
    x_rows: slice                # rows whose rhs is -T x
    Ea: np.ndarray
    Ev: np.ndarray


def _coo(rows, cols, vals, shape):
    return sp.csr_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape)


def make_skeleton(m: UncertainModel, design: Design, N: int, N_u: int, M, pe: bool) -> Skeleton:
    shape, K = design.shape, np.atleast_2d(design.feedback.K)
    M = np.atleast_2d(M)
    lay = Layout(N, N_u, m.n_x, m.n_u, shape.n_alpha, shape.m, M.shape[0], m.p, pe)
    n, na, mm, nu, p = lay.n, lay.na, lay.m, lay.nu, lay.p
    nl = lay.lam_size
    co = tube_coefficients(m, shape, K)
    nblk = (N + 1) * mm                 # (k, j) pairs, k = 0..N

    # Lambda M - T D(U_j a_k, K U_j a_k + v_k) = 0, rows ordered (k, j, a, i)
    Lam_eq = _kron_eye(nblk, np.kron(np.eye(na), M.T))
    A_eq = -_kron_eye(N + 1, co.Da.reshape(mm * na * p, na))
    V_eq = -sp.vstack([_kron_eye(N, np.tile(co.Dv, (mm, 1))),
                       sp.csr_matrix((mm * na * p, N * nu))], format="csr")
    eq_tube = sp.hstack([V_eq, A_eq, Lam_eq,
                         sp.csr_matrix((nblk * na * p, n - lay.xbar))], format="csr")

    in_parts, in_rhs = [], []
    # T d(.) - alpha_next <= -wbar - Lambda mu   (mu part added per step)
    A_cur = _kron_eye(N + 1, co.da.reshape(mm * na, na))
    nxt = sp.diags(np.ones(N), 1, shape=(N + 1, N + 1), format="lil")
    nxt[N, N] = 1.0
    A_next = sp.kron(nxt, sp.csr_matrix(np.tile(np.eye(na), (mm, 1))), format="csr")
    V_in = sp.vstack([_kron_eye(N, np.tile(co.dv, (mm, 1))),
                      sp.csr_matrix((mm * na, N * nu))], format="csr")
    in_parts.append(sp.hstack([V_in, A_cur - A_next, sp.csr_matrix((nblk * na, n - lay.lam))],
                              format="csr"))
    in_rhs.append(-np.tile(shape.wbar, nblk))
    # Lambda >= 0
    in_parts.append(_place(nblk * nl, lay.lam, -sp.eye(nblk * nl), n))
    in_rhs.append(np.zeros(nblk * nl))
    # state/input constraints at every tube vertex (terminal one with v = 0)
    nc = co.ca.shape[1]
    if nc:
        A_c = _kron_eye(N + 1, co.ca.reshape(mm * nc, na))
        V_c = sp.vstack([_kron_eye(N, np.tile(co.G, (mm, 1))),
                         sp.csr_matrix((mm * nc, N * nu))], format="csr")
        in_parts.append(sp.hstack([V_c, A_c, sp.csr_matrix((nblk * nc, n - lay.lam))],
                                  format="csr"))
        in_rhs.append(np.ones(nblk * nc))
    # T x <= alpha_0
    in_parts.append(_place(na, lay.alpha, -sp.eye(na), n))
    in_rhs.append(np.zeros(na))
    rows = sum(len(b) for b in in_rhs)
    Ea, Ev = _pe_coefficients(m, shape, K)
    return Skeleton(lay, eq_tube, sp.vstack(in_parts, format="csr"), np.concatenate(in_rhs),
                    nblk * na, slice(rows - na, rows), Ea, Ev)


def build_problem(m: UncertainModel, design: Design, x, theta_set: ParamSet, theta_bar,
                  P, xhat, uhat, cfg: ControllerConfig, gamma: float | None = None,
                  skeleton: Skeleton | None = None) -> TubeProblem:
    """Assemble the tube program for the current state and parameter data.

    ``skeleton`` carries the step-invariant rows; it is rebuilt when absent or
    when it does not match the requested structure.
    """
    t0 = time.perf_counter()
    shape, K = design.shape, np.atleast_2d(design.feedback.K)
    gamma = cfg.gamma if gamma is None else float(gamma)
    N, N_u = cfg.N, cfg.N_u
    Q, R = cfg.weights(m.n_x, m.n_u)
    x = np.asarray(x, dtype=float)
    M, mu = theta_set.M, theta_set.mu
    pe = gamma > 0
    sk = skeleton
    if sk is None or sk.layout.pe != pe or sk.layout.N != N or sk.layout.N_u != N_u \
            or sk.layout.r != len(mu):
        sk = make_skeleton(m, design, N, N_u, M, pe)
    lay = sk.layout
    n, na, nu, nx, p = lay.n, lay.na, lay.nu, lay.nx, lay.p
    r = lay.r

    # recursion rows gain Lambda_{k,j} mu: row (blk, a) picks Lambda[blk, a, :]
    nrec = sk.n_rec
    rows = np.repeat(np.arange(nrec), r)
    cols = lay.lam + np.arange(nrec * r)
    vals = np.tile(mu, nrec)
    mu_rows = _coo(rows, cols, vals, (nrec, n))
    pad = sp.csr_matrix((sk.in_static.shape[0] - nrec, n))
    A_in = sk.in_static + sp.vstack([mu_rows, pad], format="csr")
    b_in = sk.in_rhs.copy()
    b_in[sk.x_rows] = -shape.T @ x

    # nominal dynamics
    Ab, Bb = assemble(m, theta_bar)
    phi = Ab + Bb @ K
    shift = sp.eye(N + 1, k=-1, format="csr")
    X_dyn = sp.eye((N + 1) * nx, format="csr") - sp.kron(shift, sp.csr_matrix(phi), format="csr")
    V_dyn = sp.vstack([sp.csr_matrix((nx, N * nu)), -_kron_eye(N, Bb)], format="csr")
    dyn = sp.hstack([V_dyn, sp.csr_matrix(((N + 1) * nx, lay.xbar - lay.alpha)), X_dyn,
                     sp.csr_matrix(((N + 1) * nx, n - lay.t))], format="csr")

    blocks = [conic.block("zero", sp.vstack([sk.eq_tube, dyn], format="csr"),
                          np.r_[np.zeros(sk.eq_tube.shape[0]), x, np.zeros(N * nx)]),
              conic.block("nonneg", A_in, b_in)]

    # cost epigraph on [xbar, v]
    Lx, Lv = _cost_factor(Q, R, K, P, N, nx, nu)
    kq = Lx.shape[0]
    top = sp.csr_matrix(([-1.0, -1.0], ([0, 1], [lay.t, lay.t])), shape=(2, n))
    body = (_place(kq, lay.xbar, -2.0 * Lx, n) + _place(kq, lay.v, -2.0 * Lv, n)).tocsr()
    blocks.append(conic.block("soc", sp.vstack([top, body], format="csr"),
                              np.r_[1.0, -1.0, np.zeros(kq)]))

    c = np.zeros(n)
    c[lay.t] = 1.0
    if pe:
        c[lay.beta] = -gamma
        sv = conic.svec_size(p)
        eye_sv = np.eye(sv)
        for k in range(N_u):
            Dhat, _ = regressor(m, xhat[k], uhat[k])
            base = conic.svec(Dhat.T @ Dhat)
            Sv = _sym_svec_rows(sk.Ev, Dhat)
            for j in range(lay.m):
                Sa = _sym_svec_rows(sk.Ea[j], Dhat)
                # s = S(a_k, v_k) - Dhat'Dhat - M_k  in PSD
                A = sp.hstack([_place(sv, lay.v + k * nu, -Sv, lay.alpha)[:, :lay.alpha],
                               _place(sv, k * na, -Sa, lay.lam - lay.alpha),
                               sp.csr_matrix((sv, lay.mk + k * sv - lay.lam)),
                               sp.csr_matrix(eye_sv),
                               sp.csr_matrix((sv, n - lay.mk - (k + 1) * sv))], format="csr")
                blocks.append(conic.block("psd", A, -base, order=p))
        # sum M_k - beta I in PSD
        A = sp.hstack([sp.csr_matrix((sv, lay.beta)),
                       sp.csr_matrix(conic.svec(np.eye(p))[:, None]),
                       sp.csr_matrix(-np.tile(eye_sv, (1, N_u)))], format="csr")
        blocks.append(conic.block("psd", A, np.zeros(sv), order=p))

    prog = conic.program(c, blocks)
    return TubeProblem(prog, lay, x, theta_set, np.asarray(theta_bar, float), P, gamma,
                       np.asarray(xhat, float), np.asarray(uhat, float),
                       time.perf_counter() - t0, sk)


# --------------------------------------------------------------------------
# Solutions

@dataclass
class TubeSolution:
    v: np.ndarray              # (N, nu)
    alpha: np.ndarray          # (N+1, na)
    lam: np.ndarray            # (N+1, m, na, r)
    xbar: np.ndarray           # (N+1, nx)
    beta: float | None
    cost: float
    objective: float
    report: conic.SolveReport
    degraded: bool = False
    tol: float = conic.DEFAULT_TOL

    @property
    def status(self) -> str:
        return self.report.status


def unpack(problem: TubeProblem, x) -> dict:
    lay = problem.layout
    N = lay.N
    out = {
        "v": x[lay.v:lay.alpha].reshape(N, lay.nu),
        "alpha": x[lay.alpha:lay.lam].reshape(N + 1, lay.na),
        "lam": x[lay.lam:lay.xbar].reshape(N + 1, lay.m, lay.na, lay.r),
        "xbar": x[lay.xbar:lay.t].reshape(N + 1, lay.nx),
        "beta": float(x[lay.beta]) if lay.pe else None,
    }
    return out


def solve_problem(problem: TubeProblem, K, Q, R, tol: float = 1e-8) -> TubeSolution:
    rep = conic.solve(problem.program, tol=tol)
    if not rep.optimal:
        return TubeSolution(None, None, None, None, None, np.nan, np.nan, rep)
    parts = unpack(problem, rep.x)
    cost = nominal_cost(parts["xbar"], parts["v"], K, Q, R, problem.P)
    obj = cost - (problem.gamma * parts["beta"] if parts["beta"] is not None else 0.0)
    return TubeSolution(parts["v"].copy(), parts["alpha"].copy(), parts["lam"].copy(),
                        parts["xbar"].copy(), parts["beta"], cost, obj, rep, tol=tol)


@dataclass
class Verification:
    ok: bool
    worst: dict


def verify_solution(m: UncertainModel, design: Design, problem: TubeProblem,
                    sol: TubeSolution, tol: float = 1e-8) -> Verification:
    """Re-check every constraint from model data, independent of the assembly."""
    shape, K = design.shape, np.atleast_2d(design.feedback.K)
    M, mu = problem.theta_set.M, problem.theta_set.mu
    N = problem.layout.N
    worst = {"initial": 0.0, "constraints": 0.0, "multiplier_eq": 0.0, "recursion": 0.0,
             "lambda_sign": 0.0, "nominal": 0.0}
    worst["initial"] = max(0.0, float(np.max(shape.T @ problem.x - sol.alpha[0])))
    for k in range(N + 1):
        vk = sol.v[k] if k < N else np.zeros(m.n_u)
        a_next = sol.alpha[k + 1] if k < N else sol.alpha[N]
        for j in range(shape.m):
            xj = shape.U[j] @ sol.alpha[k]
            uj = K @ xj + vk
            if m.F.shape[0]:
                worst["constraints"] = max(worst["constraints"],
                                           float(np.max(m.F @ xj + m.G @ uj - 1.0)))
            D, d = regressor(m, xj, uj)
            L = sol.lam[k, j]
            worst["multiplier_eq"] = max(worst["multiplier_eq"],
                                         float(np.max(np.abs(L @ M - shape.T @ D))))
            worst["recursion"] = max(worst["recursion"], float(np.max(
                L @ mu + shape.T @ d + shape.wbar - a_next)))
            worst["lambda_sign"] = max(worst["lambda_sign"], float(-np.min(L)))
    xs = simulate_nominal(m, problem.theta_bar, K, problem.x, sol.v)
    worst["nominal"] = float(np.max(np.abs(xs - sol.xbar)))
    scale = max(1.0, float(np.max(np.abs(sol.alpha))))
    bound = VERIFY_FACTOR * tol * scale
    ok = all(v <= bound for v in worst.values())
    return Verification(ok, worst)


def robust_tube_check(m: UncertainModel, design: Design, theta_set: ParamSet, W: HPolytope,
                      x, v, alpha, tol: float = 1e-7) -> bool:
    """Candidate tube check via parameter-set and disturbance vertices.

    Exact for the tube conditions because the vertex images are affine in the
    parameter and the disturbance enters additively through ``wbar``.
    """
    shape, K = design.shape, np.atleast_2d(design.feedback.K)
    v = np.atleast_2d(v)
    alpha = np.atleast_2d(alpha)
    N = v.shape[0]
    if np.any(shape.T @ np.asarray(x, float) > alpha[0] + tol):
        return False
    thetas = theta_vertices(theta_set.polytope)
    for k in range(N + 1):
        vk = v[k] if k < N else np.zeros(m.n_u)
        a_next = alpha[k + 1] if k < N else alpha[N]
        X = shape.vertices(alpha[k])
        for xj in X:
            uj = K @ xj + vk
            if m.F.shape[0] and np.any(m.F @ xj + m.G @ uj > 1.0 + tol):
                return False
            for th in thetas:
                A, B = assemble(m, th)
                if np.any(shape.T @ (A @ xj + B @ uj) + shape.wbar > a_next + tol):
                    return False
    return True


def warm_start(prev: TubeSolution):
    """Shifted candidate: ``v`` moves up one step with a zero tail, ``alpha`` repeats its end."""
    v = np.vstack([prev.v[1:], np.zeros((1, prev.v.shape[1]))])
    alpha = np.vstack([prev.alpha[1:], prev.alpha[-1:]])
    return v, alpha


@dataclass(frozen=True)
class PEAudit:
    beta1: float
    beta_star: float | None
    gap: float | None


def tube_pe_coefficient(m: UncertainModel, design: Design, v, alpha, N_u: int,
                        max_combos: int = 20000, rng=None) -> float:
    """Exact worst-case ``lambda_min(sum D'D)`` over vertex sequences of the tube."""
    shape, K = design.shape, np.atleast_2d(design.feedback.K)
    grams = []
    for k in range(N_u):
        X = shape.vertices(alpha[k])
        gk = []
        for xj in X:
            D, _ = regressor(m, xj, K @ xj + v[k])
            gk.append(D.T @ D)
        grams.append(np.array(gk))
    mm = shape.m
    if mm ** N_u <= max_combos:
        combos = itertools.product(range(mm), repeat=N_u)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        combos = [tuple(rng.integers(0, mm, N_u)) for _ in range(max_combos)]
        combos += [(j,) * N_u for j in range(mm)]
    best = np.inf
    for c in combos:
        S = sum(grams[k][j] for k, j in enumerate(c))
        best = min(best, float(np.linalg.eigvalsh(S)[0]))
    return best


def pe_linearization_audit(m: UncertainModel, design: Design, sol: TubeSolution,
                           N_u: int) -> PEAudit:
    beta1 = tube_pe_coefficient(m, design, sol.v, sol.alpha, N_u)
    if sol.beta is None:
        return PEAudit(beta1, None, None)
    return PEAudit(beta1, sol.beta, beta1 - sol.beta)


# --------------------------------------------------------------------------
# Receding-horizon controller

@dataclass
class ControllerState:
    estimator: SetEstimator
    theta_bar: np.ndarray
    xhat: np.ndarray | None = None
    uhat: np.ndarray | None = None
    v_prev: np.ndarray | None = None
    prev_solution: TubeSolution | None = None
    x_prev: np.ndarray | None = None
    u_prev: np.ndarray | None = None
    t: int = 0

    @property
    def theta_set(self) -> ParamSet:
        return self.estimator.theta


@dataclass
class StepRecord:
    t: int
    u: np.ndarray
    solution: TubeSolution
    status: str
    degraded: bool
    assembly_s: float
    solve_s: float
    P: np.ndarray
    gamma: float
    verification: Verification | None = None


class Controller:
    """Owns the controller state of one closed-loop run."""

    def __init__(self, m: UncertainModel, design: Design, W: HPolytope, cfg: ControllerConfig,
                 theta_bar0=None, theta_set0: ParamSet | None = None, verify: bool = False):
        self.m = m
        self.design = design
        self.W = W
        self.cfg = cfg
        self.K = np.atleast_2d(design.feedback.K)
        self.Q, self.R = cfg.weights(m.n_x, m.n_u)
        ps = theta_set0 if theta_set0 is not None else ParamSet.from_polytope(m.theta0)
        if theta_bar0 is None:
            theta_bar0 = chebyshev_center(ps.polytope)[0]
        window = cfg.window or cfg.N_u
        est = SetEstimator(ps, window=window, periodic=cfg.periodic)
        self.state = ControllerState(est, np.asarray(theta_bar0, float))
        self.verify = verify
        self._skeletons = {}

    def observe(self, x_t):
        """Identification and nominal-parameter update from the last transition."""
        st = self.state
        if st.x_prev is None or not self.cfg.estimate:
            return
        delta = unfalsified(self.m, self.W, st.x_prev, st.u_prev, x_t)
        D, _ = regressor(self.m, st.x_prev, st.u_prev)
        try:
            st.estimator.observe(delta, D)
        except EmptyIntersection as exc:
            raise EmptyParameterSet(str(exc)) from None
        st.theta_bar = project_nominal(st.theta_bar, st.theta_set)

    def step(self, x_t) -> StepRecord:
        m, cfg, st = self.m, self.cfg, self.state
        x_t = np.asarray(x_t, dtype=float)
        self.observe(x_t)
        P = lyapunov_weight(m, self.K, self.Q, self.R, st.theta_bar)
        if st.t == 0 or st.v_prev is None:
            xhat, uhat = initial_reference(m, self.K, self.Q, self.R, st.theta_bar, x_t, cfg.N, P)
        else:
            xhat, uhat = shift_reference(st.v_prev, st.theta_bar, x_t, self.K, cfg.N, m)
        gamma = cfg.gamma_at(st.t)
        assembly = solve_time = 0.0
        sol = None
        for it in range(max(1, cfg.pe_iterations if gamma > 0 else 1)):
            prob = build_problem(m, self.design, x_t, st.theta_set, st.theta_bar, P,
                                 xhat, uhat, cfg, gamma, self._skeletons.get(gamma > 0))
            self._skeletons[gamma > 0] = prob.skeleton
            assembly += prob.assembly_time
            cand = solve_problem(prob, self.K, self.Q, self.R, cfg.tol)
            solve_time += cand.report.wall_time
            if cand.status == conic.NUMERICAL_FAILURE and cfg.retry_tol > cfg.tol:
                # one retry at the relaxed loop tolerance before any fallback
                cand = solve_problem(prob, self.K, self.Q, self.R, cfg.retry_tol)
                solve_time += cand.report.wall_time
            if not cand.report.optimal:
                break
            sol = cand
            if it + 1 < cfg.pe_iterations:
                # re-linearize about the trajectory just optimized
                xhat = simulate_nominal(m, st.theta_bar, self.K, x_t, sol.v)
                uhat = xhat[:-1] @ self.K.T + sol.v
        degraded = False
        verification = None
        if sol is None:
            if st.t == 0:
                raise InfeasibleAtStart(f"tube problem not solvable at t = 0 ({cand.status})")
            # fall back on the shifted candidate of the previous step
            v, alpha = warm_start(st.prev_solution)
            sol = TubeSolution(v, alpha, None, None, None, np.nan, np.nan, cand.report, True)
            degraded = True
        elif self.verify:
            verification = verify_solution(m, self.design, prob, sol, sol.tol)
        u = self.K @ x_t + sol.v[0]
        st.v_prev = sol.v
        st.prev_solution = sol
        st.xhat, st.uhat = xhat, uhat
        st.x_prev, st.u_prev = x_t, u
        rec = StepRecord(st.t, u, sol, cand.report.status, degraded, assembly, solve_time, P,
                         gamma, verification)
        st.t += 1
        return rec


def control_step(controller: Controller, x_t):
    """One receding-horizon step: ``(u_t, solution, state)``."""
    rec = controller.step(x_t)
    return rec.u, rec.solution, controller.state
