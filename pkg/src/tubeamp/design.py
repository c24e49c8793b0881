"""Offline synthesis: tube shape T, gain K and contraction factor, vertex maps,
disturbance support vector and terminal-set existence."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import conic
from .geometry import (GeometryError, HPolytope, enumerate_vertices, minimal_rows,
                       support, chebyshev_center)
from .system import UncertainModel, assemble, closed_loop


class DesignError(RuntimeError):
    pass


class NoStabilizingGain(DesignError):
    pass


class NotContractive(DesignError):
    pass


class DegenerateVertex(DesignError):
    pass


class TerminalInfeasible(DesignError):
    pass


@dataclass(frozen=True)
class TubeShape:
    T: np.ndarray
    U: np.ndarray            # (m, n_x, n_alpha)
    active: tuple            # R_j, one sorted row tuple per vertex
    wbar: np.ndarray

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def n_alpha(self) -> int:
        return self.T.shape[0]

    def vertices(self, alpha) -> np.ndarray:
        """Vertices ``U_j alpha`` of ``{x : T x <= alpha}``."""
        return self.U @ np.asarray(alpha, dtype=float)


@dataclass(frozen=True)
class FeedbackDesign:
    K: np.ndarray
    lam: float


# --------------------------------------------------------------------------

def theta_vertices(theta_set: HPolytope) -> np.ndarray:
    return enumerate_vertices(theta_set).vertices


def lqr_gain(A, B, Q, R) -> np.ndarray:
    """Infinite-horizon discrete LQR gain with the ``u = K x`` sign convention."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    Q = np.atleast_2d(Q)
    R = np.atleast_2d(R)
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def _common_lyapunov(phis, tol=1e-9):
    """``P`` with ``P - Φ'PΦ ⪰ I`` for every Φ and ``I ⪯ P ⪯ tI`` (min t)."""
    n = phis[0].shape[0]
    ii, jj = conic.svec_index(n)
    nv = len(ii)
    basis = []
    for a, b in zip(ii, jj):
        E = np.zeros((n, n))
        E[a, b] = E[b, a] = 1.0
        basis.append(E)
    blocks = []
    # s = svec(P - Φ'PΦ - I) ⪰ 0  ->  b - A z with z = (p_entries, t)
    for phi in phis:
        cols = [conic.svec(E - phi.T @ E @ phi) for E in basis]
        A = -np.column_stack(cols + [np.zeros(conic.svec_size(n))])
        blocks.append(conic.block("psd", A, conic.svec(np.eye(n)), n))
    cols = [conic.svec(E) for E in basis]
    blocks.append(conic.block("psd", -np.column_stack(cols + [np.zeros(len(cols[0]))]),
                              -conic.svec(np.eye(n)), n))
    blocks.append(conic.block("psd", np.column_stack(cols + [-conic.svec(np.eye(n))]),
                              np.zeros(len(cols[0])), n))
    c = np.r_[np.zeros(nv), 1.0]
    rep = conic.solve(conic.program(c, blocks), tol=tol)
    if rep.status != conic.OPTIMAL:
        raise NoStabilizingGain(f"no common quadratic Lyapunov function ({rep.status})")
    P = np.zeros((n, n))
    P[ii, jj] = rep.x[:nv]
    P[jj, ii] = rep.x[:nv]
    return P


def fibonacci_directions(n_dirs: int, dim: int) -> np.ndarray:
    """Deterministic, roughly uniform unit directions (golden-angle spiral)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])[:max(2, n_dirs)]
    if dim == 2:
        ang = 2 * math.pi * np.arange(n_dirs) / n_dirs
        return np.column_stack([np.cos(ang), np.sin(ang)])
    # points on S^{dim-1}: spiral in the first three coordinates, Halton-like
    # offsets for the rest keep it deterministic
    golden = math.pi * (3 - math.sqrt(5))
    pts = []
    for i in range(n_dirs):
        z = 1 - 2 * (i + 0.5) / n_dirs
        r = math.sqrt(max(0.0, 1 - z * z))
        phi = golden * i
        v = np.zeros(dim)
        v[:3] = (r * math.cos(phi), r * math.sin(phi), z)
        for k in range(3, dim):
            v[k] = math.sin(golden * (k + 1) * (i + 1))
        pts.append(v / np.linalg.norm(v))
    return np.array(pts)


def synthesize_T(m: UncertainModel, K_init=None, n_dirs: int = 9, Q=None, R=None,
                 theta_set: HPolytope | None = None):
    """Tube shape from tangent hyperplanes to a robustly invariant ellipsoid.

    ``K_init`` defaults to the LQR gain of the model at the Chebyshev center
    of the parameter set.  Returns ``(T, P_tilde, K_init)``.
    """
    theta_set = m.theta0 if theta_set is None else theta_set
    Q = np.eye(m.n_x) if Q is None else np.atleast_2d(Q)
    R = np.eye(m.n_u) if R is None else np.atleast_2d(R)
    if K_init is None:
        center, _ = chebyshev_center(theta_set)
        K_init = lqr_gain(*assemble(m, center), Q, R)
    K_init = np.atleast_2d(K_init)
    phis = [closed_loop(m, th, K_init) for th in theta_vertices(theta_set)]
    for phi in phis:
        if np.max(np.abs(np.linalg.eigvals(phi))) >= 1:
            raise NoStabilizingGain("initial gain does not stabilize every vertex model")
    P = _common_lyapunov(phis)
    dirs = fibonacci_directions(n_dirs, m.n_x)
    rows = []
    for d in dirs:
        x = d / math.sqrt(d @ P @ d)     # point on {x'Px = 1}
        rows.append(P @ x)               # tangent plane (Px)'y <= 1
    T = np.array(rows)
    if not HPolytope(T, np.ones(len(T))).is_bounded():
        raise DesignError("tangent directions do not enclose the origin")
    return T, P, K_init


def vertex_maps(T):
    """``(U, R)`` with ``U_j alpha`` the j-th vertex of ``{x : T x <= alpha}``."""
    T = np.atleast_2d(np.asarray(T, dtype=float))
    n_alpha, n_x = T.shape
    X = HPolytope(T, np.ones(n_alpha))
    V = enumerate_vertices(X)
    U = np.zeros((len(V), n_x, n_alpha))
    for j, rows in enumerate(V.active):
        rows = list(rows)
        E = np.zeros((n_x, n_alpha))
        E[np.arange(n_x), rows] = 1.0
        U[j] = np.linalg.solve(T[rows], E)
    return U, tuple(tuple(r) for r in V.active)


def compute_wbar(T, W: HPolytope) -> np.ndarray:
    return np.array([support(W, row) for row in np.atleast_2d(T)])


def make_shape(T, W: HPolytope, check_minimal: bool = True) -> TubeShape:
    T = np.atleast_2d(np.asarray(T, dtype=float))
    X = HPolytope(T, np.ones(len(T)))
    if not X.contains(np.zeros(T.shape[1]), -1e-12):
        raise DesignError("origin must be interior to {x : T x <= 1}")
    if check_minimal and not np.all(minimal_rows(X)):
        raise DesignError("T has redundant rows")
    U, R = vertex_maps(T)
    return TubeShape(T, U, R, compute_wbar(T, W))


def min_lambda_gain(m: UncertainModel, T, theta_set: HPolytope | None = None) -> FeedbackDesign:
    """Gain minimizing the contraction factor of ``{x : T x <= 1}`` (one LP)."""
    theta_set = m.theta0 if theta_set is None else theta_set
    T = np.atleast_2d(np.asarray(T, dtype=float))
    X = enumerate_vertices(HPolytope(T, np.ones(len(T)))).vertices
    nk = m.n_u * m.n_x
    rows, rhs = [], []
    for th in theta_vertices(theta_set):
        A, B = assemble(m, th)
        TA, TB = T @ A, T @ B
        for x in X:
            # T_i A x + kron(T_i B, x) vec(K) - lam <= 0
            lin = np.einsum("ia,b->iab", TB, x).reshape(len(T), nk)
            rows.append(np.hstack([lin, -np.ones((len(T), 1))]))
            rhs.append(-TA @ x)
    A_ub = np.vstack(rows)
    b_ub = np.concatenate(rhs)
    c = np.r_[np.zeros(nk), 1.0]
    rep = conic.solve(conic.program(c, [conic.block("nonneg", A_ub, b_ub)]), tol=1e-10)
    if rep.status != conic.OPTIMAL:
        raise DesignError(f"contraction LP failed: {rep.status}")
    K = rep.x[:nk].reshape(m.n_u, m.n_x)
    lam = float(rep.x[nk])
    # report the contraction factor the gain actually achieves
    lam = max(lam, contraction_factor(m, T, K, theta_set))
    if lam >= 1:
        raise NotContractive(f"best contraction factor {lam:.4g} >= 1")
    return FeedbackDesign(K, max(lam, 0.0))


def contraction_factor(m: UncertainModel, T, K, theta_set: HPolytope | None = None) -> float:
    theta_set = m.theta0 if theta_set is None else theta_set
    T = np.atleast_2d(np.asarray(T, dtype=float))
    X = enumerate_vertices(HPolytope(T, np.ones(len(T)))).vertices
    worst = -np.inf
    for th in theta_vertices(theta_set):
        phi = closed_loop(m, th, K)
        worst = max(worst, float(np.max(T @ phi @ X.T)))
    return worst


def verify_contractive(m: UncertainModel, T, K, lam: float,
                       theta_set: HPolytope | None = None, tol: float = 1e-8) -> bool:
    """Per row and parameter vertex, an LP over ``{T x <= 1}`` bounds ``[T Φ]_i x``."""
    theta_set = m.theta0 if theta_set is None else theta_set
    T = np.atleast_2d(np.asarray(T, dtype=float))
    X = HPolytope(T, np.ones(len(T)))
    for th in theta_vertices(theta_set):
        TPhi = T @ closed_loop(m, th, K)
        for row in TPhi:
            if support(X, row) > lam + tol:
                return False
    return True


# --------------------------------------------------------------------------
# Tube coefficient blocks shared with the online problem

@dataclass(frozen=True)
class TubeCoefficients:
    """Per-vertex matrices of the tube recursion.

    For vertex j, with ``x = U_j alpha`` and ``u = K x + v``:
      ``T D(x, u)`` stacked row-major (a, i) -> ``Da[j] @ alpha + Dv @ v``
      ``T d(x, u)`` -> ``da[j] @ alpha + dv @ v``
      ``(F + G K) x + G v`` -> ``ca[j] @ alpha + G v``
    """

    Da: np.ndarray   # (m, n_alpha * p, n_alpha)
    Dv: np.ndarray   # (n_alpha * p, n_u)
    da: np.ndarray   # (m, n_alpha, n_alpha)
    dv: np.ndarray   # (n_alpha, n_u)
    ca: np.ndarray   # (m, n_c, n_alpha)
    G: np.ndarray


def tube_coefficients(m: UncertainModel, shape: TubeShape, K) -> TubeCoefficients:
    K = np.atleast_2d(K)
    T = shape.T
    p, na = m.p, shape.n_alpha
    TAK = np.stack([T @ (m.A[i] + m.B[i] @ K) for i in range(p + 1)])   # (p+1, na, n_x)
    TB = np.stack([T @ m.B[i] for i in range(p + 1)])                    # (p+1, na, n_u)
    Da = np.einsum("ian,jnb->jaib", TAK[1:], shape.U).reshape(shape.m, na * p, na)
    Dv = np.transpose(TB[1:], (1, 0, 2)).reshape(na * p, m.n_u)
    da = np.einsum("an,jnb->jab", TAK[0], shape.U)
    dv = TB[0]
    FGK = m.F + m.G @ K
    ca = np.einsum("cn,jnb->jcb", FGK, shape.U)
    return TubeCoefficients(Da, Dv, da, dv, ca, m.G)


def terminal_exists(m: UncertainModel, shape: TubeShape, K, theta_set: HPolytope | None = None,
                    alpha_max: float = 1e3):
    """Terminal offsets satisfying the terminal tube conditions.

    Among feasible vectors the one maximizing its smallest entry is returned
    (capped at ``alpha_max`` so the selection is always well-posed).
    """
    theta_set = m.theta0 if theta_set is None else theta_set
    M, mu = theta_set.normals, theta_set.offsets
    co = tube_coefficients(m, shape, K)
    na, mm, r, p = shape.n_alpha, shape.m, len(mu), m.p
    nl = na * r
    n = na + mm * nl + 1                   # alpha, Lambda_j, s
    ia = slice(0, na)
    s_col = n - 1
    eq_rows, eq_b, in_rows, in_b = [], [], [], []
    kronM = np.kron(np.eye(na), M.T)       # vec_r(Lambda M) in (a, i) order
    kronmu = np.kron(np.eye(na), mu[None, :])
    for j in range(mm):
        lam_cols = slice(na + j * nl, na + (j + 1) * nl)
        # Lambda_j M - T D(U_j a, K U_j a) = 0
        R = np.zeros((na * p, n))
        R[:, lam_cols] = kronM
        R[:, ia] = -co.Da[j]
        eq_rows.append(R)
        eq_b.append(np.zeros(na * p))
        # Lambda_j mu + T d(.) - alpha <= -wbar
        R = np.zeros((na, n))
        R[:, lam_cols] = kronmu
        R[:, ia] = co.da[j] - np.eye(na)
        in_rows.append(R)
        in_b.append(-shape.wbar)
        # (F + G K) U_j alpha <= 1
        R = np.zeros((co.ca.shape[1], n))
        R[:, ia] = co.ca[j]
        in_rows.append(R)
        in_b.append(np.ones(co.ca.shape[1]))
    # Lambda >= 0
    R = np.zeros((mm * nl, n))
    R[:, na:na + mm * nl] = -np.eye(mm * nl)
    in_rows.append(R)
    in_b.append(np.zeros(mm * nl))
    # s <= alpha_i, alpha_i <= alpha_max
    R = np.zeros((na, n))
    R[:, ia] = -np.eye(na)
    R[:, s_col] = 1.0
    in_rows.append(R)
    in_b.append(np.zeros(na))
    R = np.zeros((na, n))
    R[:, ia] = np.eye(na)
    in_rows.append(R)
    in_b.append(np.full(na, alpha_max))
    c = np.zeros(n)
    c[s_col] = -1.0
    blocks = [conic.block("zero", sp.csr_matrix(np.vstack(eq_rows)), np.concatenate(eq_b)),
              conic.block("nonneg", sp.csr_matrix(np.vstack(in_rows)), np.concatenate(in_b))]
    rep = conic.solve(conic.program(c, blocks), tol=1e-9)
    if rep.status != conic.OPTIMAL:
        raise TerminalInfeasible(f"no terminal offsets exist ({rep.status})")
    return rep.x[ia].copy()


def check_invariant(m: UncertainModel, shape: TubeShape, K, alpha, theta_set: HPolytope,
                    W: HPolytope, tol: float = 1e-7) -> bool:
    """Brute force: every vertex image under every model and disturbance vertex stays inside."""
    V = enumerate_vertices(HPolytope(shape.T, alpha)).vertices
    Wv = enumerate_vertices(W).vertices
    for th in theta_vertices(theta_set):
        phi = closed_loop(m, th, K)
        img = (phi @ V.T).T
        for w in Wv:
            if np.any(shape.T @ (img + w).T > np.asarray(alpha)[:, None] + tol):
                return False
    return True


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Design:
    shape: TubeShape
    feedback: FeedbackDesign
    alpha_terminal: np.ndarray | None = None
    P_tilde: np.ndarray | None = None


def synthesize(m: UncertainModel, W: HPolytope, n_dirs: int = 9, Q=None, R=None,
               K_init=None) -> Design:
    """Full offline stage: T, U_j, wbar, K, lambda and a terminal certificate."""
    T, P, _ = synthesize_T(m, K_init, n_dirs, Q, R)
    shape = make_shape(T, W)
    fb = min_lambda_gain(m, shape.T)
    alpha_N = terminal_exists(m, shape, fb.K)
    return Design(shape, fb, alpha_N, P)


def design_to_dict(d: Design) -> dict:
    return {
        "T": d.shape.T.tolist(),
        "U": d.shape.U.tolist(),
        "R": [list(r) for r in d.shape.active],
        "wbar": d.shape.wbar.tolist(),
        "K": d.feedback.K.tolist(),
        "lambda": d.feedback.lam,
        "alpha_terminal": None if d.alpha_terminal is None else d.alpha_terminal.tolist(),
        "P_tilde": None if d.P_tilde is None else d.P_tilde.tolist(),
    }


def design_from_dict(data: dict) -> Design:
    shape = TubeShape(np.array(data["T"], dtype=float), np.array(data["U"], dtype=float),
                      tuple(tuple(r) for r in data["R"]), np.array(data["wbar"], dtype=float))
    fb = FeedbackDesign(np.atleast_2d(np.array(data["K"], dtype=float)), float(data["lambda"]))
    aN = data.get("alpha_terminal")
    Pt = data.get("P_tilde")
    return Design(shape, fb, None if aN is None else np.array(aN, dtype=float),
                  None if Pt is None else np.array(Pt, dtype=float))


def save_design(d: Design, path) -> None:
    Path(path).write_text(json.dumps(design_to_dict(d), indent=2))


def load_design(path) -> Design:
    return design_from_dict(json.loads(Path(path).read_text()))
