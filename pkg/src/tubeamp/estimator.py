"""Set-membership parameter identification with fixed-complexity sets."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .geometry import (HPolytope, Infeasible, Unbounded, GeometryError, support,
                       support_full, volume, feasible_point)
from .system import UncertainModel, regressor

BOUNDARY_TOL = 1e-9
EMPTY_TOL = 1e-9

log = logging.getLogger(__name__)


class EmptyIntersection(RuntimeError):
    """Data inconsistent with the model and disturbance bounds."""


@dataclass(frozen=True)
class ParamSet:
    """``{theta : M theta <= mu}`` with fixed unit-norm directions ``M``."""

    M: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        mu = np.asarray(self.mu, dtype=float).ravel()
        if M.shape[0] != mu.shape[0]:
            raise ValueError("direction matrix and offsets disagree in row count")
        M.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def from_polytope(cls, P: HPolytope, normalize: bool = True) -> "ParamSet":
        M, mu = P.normals, P.offsets
        if normalize:
            n = np.linalg.norm(M, axis=1)
            M, mu = M / n[:, None], mu / n
        ps = cls(M, mu)
        if not ps.polytope.is_bounded():
            raise ValueError("parameter directions do not bound the set")
        return ps

    @property
    def polytope(self) -> HPolytope:
        return HPolytope(self.M, self.mu)

    @property
    def p(self) -> int:
        return self.M.shape[1]

    def contains(self, theta, tol: float = 1e-8) -> bool:
        return bool(np.all(self.M @ np.asarray(theta, dtype=float) <= self.mu + tol))

    def volume(self) -> float:
        return volume(self.polytope)

    def diameter(self) -> float:
        """Largest extent along the set's own directions (width over +/- pairs)."""
        widths = []
        for i, row in enumerate(self.M):
            j = np.flatnonzero(np.all(np.isclose(self.M, -row), axis=1))
            if len(j):
                widths.append(self.mu[i] + self.mu[j[0]])
            else:
                widths.append(self.mu[i] + support(self.polytope, -row))
        return float(max(widths))


@dataclass(frozen=True)
class UnfalsifiedSet:
    """Parameters consistent with one observed transition.

    Plain case: ``{theta : P theta <= q}``.  Noisy case: convex hull of the
    component sets ``{P_j theta <= q_j}``, one per noise vertex.
    """

    P: np.ndarray
    q: np.ndarray
    components: tuple = ()

    @property
    def noisy(self) -> bool:
        return bool(self.components)

    def contains(self, theta, tol: float = 1e-8) -> bool:
        theta = np.asarray(theta, dtype=float)
        if not self.noisy:
            return bool(np.all(self.P @ theta <= self.q + tol))
        # membership in a hull of polyhedra: one feasibility LP in the lifted space
        return _hull_contains(self.components, theta, tol)

    def support(self, g) -> float:
        """Support function; for the hull it is the max over components."""
        if not self.noisy:
            return support(HPolytope(self.P, self.q), g)
        vals = []
        for Pj, qj in self.components:
            try:
                vals.append(support(HPolytope(Pj, qj), g))
            except Infeasible:
                continue
        if not vals:
            raise Infeasible("every component of the hull is empty")
        return max(vals)


def unfalsified(m: UncertainModel, W: HPolytope, x_prev, u_prev, x_now) -> UnfalsifiedSet:
    D, d = regressor(m, x_prev, u_prev)
    x_now = np.asarray(x_now, dtype=float)
    P = -W.normals @ D
    q = W.offsets + W.normals @ (d - x_now)
    return UnfalsifiedSet(P, q)


def minkowski_sum(A: HPolytope, V) -> HPolytope:
    """``A ⊕ Co(V)`` for an H-polytope ``A`` whose normals also bound the sum.

    Exact when both summands share facet directions (boxes); otherwise the
    result is the tightest outer bound in ``A``'s directions.
    """
    V = np.atleast_2d(V)
    return HPolytope(A.normals, A.offsets + np.max(A.normals @ V.T, axis=1))


def unfalsified_noisy(m: UncertainModel, W: HPolytope, S: HPolytope, S_vertices,
                      y_prev, u_prev, y_now) -> UnfalsifiedSet:
    """Hull of the per-noise-vertex sets built with ``W ⊕ S``."""
    WS = minkowski_sum(W, S_vertices)
    y_prev = np.asarray(y_prev, dtype=float)
    comps = []
    for s in np.atleast_2d(S_vertices):
        D, d = regressor(m, y_prev - s, u_prev)
        comps.append((-WS.normals @ D, WS.offsets + WS.normals @ (d - np.asarray(y_now, float))))
    P = np.vstack([c[0] for c in comps])
    q = np.concatenate([c[1] for c in comps])
    return UnfalsifiedSet(P, q, tuple(comps))


# --------------------------------------------------------------------------
# Fixed-complexity update

def _lifted_blocks(deltas, p, n_extra_before):
    """Constraint rows for ``theta ∈ ∩ Co{Δ^(j)}`` in a lifted variable space.

    For each noisy set: ``theta = sum_j th_j``, ``P_j th_j <= lam_j q_j``,
    ``sum lam_j = 1``, ``lam >= 0``.  Returns (eq_rows, eq_rhs, in_rows, in_rhs,
    total columns) on the variable vector ``[theta, lifted...]``.
    """
    eqA, eqb, inA, inb = [], [], [], []
    widths = []
    for dl in deltas:
        if dl.noisy:
            h = len(dl.components)
            widths.append(h * (p + 1))
    n = p + sum(widths)
    col = p
    for dl in deltas:
        if not dl.noisy:
            R = np.zeros((len(dl.q), n))
            R[:, :p] = dl.P
            inA.append(R)
            inb.append(dl.q)
            continue
        h = len(dl.components)
        R = np.zeros((p, n))
        R[:, :p] = -np.eye(p)
        for j in range(h):
            R[:, col + j * p: col + (j + 1) * p] = np.eye(p)
        eqA.append(R)
        eqb.append(np.zeros(p))
        lam0 = col + h * p
        R = np.zeros((1, n))
        R[0, lam0:lam0 + h] = 1.0
        eqA.append(R)
        eqb.append(np.ones(1))
        for j, (Pj, qj) in enumerate(dl.components):
            R = np.zeros((len(qj), n))
            R[:, col + j * p: col + (j + 1) * p] = Pj
            R[:, lam0 + j] = -qj
            inA.append(R)
            inb.append(np.zeros(len(qj)))
        R = np.zeros((h, n))
        R[:, lam0:lam0 + h] = -np.eye(h)
        inA.append(R)
        inb.append(np.zeros(h))
        col += h * (p + 1)
    return eqA, eqb, inA, inb, n


def _hull_contains(components, theta, tol):
    dl = UnfalsifiedSet(np.zeros((0, len(theta))), np.zeros(0), tuple(components))
    p = len(theta)
    eqA, eqb, inA, inb, n = _lifted_blocks([dl], p, 0)
    fix = np.zeros((p, n))
    fix[:, :p] = np.eye(p)
    # relax the component inequalities by tol through a slack-free rhs shift
    blocks = [conic.block("zero", np.vstack(eqA + [fix]), np.concatenate(eqb + [theta])),
              conic.block("nonneg", np.vstack(inA), np.concatenate(inb) + tol)]
    rep = conic.solve(conic.program(np.zeros(n), blocks), tol=1e-10)
    return rep.status == conic.OPTIMAL


def intersection_support(theta_set: ParamSet, deltas, g):
    """``max g'theta`` over ``Θ ∩ Δ_1 ∩ ... ∩ Δ_k`` (one LP, lifted for hulls).

    A set that collapses to a point can look infeasible by rounding; the LP is
    retried once with every offset relaxed by ``EMPTY_TOL`` before the
    intersection is declared empty.
    """
    g = np.asarray(g, dtype=float)
    p = theta_set.p
    if not any(dl.noisy for dl in deltas):
        A = np.vstack([theta_set.M] + [dl.P for dl in deltas])
        b = np.concatenate([theta_set.mu] + [dl.q for dl in deltas])
        failed = False
        for relax in (0.0, EMPTY_TOL):
            try:
                return support_full(HPolytope(A, b + relax), g).value
            except Infeasible:
                failed = False
            except Unbounded:
                raise
            except GeometryError:
                failed = True
        if not failed:
            raise EmptyIntersection("parameter set and unfalsified sets do not intersect")
        log.warning("update LP failed numerically; keeping the parameter-set support")
        return support_full(theta_set.polytope, g).value
    eqA, eqb, inA, inb, n = _lifted_blocks(deltas, p, 0)
    R = np.zeros((len(theta_set.mu), n))
    R[:, :p] = theta_set.M
    inA.append(R)
    inb.append(theta_set.mu)
    c = np.zeros(n)
    c[:p] = -g
    for relax in (0.0, EMPTY_TOL):
        blocks = [conic.block("nonneg", np.vstack(inA), np.concatenate(inb) + relax)]
        if eqA:
            blocks.insert(0, conic.block("zero", np.vstack(eqA), np.concatenate(eqb)))
        rep = conic.solve(conic.program(c, blocks), tol=1e-10)
        if rep.status == conic.OPTIMAL:
            # the dual objective bounds the maximum from above; keep the larger
            # of the two so rounding never cuts into the true set
            b_all = np.concatenate([blk.b for blk in blocks])
            return float(max(g @ rep.x[:p], b_all @ rep.dual))
    if rep.status == conic.INFEASIBLE:
        raise EmptyIntersection("parameter set and unfalsified sets do not intersect")
    # Degenerate (near-singleton) sets can defeat the interior-point solver.
    # The support of Θ alone is a sound, if looser, answer.
    log.warning("lifted update LP returned %s; keeping the parameter-set support", rep.status)
    return support_full(theta_set.polytope, g).value


def outer_approximation(delta: UnfalsifiedSet, M) -> UnfalsifiedSet:
    """Halfspace bound of a hull set in the directions ``M`` (support oracle).

    Raises ``Unbounded`` when a component set is unbounded along some row,
    which is the generic situation when ``p`` exceeds the state dimension.
    """
    M = np.atleast_2d(M)
    return UnfalsifiedSet(M, np.array([delta.support(row) for row in M]))


def update(theta_set: ParamSet, deltas, noisy: str = "lifted") -> ParamSet:
    """Smallest ``{M theta <= mu}`` containing ``Θ ∩ (window of Δ)``.

    Hull-type sets are handled exactly in a lifted LP (``noisy="lifted"``) or
    replaced by their outer bounds along ``M`` first (``noisy="outer"``).
    """
    deltas = list(deltas)
    if not deltas:
        return theta_set
    if noisy == "outer":
        deltas = [outer_approximation(dl, theta_set.M) if dl.noisy else dl for dl in deltas]
    elif noisy != "lifted":
        raise ValueError(f"unknown noisy-update mode {noisy!r}")
    mu = np.array([intersection_support(theta_set, deltas, row) for row in theta_set.M])
    return ParamSet(theta_set.M, np.minimum(mu, theta_set.mu))


def update_multiplier(theta_set: ParamSet, deltas) -> ParamSet:
    """Same update through the inclusion-multiplier LPs (plain sets only).

    ``[mu]_i = min H b  s.t.  H A = [M]_i, H >= 0`` with ``A, b`` the stacked
    parameter-set and unfalsified-set rows.
    """
    deltas = list(deltas)
    if any(dl.noisy for dl in deltas):
        raise ValueError("multiplier form needs halfspace unfalsified sets")
    A = np.vstack([theta_set.M] + [dl.P for dl in deltas])
    b = np.concatenate([theta_set.mu] + [dl.q for dl in deltas])
    q = len(b)
    eq = sp.csr_matrix(A.T)
    nonneg = conic.block("nonneg", -sp.eye(q), np.zeros(q))
    mu = []
    for row in theta_set.M:
        rep = conic.solve(conic.program(b, [conic.block("zero", eq, row), nonneg]), tol=1e-10)
        if rep.status == conic.UNBOUNDED:
            raise EmptyIntersection("multiplier LP unbounded: empty intersection")
        if rep.status != conic.OPTIMAL:
            raise GeometryError(f"multiplier LP failed: {rep.status}")
        mu.append(rep.objective)
    return ParamSet(theta_set.M, np.minimum(np.array(mu), theta_set.mu))


def project_nominal(theta_prev, theta_set: ParamSet, tol: float = 1e-10):
    """Euclidean projection onto the parameter set (SOCP)."""
    theta_prev = np.asarray(theta_prev, dtype=float)
    if theta_set.contains(theta_prev, tol):
        return theta_prev.copy()
    p = theta_set.p
    # min t  s.t.  ||theta - theta_prev|| <= t,  M theta <= mu
    soc = np.zeros((p + 1, p + 1))
    soc[0, p] = -1.0
    soc[1:, :p] = -np.eye(p)
    blocks = [conic.block("nonneg", np.hstack([theta_set.M, np.zeros((len(theta_set.mu), 1))]),
                          theta_set.mu),
              conic.block("soc", soc, np.r_[0.0, -theta_prev])]
    prog = conic.program(np.r_[np.zeros(p), 1.0], blocks)
    # tight first; the face step below restores accuracy after a looser retry
    for solve_tol in (1e-11, 1e-8):
        rep = conic.solve(prog, tol=solve_tol)
        if rep.status != conic.NUMERICAL_FAILURE:
            break
    if rep.status == conic.INFEASIBLE:
        raise EmptyIntersection("projection onto an empty parameter set")
    if rep.status != conic.OPTIMAL:
        raise GeometryError(f"projection failed: {rep.status}")
    theta = rep.x[:p]
    act = theta_set.M @ theta >= theta_set.mu - 1e-7
    if np.any(act):
        Ma = theta_set.M[act]
        # exact projection of theta_prev onto the active face, kept when feasible;
        # otherwise the solver point is snapped onto the face
        face = theta_prev - np.linalg.lstsq(Ma, Ma @ theta_prev - theta_set.mu[act], rcond=None)[0]
        if theta_set.contains(face, 1e-12):
            theta = face
        else:
            theta = theta - np.linalg.lstsq(Ma, Ma @ theta - theta_set.mu[act], rcond=None)[0]
        theta = np.where(np.abs(theta) < 1e-15, 0.0, theta)
    return theta


@dataclass(frozen=True)
class PEWitness:
    beta1: float
    tau: float
    window: int


def pe_coefficient(D_list) -> PEWitness:
    D_list = [np.atleast_2d(D) for D in D_list]
    if not D_list:
        return PEWitness(0.0, 0.0, 0)
    G = sum(D.T @ D for D in D_list)
    beta1 = float(np.linalg.eigvalsh(0.5 * (G + G.T))[0])
    tau = max(float(np.linalg.norm(D, 2)) for D in D_list)
    return PEWitness(max(beta1, 0.0), tau, len(D_list))


def exact_intersection_oracle(theta0: HPolytope, deltas, reduce: bool = False) -> HPolytope:
    """``Θ_0 ∩ Δ_1 ∩ ... ∩ Δ_t`` as stacked halfspaces (plain sets only).

    With ``reduce`` redundant rows are removed by one LP per row.
    """
    A = [theta0.normals] + [dl.P for dl in deltas]
    b = [theta0.offsets] + [dl.q for dl in deltas]
    P = HPolytope(np.vstack(A), np.concatenate(b))
    if reduce:
        P = remove_redundant(P)
    return P


def remove_redundant(P: HPolytope, tol: float = 1e-9) -> HPolytope:
    keep = np.ones(P.rows, dtype=bool)
    for i in range(P.rows):
        keep[i] = False
        others = HPolytope(P.normals[keep], P.offsets[keep])
        try:
            redundant = support(others, P.normals[i]) <= P.offsets[i] + tol
        except Unbounded:
            redundant = False
        keep[i] = not redundant
    return HPolytope(P.normals[keep], P.offsets[keep])


# --------------------------------------------------------------------------

@dataclass
class SetEstimator:
    """Sequential identification state: current set, window buffer, regressors.

    ``periodic`` applies the window update only at multiples of ``window``;
    otherwise every step intersects the previous set with the last ``window``
    unfalsified sets.
    """

    theta: ParamSet
    window: int = 1
    periodic: bool = False
    noisy: str = "lifted"
    t: int = 0
    deltas: deque = field(default_factory=deque)
    regressors: deque = field(default_factory=deque)
    vol0: float = field(default=float("nan"))

    def __post_init__(self):
        self.deltas = deque(self.deltas, maxlen=self.window)
        self.regressors = deque(self.regressors, maxlen=self.window)
        if not np.isfinite(self.vol0):
            self.vol0 = self.theta.volume()

    def observe(self, delta: UnfalsifiedSet, D=None) -> ParamSet:
        self.t += 1
        self.deltas.append(delta)
        if D is not None:
            self.regressors.append(np.atleast_2d(D))
        if self.periodic:
            if self.t % self.window == 0:
                self.theta = update(self.theta, list(self.deltas), self.noisy)
                self.deltas.clear()
        else:
            self.theta = update(self.theta, list(self.deltas), self.noisy)
        return self.theta

    def volume_pct(self) -> float:
        if self.vol0 <= 0:
            return 100.0
        return 100.0 * self.theta.volume() / self.vol0

    def trailing_pe(self) -> PEWitness:
        return pe_coefficient(list(self.regressors))


def update_periodic(estimator: SetEstimator, delta: UnfalsifiedSet, D=None) -> ParamSet:
    """Buffer ``delta``; the set only changes at multiples of the window length."""
    if not estimator.periodic:
        raise ValueError("estimator is not in periodic mode")
    return estimator.observe(delta, D)
