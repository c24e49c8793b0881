"""Polytopes in halfspace and vertex form, and the LP primitives on them."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, QhullError

from . import conic

TOL = 1e-9
MAX_ENUM_DIM = 4


class GeometryError(ValueError):
    pass


class Infeasible(GeometryError):
    pass


class Unbounded(GeometryError):
    pass


class DimensionTooLarge(GeometryError):
    pass


@dataclass(frozen=True)
class HPolytope:
    """``{x : normals @ x <= offsets}``."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = np.asarray(self.offsets, dtype=float).ravel()
        if A.shape[0] != b.shape[0]:
            raise GeometryError(
                f"{A.shape[0]} normals but {b.shape[0]} offsets")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "normals", A)
        object.__setattr__(self, "offsets", b)

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def rows(self) -> int:
        return self.normals.shape[0]

    def contains(self, x, tol: float = TOL) -> bool:
        return bool(np.all(self.normals @ np.asarray(x, dtype=float) <= self.offsets + tol))

    def intersect(self, other: "HPolytope") -> "HPolytope":
        return HPolytope(np.vstack([self.normals, other.normals]),
                         np.concatenate([self.offsets, other.offsets]))

    def scaled(self, s: float) -> "HPolytope":
        return HPolytope(self.normals, s * self.offsets)

    def translated(self, c) -> "HPolytope":
        return HPolytope(self.normals, self.offsets + self.normals @ np.asarray(c, dtype=float))

    def is_empty(self) -> bool:
        return feasible_point(self) is None

    def is_bounded(self) -> bool:
        for g in np.vstack([np.eye(self.dim), -np.eye(self.dim)]):
            try:
                support(self, g)
            except Unbounded:
                return False
        return True


@dataclass(frozen=True)
class VPolytope:
    vertices: np.ndarray
    active: tuple = field(default=(), compare=False)  # one row subset per vertex

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        V.setflags(write=False)
        object.__setattr__(self, "vertices", V)

    def __len__(self):
        return self.vertices.shape[0]


def box(lower, upper) -> HPolytope:
    lower = np.asarray(lower, dtype=float).ravel()
    upper = np.asarray(upper, dtype=float).ravel()
    n = len(lower)
    return HPolytope(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))


def inf_ball(radius: float, n: int, center=None) -> HPolytope:
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    return box(c - radius, c + radius)


def normalize_rows(P: HPolytope) -> HPolytope:
    """Unit-norm normals; zero rows are dropped (they are 0 <= b constraints)."""
    norms = np.linalg.norm(P.normals, axis=1)
    keep = norms > 1e-12
    if np.any(~keep) and np.any(P.offsets[~keep] < -TOL):
        raise Infeasible("zero row with negative offset")
    return HPolytope(P.normals[keep] / norms[keep, None], P.offsets[keep] / norms[keep])


def _lp(c, A, b, tol=conic.DEFAULT_TOL):
    """max c'x s.t. A x <= b through the conic interface."""
    prog = conic.program(-np.asarray(c, dtype=float),
                         [conic.block("nonneg", sp.csr_matrix(A), b)])
    return conic.solve(prog, tol=min(tol, 1e-10))


def _polish(A, b, x, g):
    """Snap an interior-point optimum onto its active face.

    Rows within a loose slack of the IPM point are treated as equalities and
    the point is moved by the minimum-norm correction; the result is kept only
    when it is feasible to machine precision and no worse in objective.
    """
    scale = 1.0 + np.abs(b)
    slack = b - A @ x
    act = slack <= 1e-6 * scale
    if not np.any(act):
        return x
    Aa = A[act]
    dx, *_ = np.linalg.lstsq(Aa, b[act] - Aa @ x, rcond=None)
    y = x + dx
    if np.all(A @ y <= b + 1e-12 * scale) and g @ y >= g @ x - 1e-9 * (1 + abs(g @ x)):
        return y
    return x


@dataclass
class SupportResult:
    value: float
    point: np.ndarray
    dual: np.ndarray


def support_full(P: HPolytope, g) -> SupportResult:
    g = np.asarray(g, dtype=float).ravel()
    try:
        bounds = _box_bounds(P) if P.rows == 2 * P.dim else None
    except Unbounded:
        bounds = None
    if bounds is not None and np.all(bounds[0] <= bounds[1]):
        # closed form for boxes: pick the bound each coordinate of g points to
        x = np.where(g > 0, bounds[1], bounds[0])
        return SupportResult(float(g @ x), x, None)
    rep = _lp(g, P.normals, P.offsets)
    if rep.status == conic.INFEASIBLE:
        raise Infeasible("support of an empty polytope")
    if rep.status == conic.UNBOUNDED:
        raise Unbounded(f"polytope unbounded in direction {g}")
    if rep.status != conic.OPTIMAL:
        raise GeometryError(f"support LP failed: {rep.status}")
    x = _polish(P.normals, P.offsets, rep.x, g)
    return SupportResult(float(g @ x), x, rep.dual)


def support(P: HPolytope, g) -> float:
    """``max g'x`` over ``P``."""
    return support_full(P, g).value


def feasible_point(P: HPolytope):
    """A point of ``P`` or ``None`` when empty (one feasibility LP)."""
    n = P.dim
    # max s s.t. A x + s 1 <= b, s <= 1  (s >= 0 at optimum iff nonempty)
    A = np.hstack([P.normals, np.ones((P.rows, 1))])
    A = np.vstack([A, np.r_[np.zeros(n), 1.0]])
    b = np.r_[P.offsets, 1.0]
    c = np.r_[np.zeros(n), 1.0]
    rep = _lp(c, A, b)
    if rep.status == conic.UNBOUNDED:  # cannot happen with the cap, kept for safety
        return np.zeros(n)
    if rep.status != conic.OPTIMAL or rep.x[-1] < -TOL:
        return None
    return rep.x[:n]


@dataclass
class Containment:
    contained: bool
    multipliers: np.ndarray  # one row H_i per outer row (nan where infeasible)
    margins: np.ndarray      # outer offset minus H_i @ inner offsets


def contains_polytope(outer_normals, outer_offsets, inner: HPolytope,
                      tol: float = 1e-8) -> Containment:
    """Farkas-style inclusion test ``inner ⊆ {x : outer_normals x <= outer_offsets}``.

    For each outer row solve ``min H b_in  s.t.  H A_in = a_i, H >= 0``.
    """
    outer_normals = np.atleast_2d(np.asarray(outer_normals, dtype=float))
    outer_offsets = np.asarray(outer_offsets, dtype=float).ravel()
    if inner.is_empty():
        raise Infeasible("inner polytope is empty")
    q = inner.rows
    H = np.full((outer_normals.shape[0], q), np.nan)
    margins = np.full(outer_normals.shape[0], -np.inf)
    eq = sp.csr_matrix(inner.normals.T)
    nonneg = conic.block("nonneg", -sp.eye(q), np.zeros(q))
    for i, a in enumerate(outer_normals):
        prog = conic.program(inner.offsets, [conic.block("zero", eq, a), nonneg])
        rep = conic.solve(prog, tol=1e-10)
        if rep.status == conic.OPTIMAL:
            h = np.maximum(rep.x, 0.0)
            H[i] = h
            # the multiplier bound is the support value; polish it through the dual
            val = support(inner, a)
            margins[i] = outer_offsets[i] - min(val, float(h @ inner.offsets))
    contained = bool(np.all(margins >= -tol))
    return Containment(contained, H, margins)


def enumerate_vertices(P: HPolytope, tol: float = TOL) -> VPolytope:
    """All vertices by brute force over n-row subsets, in lexicographic order.

    Each vertex carries the lexicographically first row subset that produced it.
    """
    n = P.dim
    if n > MAX_ENUM_DIM:
        raise DimensionTooLarge(f"vertex enumeration limited to dim <= {MAX_ENUM_DIM}")
    if P.is_empty():
        raise Infeasible("cannot enumerate vertices of an empty polytope")
    if not P.is_bounded():
        raise Unbounded("cannot enumerate vertices of an unbounded polytope")
    A, b = P.normals, P.offsets
    scale = 1.0 + np.abs(b)
    verts, active = [], []
    for rows in itertools.combinations(range(P.rows), n):
        sub = A[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12 * max(1.0, np.prod(np.linalg.norm(sub, axis=1))):
            continue
        x = np.linalg.solve(sub, b[list(rows)])
        if np.any(A @ x > b + tol * scale):
            continue
        if any(np.max(np.abs(x - v)) <= tol * (1 + np.max(np.abs(v))) for v in verts):
            continue
        verts.append(x)
        active.append(rows)
    if not verts:
        # bounded nonempty set always has a vertex; only lower-dimensional
        # degenerate sets can slip through the determinant filter
        raise GeometryError("no vertices found (degenerate polytope)")
    return VPolytope(np.array(verts), tuple(active))


def vertex_support(V, g) -> float:
    return float(np.max(np.asarray(V) @ np.asarray(g, dtype=float)))


def _box_bounds(P: HPolytope):
    """Per-coordinate bounds when every row is axis-aligned, else None."""
    A, b = P.normals, P.offsets
    nz = np.abs(A) > 0
    if not np.all(nz.sum(axis=1) == 1):
        return None
    n = P.dim
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for a, bi, mask in zip(A, b, nz):
        j = int(np.flatnonzero(mask)[0])
        if a[j] > 0:
            hi[j] = min(hi[j], bi / a[j])
        else:
            lo[j] = max(lo[j], bi / a[j])
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise Unbounded("axis-aligned set missing a bound")
    return lo, hi


def volume(P: HPolytope) -> float:
    """Exact volume; products of side lengths for axis-aligned boxes."""
    bounds = _box_bounds(P)
    if bounds is not None:
        lo, hi = bounds
        if np.any(hi < lo - TOL):
            raise Infeasible("empty box")
        return float(np.prod(np.maximum(hi - lo, 0.0)))
    V = enumerate_vertices(P).vertices
    return hull_volume(V)


def hull_volume(V) -> float:
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = V.shape[1]
    if n == 1:
        return float(V.max() - V.min())
    if V.shape[0] <= n:
        return 0.0
    try:
        return float(ConvexHull(V).volume)
    except QhullError:
        return 0.0  # flat point set


def chebyshev_center(P: HPolytope):
    """Center and radius of the largest inscribed ball (one LP).

    The center is not unique in general; the solver's answer is returned.
    """
    norms = np.linalg.norm(P.normals, axis=1)
    n = P.dim
    A = np.hstack([P.normals, norms[:, None]])
    A = np.vstack([A, np.r_[np.zeros(n), -1.0]])  # r >= 0
    b = np.r_[P.offsets, 0.0]
    rep = _lp(np.r_[np.zeros(n), 1.0], A, b)
    if rep.status == conic.INFEASIBLE:
        raise Infeasible("Chebyshev center of an empty polytope")
    if rep.status == conic.UNBOUNDED:
        raise Unbounded("polytope contains arbitrarily large balls")
    if rep.status != conic.OPTIMAL:
        raise GeometryError(f"Chebyshev LP failed: {rep.status}")
    return rep.x[:n], float(rep.x[n])


def minimal_rows(P: HPolytope, tol: float = 1e-7) -> np.ndarray:
    """Mask of rows active at some enumerated vertex (non-redundancy certificate)."""
    V = enumerate_vertices(P).vertices
    slack = P.offsets[:, None] - P.normals @ V.T
    return np.any(np.abs(slack) <= tol * (1 + np.abs(P.offsets[:, None])), axis=1)


def enclosing_radius(V, center=None) -> float:
    """Radius of the smallest Euclidean ball containing the points (SOCP)."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    m, n = V.shape
    if center is not None:
        return float(np.max(np.linalg.norm(V - center, axis=1)))
    # variables (c, r): min r  s.t.  ||v_i - c|| <= r
    blocks = []
    for v in V:
        A = np.zeros((n + 1, n + 1))
        A[0, n] = -1.0
        A[1:, :n] = np.eye(n)
        blocks.append(conic.block("soc", A, np.r_[0.0, v]))
    rep = conic.solve(conic.program(np.r_[np.zeros(n), 1.0], blocks), tol=1e-10)
    if rep.status != conic.OPTIMAL:
        raise GeometryError(f"enclosing-ball SOCP failed: {rep.status}")
    return float(rep.x[n])
