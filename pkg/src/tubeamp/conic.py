"""Backend-neutral conic programs.

A program is ``min c'x`` subject to ``b - A x`` lying in a product of cones.
Supported cone kinds are ``zero`` (equalities), ``nonneg``, ``soc`` and
``psd``.  A ``psd`` block of order d carries d(d+1)/2 rows holding the
symmetric matrix in triangular vectorized form: entries (0,0), (0,1), (1,1),
(0,2), ... with off-diagonal entries scaled by sqrt(2).

Every LP, QP and SDP in the package goes through :func:`solve`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

import clarabel

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL_FAILURE = "NumericalFailure"

DEFAULT_TOL = 1e-8

CONE_KINDS = ("zero", "nonneg", "soc", "psd")


class ConicError(ValueError):
    pass


def svec_size(d: int) -> int:
    return d * (d + 1) // 2


def svec_index(d: int):
    """Row/column pairs in vectorization order (upper triangle, by column)."""
    rows, cols = [], []
    for j in range(d):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def svec(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    i, j = svec_index(d)
    scale = np.where(i == j, 1.0, math.sqrt(2.0))
    return S[i, j] * scale


def smat(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    d = int(round((math.sqrt(8 * len(s) + 1) - 1) / 2))
    i, j = svec_index(d)
    scale = np.where(i == j, 1.0, 1.0 / math.sqrt(2.0))
    S = np.zeros((d, d))
    S[i, j] = s * scale
    S[j, i] = s * scale
    return S


@dataclass(frozen=True)
class ConeBlock:
    """Rows ``b - A x`` constrained to one cone."""

    kind: str
    A: sp.csr_matrix
    b: np.ndarray
    order: int = 0  # matrix order for psd blocks

    def __post_init__(self):
        if self.kind not in CONE_KINDS:
            raise ConicError(f"unknown cone kind {self.kind!r}")
        if self.A.shape[0] != len(self.b):
            raise ConicError("cone block rows and rhs length differ")
        if self.kind == "psd" and self.A.shape[0] != svec_size(self.order):
            raise ConicError(
                f"psd({self.order}) block needs {svec_size(self.order)} rows, "
                f"got {self.A.shape[0]}")
        if self.kind == "soc" and self.A.shape[0] < 1:
            raise ConicError("empty second-order cone block")

    @property
    def rows(self) -> int:
        return self.A.shape[0]


def block(kind: str, A, b, order: int = 0) -> ConeBlock:
    A = sp.csr_matrix(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if kind == "psd" and order == 0:
        order = int(round((math.sqrt(8 * len(b) + 1) - 1) / 2))
    return ConeBlock(kind, A, b, order)


@dataclass(frozen=True)
class ConicProgram:
    c: np.ndarray
    blocks: tuple = ()
    names: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = len(self.c)
        for blk in self.blocks:
            if blk.A.shape[1] != n:
                raise ConicError(
                    f"block has {blk.A.shape[1]} columns, program has {n} variables")

    @property
    def n(self) -> int:
        return len(self.c)

    def count(self, kind: str) -> int:
        return sum(1 for blk in self.blocks if blk.kind == kind)

    def rows(self, kind: str | None = None) -> int:
        return sum(blk.rows for blk in self.blocks if kind is None or blk.kind == kind)

    def residuals(self, x) -> dict:
        """Cone violations of a candidate point, computed block by block."""
        x = np.asarray(x, dtype=float)
        out = {"zero": 0.0, "nonneg": 0.0, "soc": 0.0, "psd": 0.0}
        for blk in self.blocks:
            s = blk.b - blk.A @ x
            if blk.kind == "zero":
                v = float(np.max(np.abs(s))) if len(s) else 0.0
            elif blk.kind == "nonneg":
                v = float(max(0.0, -np.min(s))) if len(s) else 0.0
            elif blk.kind == "soc":
                v = float(max(0.0, np.linalg.norm(s[1:]) - s[0]))
            else:
                v = float(max(0.0, -np.linalg.eigvalsh(smat(s))[0]))
            out[blk.kind] = max(out[blk.kind], v)
        return out


def program(c, blocks: Sequence[ConeBlock], names=None) -> ConicProgram:
    return ConicProgram(np.asarray(c, dtype=float).ravel(), tuple(blocks), dict(names or {}))


@dataclass
class SolveReport:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    wall_time: float
    dual: np.ndarray | None = None
    detail: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


_ORDER = {"zero": 0, "nonneg": 1, "soc": 2, "psd": 3}


def _clarabel_cone(blk: ConeBlock):
    if blk.kind == "zero":
        return clarabel.ZeroConeT(blk.rows)
    if blk.kind == "nonneg":
        return clarabel.NonnegativeConeT(blk.rows)
    if blk.kind == "soc":
        return clarabel.SecondOrderConeT(blk.rows)
    return clarabel.PSDTriangleConeT(blk.order)


def solve(p: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200) -> SolveReport:
    """Solve ``p`` with the Clarabel interior-point engine.

    Never raises on solver trouble; anything that is not a clean optimum,
    certified infeasibility or certified unboundedness is reported as
    ``NumericalFailure``.
    """
    t0 = time.perf_counter()
    blocks = [blk for blk in p.blocks if blk.rows > 0]
    # zero cones first, then nonnegative: keeps the KKT ordering stable
    order = sorted(range(len(blocks)), key=lambda i: (_ORDER[blocks[i].kind], i))
    if blocks:
        A = sp.vstack([blocks[i].A for i in order], format="csc")
        b = np.concatenate([blocks[i].b for i in order])
    else:
        A = sp.csc_matrix((0, p.n))
        b = np.zeros(0)
    cones = [_clarabel_cone(blocks[i]) for i in order]

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = min(1e-6, tol * 100)
    settings.max_iter = max_iter
    settings.max_threads = 1
    # refinement to 1e-10 is ample for the KKT accuracy the tolerances ask for
    settings.iterative_refinement_reltol = 1e-10
    settings.iterative_refinement_abstol = 1e-10
    P = sp.csc_matrix((p.n, p.n))
    try:
        sol = clarabel.DefaultSolver(P, p.c, A, b, cones, settings).solve()
    except Exception:  # backend panics surface as a status, never an exception
        return SolveReport(NUMERICAL_FAILURE, None, math.nan, 0, time.perf_counter() - t0)
    status = str(sol.status)
    wall = time.perf_counter() - t0
    if status == "Solved":
        x = np.array(sol.x)
        z_sorted = np.array(sol.z)
        # undo the cone reordering for the dual
        z = np.empty_like(z_sorted)
        offsets = np.cumsum([0] + [blk.rows for blk in blocks])
        pos = 0
        for i in order:
            r = blocks[i].rows
            z[offsets[i]:offsets[i] + r] = z_sorted[pos:pos + r]
            pos += r
        return SolveReport(OPTIMAL, x, float(p.c @ x), sol.iterations, wall, z, status)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SolveReport(INFEASIBLE, None, math.inf, sol.iterations, wall, None, status)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return SolveReport(UNBOUNDED, None, -math.inf, sol.iterations, wall, None, status)
    return SolveReport(NUMERICAL_FAILURE, None, math.nan, sol.iterations, wall, None, status)


@dataclass(frozen=True)
class Epigraph:
    """Rotated-cone encoding of ``t >= ||L'z + c||^2``.

    ``block`` acts on ``[z; t]``.  Minimizing ``t`` minimizes
    ``z'Hz + 2 f'z`` shifted by ``offset``.
    """

    block: ConeBlock
    offset: float
    factor: np.ndarray
    shift: np.ndarray


def _psd_factor(H, tol=1e-12):
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    scale = max(1.0, float(np.max(np.abs(w)))) if len(w) else 1.0
    if len(w) and w[0] < -tol * scale * 1e3:
        raise ConicError("quadratic weight is not positive semidefinite")
    keep = w > tol * scale
    return V[:, keep] * np.sqrt(w[keep])


def quadratic_epigraph(H, f=None, factor=None) -> Epigraph:
    """Second-order-cone rows for the epigraph of a convex quadratic.

    ``factor`` may supply ``L`` with ``H = L L'`` directly; otherwise it is
    taken from a symmetric eigendecomposition (handles singular ``H``).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[0]
    L = _psd_factor(H) if factor is None else np.atleast_2d(np.asarray(factor, dtype=float))
    f = np.zeros(n) if f is None else np.asarray(f, dtype=float).ravel()
    if L.shape[1] == 0:
        if np.any(np.abs(f) > 0):
            raise ConicError("linear term outside the range of a zero quadratic")
        c = np.zeros(0)
    else:
        c, *_ = np.linalg.lstsq(L, f, rcond=None)
        if np.linalg.norm(L @ c - f) > 1e-9 * max(1.0, np.linalg.norm(f)):
            raise ConicError("linear term outside the range of the quadratic weight")
    k = L.shape[1]
    # (t + 1, t - 1, 2(L'z + c)) in the second-order cone  <=>  t >= ||L'z + c||^2
    A = np.zeros((k + 2, n + 1))
    A[0, n] = -1.0
    A[1, n] = -1.0
    A[2:, :n] = -2.0 * L.T
    b = np.concatenate([[1.0, -1.0], 2.0 * c])
    return Epigraph(block("soc", A, b), float(c @ c), L, c)


def dump_program(p: ConicProgram, path) -> None:
    """Text interchange dump: one record per cone block, triplet rows."""
    with open(path, "w") as fh:
        fh.write(f"program n={p.n}\n")
        fh.write("c " + " ".join(repr(float(v)) for v in p.c) + "\n")
        for blk in p.blocks:
            coo = blk.A.tocoo()
            fh.write(f"block {blk.kind} rows={blk.rows} order={blk.order} nnz={coo.nnz}\n")
            fh.write("b " + " ".join(repr(float(v)) for v in blk.b) + "\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
            fh.write("end\n")


def load_program(path) -> ConicProgram:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    n = int(lines[0].split("n=")[1])
    c = np.array([float(v) for v in lines[1].split()[1:]])
    blocks = []
    i = 2
    while i < len(lines):
        head = dict(kv.split("=") for kv in lines[i].split()[2:])
        kind = lines[i].split()[1]
        rows, order, nnz = int(head["rows"]), int(head["order"]), int(head["nnz"])
        b = np.array([float(v) for v in lines[i + 1].split()[1:]])
        trip = [ln.split() for ln in lines[i + 2:i + 2 + nnz]]
        r = np.array([int(t[0]) for t in trip], dtype=int)
        cc = np.array([int(t[1]) for t in trip], dtype=int)
        v = np.array([float(t[2]) for t in trip])
        A = sp.csr_matrix((v, (r, cc)), shape=(rows, n))
        blocks.append(ConeBlock(kind, A, b, order))
        i += 3 + nnz
    return program(c, blocks)
