"""Uncertain linear plant with affine parameter dependence.

    x+ = A(theta) x + B(theta) u + w,   A(theta) = A_0 + sum_i theta_i A_i  (same for B)

written equivalently as ``x+ = D(x, u) theta + d(x, u) + w`` with the
regressor ``D`` whose i-th column is ``A_i x + B_i u``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import HPolytope, chebyshev_center, enumerate_vertices, support, GeometryError


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class UncertainModel:
    A: np.ndarray           # (p+1, n_x, n_x)
    B: np.ndarray           # (p+1, n_x, n_u)
    theta_star: np.ndarray
    theta0: HPolytope       # directions M and initial offsets mu_0
    F: np.ndarray = None    # state/input constraints F x + G u <= 1
    G: np.ndarray = None
    name: str = "model"

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 2:
            B = B[:, :, None]
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ModelError("A must stack square matrices A_0..A_p")
        if B.shape[0] != A.shape[0] or B.shape[1] != A.shape[1]:
            raise ModelError("B_0..B_p must match A_0..A_p in count and rows")
        ts = np.asarray(self.theta_star, dtype=float).ravel()
        if ts.shape[0] != A.shape[0] - 1:
            raise ModelError(f"theta_star has length {ts.shape[0]}, expected {A.shape[0] - 1}")
        if self.theta0.dim != ts.shape[0]:
            raise ModelError("initial parameter set has the wrong dimension")
        F = np.zeros((0, A.shape[1])) if self.F is None else np.atleast_2d(np.asarray(self.F, float))
        G = np.zeros((F.shape[0], B.shape[2])) if self.G is None else np.asarray(self.G, float)
        G = G.reshape(F.shape[0], B.shape[2])
        for name, val in (("A", A), ("B", B), ("theta_star", ts), ("F", F), ("G", G)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[2]

    @property
    def p(self) -> int:
        return self.A.shape[0] - 1

    def with_theta0(self, theta0: HPolytope) -> "UncertainModel":
        return UncertainModel(self.A, self.B, self.theta_star, theta0, self.F, self.G, self.name)

    def check_truth(self, tol=1e-9) -> bool:
        """Whether the true parameter lies in the initial set."""
        return self.theta0.contains(self.theta_star, tol)


def assemble(m: UncertainModel, theta):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != m.p:
        raise ModelError(f"theta has length {theta.shape[0]}, model has p = {m.p}")
    A = m.A[0] + np.tensordot(theta, m.A[1:], axes=1)
    B = m.B[0] + np.tensordot(theta, m.B[1:], axes=1)
    return A, B


def closed_loop(m: UncertainModel, theta, K) -> np.ndarray:
    A, B = assemble(m, theta)
    return A + B @ np.atleast_2d(K)


def regressor(m: UncertainModel, x, u):
    """``(D, d)`` with ``D[:, i] = A_i x + B_i u`` and ``d = A_0 x + B_0 u``."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if x.shape[0] != m.n_x or u.shape[0] != m.n_u:
        raise ModelError("state or input has the wrong dimension")
    cols = m.A @ x + m.B @ u          # (p+1, n_x)
    return cols[1:].T.copy(), cols[0].copy()


def step_truth(m: UncertainModel, x, u, w) -> np.ndarray:
    A, B = assemble(m, m.theta_star)
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != m.n_x:
        raise ModelError("disturbance has the wrong dimension")
    return A @ x + B @ u + w


def measure(x, s) -> np.ndarray:
    return np.asarray(x, dtype=float) + np.asarray(s, dtype=float)


# --------------------------------------------------------------------------
# Disturbances and measurement noise

UNIFORM = "uniform"
BOUNDARY = "boundary"


class SamplingError(RuntimeError):
    pass


def _bounding_box(P: HPolytope):
    n = P.dim
    hi = np.array([support(P, e) for e in np.eye(n)])
    lo = -np.array([support(P, -e) for e in np.eye(n)])
    return lo, hi


def _is_box(P: HPolytope) -> bool:
    return bool(np.all((np.abs(P.normals) > 0).sum(axis=1) == 1))


@dataclass
class SetSampler:
    """Samples from a polytope: uniform, or a 50/50 mix with boundary points.

    Boxes are sampled directly.  Other polytopes use rejection from the
    bounding box, and their boundary points come from radial projection out of
    the Chebyshev center.
    """

    region: HPolytope
    kind: str = UNIFORM
    budget: int = 10_000
    _lo: np.ndarray = field(init=False, repr=False)
    _hi: np.ndarray = field(init=False, repr=False)
    _box: bool = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in (UNIFORM, BOUNDARY):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        self._lo, self._hi = _bounding_box(self.region)
        self._box = _is_box(self.region)
        self._center, _ = chebyshev_center(self.region)

    def _uniform(self, rng):
        if self._box:
            return self._lo + (self._hi - self._lo) * rng.random(len(self._lo))
        for _ in range(self.budget):
            x = self._lo + (self._hi - self._lo) * rng.random(len(self._lo))
            if self.region.contains(x, 0.0):
                return x
        raise SamplingError("rejection budget exceeded")

    def _boundary(self, rng):
        n = len(self._lo)
        if self._box:
            x = self._lo + (self._hi - self._lo) * rng.random(n)
            j = int(rng.integers(n))
            x[j] = self._hi[j] if rng.random() < 0.5 else self._lo[j]
            return x
        y = self._uniform(rng)
        d = y - self._center
        if not np.any(d):
            d = rng.standard_normal(n)
        A, b = self.region.normals, self.region.offsets
        rate = A @ d
        slack = b - A @ self._center
        with np.errstate(divide="ignore"):
            steps = np.where(rate > 0, slack / rate, np.inf)
        return self._center + np.min(steps) * d

    def sample(self, rng) -> np.ndarray:
        if self.kind == BOUNDARY and rng.random() < 0.5:
            return self._boundary(rng)
        return self._uniform(rng)

    def tape(self, rng, length: int) -> np.ndarray:
        n = len(self._lo)
        if length == 0:
            return np.zeros((0, n))
        return np.array([self.sample(rng) for _ in range(length)])


@dataclass(frozen=True)
class DisturbanceModel:
    W: HPolytope                      # bound the estimator and tubes use
    omega: HPolytope | None = None    # tight set the disturbance actually lives in
    sampler: str = UNIFORM
    rho: float = 0.0

    @property
    def tight(self) -> HPolytope:
        return self.W if self.omega is None else self.omega

    def make_sampler(self) -> SetSampler:
        return SetSampler(self.tight, self.sampler)

    def check(self, tol=1e-8) -> bool:
        """``Omega ⊆ W`` and, when rho > 0, ``W ⊆ Omega ⊕ rho B`` on W's vertices."""
        from .geometry import contains_polytope
        if self.omega is None:
            return True
        if not contains_polytope(self.W.normals, self.W.offsets, self.omega, tol).contained:
            return False
        if self.rho > 0:
            for v in enumerate_vertices(self.W).vertices:
                if distance_to(self.omega, v) > self.rho + tol:
                    return False
        return True


def distance_to(P: HPolytope, y) -> float:
    """Euclidean distance from a point to a polytope (SOCP)."""
    from . import conic
    y = np.asarray(y, dtype=float)
    n = P.dim
    # min r s.t. ||x - y|| <= r, A x <= b ; variables (x, r)
    soc = np.zeros((n + 1, n + 1))
    soc[0, n] = -1.0
    soc[1:, :n] = -np.eye(n)
    blocks = [conic.block("nonneg", np.hstack([P.normals, np.zeros((P.rows, 1))]), P.offsets),
              conic.block("soc", soc, np.r_[0.0, -y])]
    rep = conic.solve(conic.program(np.r_[np.zeros(n), 1.0], blocks), tol=1e-10)
    if rep.status != conic.OPTIMAL:
        raise GeometryError(f"distance SOCP failed: {rep.status}")
    return float(rep.x[n])


def inexact_pair(half_width: float, rho: float, n: int):
    """Tight box of half-width ``a`` and the inflated box ``a + rho/sqrt(n)``.

    The pair satisfies ``Omega ⊆ W ⊆ Omega ⊕ rho B`` exactly.
    """
    from .geometry import inf_ball
    omega = inf_ball(half_width, n)
    W = inf_ball(half_width + rho / math.sqrt(n), n)
    return W, omega


@dataclass(frozen=True)
class NoiseModel:
    S: HPolytope
    sampler: str = UNIFORM

    @property
    def vertices(self) -> np.ndarray:
        return enumerate_vertices(self.S).vertices

    @property
    def h(self) -> int:
        return len(self.vertices)

    def make_sampler(self) -> SetSampler:
        return SetSampler(self.S, self.sampler)


def sample_disturbance(dm: DisturbanceModel, rng) -> np.ndarray:
    return dm.make_sampler().sample(rng)


def make_rng(seed, *spawn_key) -> np.random.Generator:
    """Generator for ``seed`` split deterministically along ``spawn_key``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key)))


# --------------------------------------------------------------------------
# Model files

def _poly_to_dict(P: HPolytope | None):
    if P is None:
        return None
    return {"normals": P.normals.tolist(), "offsets": P.offsets.tolist()}


def _poly_from_dict(d):
    if d is None:
        return None
    return HPolytope(np.array(d["normals"], dtype=float), np.array(d["offsets"], dtype=float))


@dataclass(frozen=True)
class ModelFile:
    model: UncertainModel
    disturbance: DisturbanceModel
    noise: NoiseModel | None = None


def model_to_dict(mf: ModelFile) -> dict:
    m = mf.model
    return {
        "name": m.name,
        "n_x": m.n_x, "n_u": m.n_u, "p": m.p,
        "A": [a.tolist() for a in m.A],
        "B": [b.tolist() for b in m.B],
        "theta_star": m.theta_star.tolist(),
        "theta0": {"directions": m.theta0.normals.tolist(), "offsets": m.theta0.offsets.tolist()},
        "constraints": {"F": m.F.tolist(), "G": m.G.tolist()},
        "W": _poly_to_dict(mf.disturbance.W),
        "Omega": _poly_to_dict(mf.disturbance.omega),
        "rho": mf.disturbance.rho,
        "sampler": mf.disturbance.sampler,
        "S": _poly_to_dict(mf.noise.S) if mf.noise else None,
    }


def model_from_dict(d: dict) -> ModelFile:
    n_x, n_u, p = int(d["n_x"]), int(d["n_u"]), int(d["p"])
    A = np.array(d["A"], dtype=float).reshape(p + 1, n_x, n_x)
    B = np.array(d["B"], dtype=float).reshape(p + 1, n_x, n_u)
    theta0 = HPolytope(np.array(d["theta0"]["directions"], dtype=float),
                       np.array(d["theta0"]["offsets"], dtype=float))
    cons = d.get("constraints") or {}
    F = np.array(cons.get("F", np.zeros((0, n_x))), dtype=float).reshape(-1, n_x)
    G = np.array(cons.get("G", np.zeros((F.shape[0], n_u))), dtype=float).reshape(-1, n_u)
    model = UncertainModel(A, B, np.array(d["theta_star"], dtype=float), theta0, F, G,
                           d.get("name", "model"))
    dist = DisturbanceModel(_poly_from_dict(d["W"]), _poly_from_dict(d.get("Omega")),
                            d.get("sampler", UNIFORM), float(d.get("rho", 0.0) or 0.0))
    S = _poly_from_dict(d.get("S"))
    noise = NoiseModel(S) if S is not None else None
    if not model.check_truth():
        raise ModelError("theta_star is not inside the initial parameter set")
    return ModelFile(model, dist, noise)


def load_model(path) -> ModelFile:
    """Load a model file; ``bundled:<name>`` reads a shipped example."""
    path = str(path)
    if path.startswith("bundled:"):
        text = resources.files("tubeamp.data").joinpath(path.split(":", 1)[1] + ".json").read_text()
    else:
        text = Path(path).read_text()
    return model_from_dict(json.loads(text))


def save_model(mf: ModelFile, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(mf), indent=2))
