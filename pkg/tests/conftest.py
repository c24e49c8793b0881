import json
import itertools
from pathlib import Path

import numpy as np
import pytest

from tubeamp.design import synthesize
from tubeamp.system import load_model

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture(scope="session")
def second_order():
    return load_model("bundled:second_order")


@pytest.fixture(scope="session")
def design(second_order):
    return synthesize(second_order.model, second_order.disturbance.W)


def brute_vertices(A, b, tol=1e-9):
    """Vertex oracle: every feasible n-row intersection."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    n = A.shape[1]
    out = []
    for rows in itertools.combinations(range(len(A)), n):
        S = A[list(rows)]
        if abs(np.linalg.det(S)) < 1e-10:
            continue
        x = np.linalg.solve(S, b[list(rows)])
        if np.all(A @ x <= b + tol * (1 + np.abs(b))) and not any(
                np.allclose(x, y, atol=1e-8) for y in out):
            out.append(x)
    return np.array(out)


def random_polytope(rng, dim, extra=None):
    """Bounded polytope containing the origin: a random box plus random cuts."""
    k = int(rng.integers(1, 7)) if extra is None else extra
    lo = -rng.uniform(0.5, 2.0, dim)
    hi = rng.uniform(0.5, 2.0, dim)
    A = np.vstack([np.eye(dim), -np.eye(dim), rng.standard_normal((k, dim))])
    b = np.r_[hi, -lo, rng.uniform(0.3, 2.0, k)]
    return A, b


# acceptance criteria report: criterion number -> (passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
