"""Independent derivations of the frozen reference values in ``frozen.json``.

Everything here uses brute force, closed forms or exact rational arithmetic and
imports nothing from the package except the bundled model data and the
synthesized tube matrix (whose vertex count is recounted by brute force).
Run ``python tests/oracles/derive.py`` to regenerate the file.
"""
from __future__ import annotations

import itertools
import json
import math
from fractions import Fraction as Fr
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent


def brute_vertices(A, b, tol=1e-9):
    """All feasible intersections of ``n`` rows of ``A x <= b``."""
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    n = A.shape[1]
    out = []
    for rows in itertools.combinations(range(len(A)), n):
        S = A[list(rows)]
        if abs(np.linalg.det(S)) < 1e-12:
            continue
        x = np.linalg.solve(S, b[list(rows)])
        if np.all(A @ x <= b + tol) and not any(np.allclose(x, y, atol=1e-9) for y in out):
            out.append(x)
    return np.array(out)


def box_rows(lo, hi):
    n = len(lo)
    return np.vstack([np.eye(n), -np.eye(n)]), np.r_[hi, -np.asarray(lo)]


def model_data():
    d = json.loads((HERE.parents[1] / "src/tubeamp/data/second_order.json").read_text())
    return [np.array(a) for a in d["A"]], [np.array(b) for b in d["B"]], np.array(d["theta_star"])


def main():
    out = {}
    # support values via vertex enumeration
    A, b = box_rows([-0.05, -0.05], [0.05, 0.05])
    out["support_box005_11"] = float(np.max(brute_vertices(A, b) @ [1, 1]))
    A, b = box_rows(-np.ones(3), np.ones(3))
    out["support_cube_111"] = float(np.max(brute_vertices(A, b) @ [1, 1, 1]))
    # containment of the unit box in {x1+x2<=2.1, -x1<=1, -x2<=1}
    V = brute_vertices(*box_rows([-1, -1], [1, 1]))
    outer = np.array([[1, 1], [-1, 0], [0, -1]]), np.array([2.1, 1, 1])
    out["contain_skew"] = bool(np.all(outer[0] @ V.T <= outer[1][:, None] + 1e-12))
    # triangle
    tri = np.array([[-1, 0], [0, -1], [1, 1]]), np.array([0, 0, 1])
    tv = brute_vertices(*tri)
    out["triangle_vertices"] = sorted(map(list, np.round(tv, 12).tolist()))
    x, y = tv[:, 0], tv[:, 1]
    order = np.argsort(np.arctan2(y - y.mean(), x - x.mean()))
    x, y = x[order], y[order]
    out["triangle_area"] = float(0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))
    # incenter of the right isoceles triangle: r = (a + b - c) / 2 with legs 1
    r = (1 + 1 - math.sqrt(2)) / 2
    out["triangle_incenter"] = [r, r]
    out["triangle_inradius"] = r
    # PSD example: largest beta with diag(2,5) - beta I psd
    out["psd_beta"] = float(min(2, 5))
    out["quad_form_2112_11"] = float(np.array([1, 1]) @ np.array([[2, 1], [1, 2]]) @ [1, 1])
    # plant arithmetic in exact rationals
    As, Bs, ts = model_data()
    th = [Fr(str(v)) for v in ts]
    a11 = Fr(str(As[0][0, 0])) + sum(t * Fr(str(Ai[0, 0])) for t, Ai in zip(th, As[1:]))
    out["A_theta_star_11"] = float(a11)
    out["B_e3"] = [float(Fr(str(Bs[0][i, 0])) + Fr(str(Bs[3][i, 0]))) for i in range(2)]
    D = [[float(Fr(str(As[i + 1][r, 0]))) for i in range(3)] for r in range(2)]
    out["regressor_D_x10"] = D
    out["regressor_d_x10"] = [float(As[0][0, 0]), float(As[0][1, 0])]
    nxt = []
    for r_ in range(2):
        v = Fr(str(As[0][r_, 0])) + sum(Fr(str(As[i + 1][r_, 0])) * th[i] for i in range(3))
        v += Fr("0.05") if r_ == 0 else Fr("-0.05")
        nxt.append(float(v))
    out["step_truth_x10_w"] = nxt
    # sample mean tolerance: 3 sigma of a uniform on [-0.05, 0.05] over 1e5 draws
    out["uniform_mean_tol_3sigma"] = 3 * 0.1 / math.sqrt(12) / math.sqrt(1e5)
    # scalar contraction: minimize max_{a in [0.5,0.7]} |a + K| by a fine grid
    Ks = np.linspace(-1, 0, 200001)
    lam = np.maximum(np.abs(0.5 + Ks), np.abs(0.7 + Ks))
    k = int(np.argmin(lam))
    out["scalar_gain"] = [round(float(Ks[k]), 6), round(float(lam[k]), 6)]
    # box vertex maps with alpha = (2,1,1,1)
    T = np.vstack([np.eye(2), -np.eye(2)])
    out["box_vertices_alpha2111"] = sorted(map(list, brute_vertices(T, [2, 1, 1, 1]).tolist()))
    # wbar for a skew T row set against the 0.05 box, by vertex maximum
    Tg = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -1.0]])
    Wv = brute_vertices(*box_rows([-0.05, -0.05], [0.05, 0.05]))
    out["wbar_skew"] = np.max(Tg @ Wv.T, axis=1).tolist()
    # scalar unfalsified interval x+ = theta x + w, x = 1, x+ = 0.85, |w| <= 0.1
    out["delta_interval"] = [float(Fr("0.85") - Fr("0.1")), float(Fr("0.85") + Fr("0.1"))]
    # noisy: y = 1, y+ = 0.85, |w| <= 0.1, |s| <= 0.05 -> per vertex s
    comps = []
    for s in (Fr("-0.05"), Fr("0.05")):
        base = 1 - s
        comps.append([float((Fr("0.85") - Fr("0.15")) / base), float((Fr("0.85") + Fr("0.15")) / base)])
    out["noisy_components"] = comps
    out["noisy_hull"] = [min(c[0] for c in comps), max(c[1] for c in comps)]
    # update on the unit square with theta1 + theta2 <= 0: supports by vertex enumeration
    A, b = box_rows([-1, -1], [1, 1])
    V = brute_vertices(np.vstack([A, [[1, 1]]]), np.r_[b, 0])
    out["update_square_halfplane"] = [float(np.max(V @ g)) for g in A]
    # Lyapunov scalar: p = (q + k^2 r) / (1 - phi^2)
    out["lyap_scalar"] = float(Fr(1) / (1 - Fr(1, 4)))
    # tube vertex count of the synthesized second-order shape
    from tubeamp.design import synthesize
    from tubeamp.system import load_model
    mf = load_model("bundled:second_order")
    des = synthesize(mf.model, mf.disturbance.W)
    Tm = des.shape.T
    out["second_order_T_rows"] = int(Tm.shape[0])
    out["second_order_T_vertices"] = int(len(brute_vertices(Tm, np.ones(len(Tm)))))
    # convergence-rate prediction for the scalar Monte Carlo: each facet of W is
    # hit exactly with probability 1/4 by the boundary sampler; excitation
    # beta >= 0.25 (|u| >= 0.5), tau <= 1, window 1.
    out["scalar_mc_pw_lower"] = 0.25
    out["scalar_mc_bound_500"] = (1 - 0.25) ** 500
    # inexact-bound radius with |u| in [0.5, 1]: rho * tau / beta <= rho / 0.25
    out["scalar_inexact_radius_max"] = 0.02 / 0.25
    (HERE / "frozen.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
