"""CSV tables, plot-ready series and a minimal SVG emitter."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .runner import RunLog
from .studies import BetaStudy, ConvergenceResult, SweepResult

SWEEP_HEADER = ("gamma", "vol20_pct", "beta_star_mean", "beta1_mean")
CONVERGE_HEADER = ("run", "t", "diameter", "max_support_gap", "contained")
TABLE2_TIMES = (0, 1, 5, 50, 100, 500, 1000)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_csv(path) -> tuple[list, list]:
    """Header and rows; numeric cells parsed as float, the rest kept as text."""
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = []
        for r in rd:
            out = []
            for cell in r:
                try:
                    out.append(float(cell))
                except ValueError:
                    out.append(cell)
            rows.append(out)
    return header, rows


# --------------------------------------------------------------------------
# Tables

def runlog_header(n_x: int, n_u: int, r: int) -> list:
    return (["t"] + [f"x{i + 1}" for i in range(n_x)] + [f"u{i + 1}" for i in range(n_u)]
            + ["status", "assembly_s", "solve_s", "cost", "beta_star", "beta1", "vol_pct"]
            + [f"mu{i + 1}" for i in range(r)])


def runlog_rows(log: RunLog) -> list:
    return [[r.t, *r.x, *r.u, r.status, r.assembly_s, r.solve_s, r.cost, r.beta_star,
             r.beta1, r.vol_pct, *r.mu] for r in log.rows]


def write_runlog_csv(log: RunLog, path) -> Path:
    m = log.meta
    return _write(path, runlog_header(m["n_x"], m["n_u"], m["r"]), runlog_rows(log))


def sweep_rows(res: SweepResult) -> list:
    return [list(row) for row in res.table()]


def write_sweep_csv(res: SweepResult, path) -> Path:
    return _write(path, SWEEP_HEADER, sweep_rows(res))


def converge_rows(res: ConvergenceResult) -> list:
    rows = []
    for k, run in enumerate(res.runs):
        for t in range(len(run.diameter)):
            rows.append([k, t, float(run.diameter[t]), float(run.gap[t]), bool(run.contained[t])])
    return rows


def write_converge_csv(res: ConvergenceResult, path) -> Path:
    return _write(path, CONVERGE_HEADER, converge_rows(res))


def table2_rows(logs, times=TABLE2_TIMES) -> list:
    """``(t, mean vol %, min, max)`` at the listed steps that the logs reach."""
    logs = [logs] if isinstance(logs, RunLog) else list(logs)
    out = []
    for t in times:
        vals = [lg.rows[t].vol_pct for lg in logs if t < len(lg.rows)]
        if vals:
            out.append([t, float(np.mean(vals)), float(np.min(vals)), float(np.max(vals))])
    return out


def convergence_table2(res: ConvergenceResult, times=TABLE2_TIMES) -> list:
    """``(t, mean diameter, exceedance frequency)`` for the Monte Carlo runs."""
    out = []
    for t in times:
        if t < len(res.runs[0].diameter):
            d = np.array([r.diameter[t] for r in res.runs])
            g = np.array([r.gap[t] for r in res.runs])
            out.append([t, float(np.mean(d)), float(np.mean(g > res.epsilon))])
    return out


# --------------------------------------------------------------------------
# SVG

def svg_plot(series, path, kind: str = "line", title: str = "", xlabel: str = "",
             ylabel: str = "", logx: bool = False, size=(480, 320)) -> Path:
    """Write a bare line or scatter chart. ``series`` maps labels to ``(x, y)``."""
    W, H = size
    pad = 48
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    pts = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        x = np.log10(x[ok]) if logx else x[ok]
        pts[name] = (x, y[ok])
    allx = np.concatenate([p[0] for p in pts.values()] + [np.zeros(0)])
    ally = np.concatenate([p[1] for p in pts.values()] + [np.zeros(0)])
    if allx.size == 0:
        allx = ally = np.array([0.0, 1.0])
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def sy(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{pad / 2}" text-anchor="middle">{escape(title)}</text>',
             f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">'
             f'{escape(("log10 " if logx else "") + xlabel)}</text>',
             f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" '
             f'text-anchor="middle">{escape(ylabel)}</text>']
    for v, anchor in ((x0, "start"), (x1, "end")):
        parts.append(f'<text x="{sx(v):.1f}" y="{H - pad + 14}" font-size="10" '
                     f'text-anchor="{anchor}">{v:.3g}</text>')
    for v in (y0, y1):
        parts.append(f'<text x="{pad - 4}" y="{sy(v):.1f}" font-size="10" '
                     f'text-anchor="end">{v:.3g}</text>')
    for k, (name, (x, y)) in enumerate(pts.items()):
        c = colors[k % len(colors)]
        if kind == "line" and len(x) > 1:
            d = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
            parts.append(f'<polyline fill="none" stroke="{c}" points="{d}"/>')
        else:
            parts.extend(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{c}"/>'
                         for a, b in zip(x, y))
        parts.append(f'<text x="{W - pad}" y="{pad + 14 * (k + 1)}" font-size="11" '
                     f'text-anchor="end" fill="{c}">{escape(str(name))}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts))
    return path


def svg_polygons(polys, path, title: str = "", size=(400, 400)) -> Path:
    """Outline each polygon (ordered or not) in the plane; used for tube sections."""
    from scipy.spatial import ConvexHull, QhullError
    W, H = size
    pad = 30
    rings = []
    for V in polys:
        V = np.asarray(V, dtype=float)
        if V.shape[1] != 2 or len(V) < 3:
            continue
        try:
            V = V[ConvexHull(V).vertices]
        except QhullError:
            continue
        rings.append(V)
    allp = np.vstack(rings) if rings else np.array([[0.0, 0.0], [1.0, 1.0]])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi - lo)) or 1.0

    def tr(p):
        return (pad + (p[0] - lo[0]) / span * (W - 2 * pad),
                H - pad - (p[1] - lo[1]) / span * (H - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="18" text-anchor="middle">{escape(title)}</text>']
    for V in rings:
        d = " ".join("{:.2f},{:.2f}".format(*tr(p)) for p in V)
        parts.append(f'<polygon points="{d}" fill="none" stroke="#1f77b4"/>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts))
    return path


# --------------------------------------------------------------------------
# Dispatch

def _emit_runlog(log: RunLog, out: Path) -> list:
    files = [write_runlog_csv(log, out / "runlog.csv")]
    log.save(out / "runlog.json")
    files.append(out / "runlog.json")
    files.append(_write(out / "table2.csv", ("t", "vol_pct_mean", "vol_pct_min", "vol_pct_max"),
                        table2_rows(log)))
    xs = log.states
    if xs.shape[1] >= 2:
        files.append(svg_plot({"x": (xs[:, 0], xs[:, 1])}, out / "states.svg",
                              title="closed-loop state", xlabel="x1", ylabel="x2"))
    tube = log.meta.get("tube0")
    if tube:
        rows = [[k, j, *v] for k, verts in enumerate(tube["vertices"]) for j, v in enumerate(verts)]
        n = len(rows[0]) - 2 if rows else 0
        files.append(_write(out / "tube0.csv", ["k", "vertex"] + [f"x{i + 1}" for i in range(n)],
                            rows))
        if n == 2:
            files.append(svg_polygons(tube["vertices"][1:], out / "tube0.svg",
                                      title="tube sections at t = 0"))
    t = log.column("t")
    files.append(svg_plot({"vol %": (t, log.column("vol_pct"))}, out / "volume.svg",
                          title="parameter set volume", xlabel="t", ylabel="%"))
    return files


def _emit_sweep(res: SweepResult, out: Path) -> list:
    files = [write_sweep_csv(res, out / "sweep.csv")]
    tab = np.array(res.table())
    files.append(svg_plot({"median vol %": (tab[:, 0], tab[:, 1])}, out / "volume_vs_gamma.svg",
                          title="vol(Θ) against weighting", xlabel="gamma", ylabel="%",
                          logx=True))
    files.append(svg_plot({"beta*": (tab[:, 0], tab[:, 2]), "beta1": (tab[:, 0], tab[:, 3])},
                          out / "beta_vs_gamma.svg", title="excitation against weighting",
                          xlabel="gamma", ylabel="beta", logx=True))
    return files


def _emit_convergence(res: ConvergenceResult, out: Path) -> list:
    files = [write_converge_csv(res, out / "converge.csv")]
    files.append(_write(out / "exceedance.csv", ("t", "empirical", "bound"),
                        zip(res.checkpoints, res.empirical, res.theoretical)))
    files.append(_write(out / "table2.csv", ("t", "diameter_mean", "exceed_freq"),
                        convergence_table2(res)))
    t = np.arange(len(res.runs[0].diameter))
    mean_d = np.mean([r.diameter for r in res.runs], axis=0)
    files.append(svg_plot({"mean diameter": (t, mean_d)}, out / "diameter.svg",
                          title=f"{res.variant} set diameter", xlabel="t", ylabel="diameter"))
    return files


def _emit_beta(res: BetaStudy, out: Path) -> list:
    keys = ("sample", "beta1", "side", "inner_radius", "outer_radius", "volume", "x0_norm")
    files = [_write(out / "beta.csv", keys, ([r[k] for k in keys] for r in res.rows))]
    b = res.column("beta1")
    files.append(svg_plot({"side": (b, res.column("side"))}, out / "side_vs_beta.svg",
                          kind="scatter", title="set size after the window",
                          xlabel="mean beta1", ylabel="mean side length"))
    return files


def emit_artifacts(obj, out) -> list:
    """Write the tables and figure series for a log, a list of logs or a study result."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, RunLog):
        return _emit_runlog(obj, out)
    if isinstance(obj, SweepResult):
        return _emit_sweep(obj, out)
    if isinstance(obj, ConvergenceResult):
        return _emit_convergence(obj, out)
    if isinstance(obj, BetaStudy):
        return _emit_beta(obj, out)
    if isinstance(obj, (list, tuple)) and all(isinstance(o, RunLog) for o in obj):
        files = []
        for lg in obj:
            sub = out / f"ic{lg.meta['ic_index']}_seed{lg.meta['seed']}"
            files.extend(_emit_runlog(lg, sub))
        files.append(_write(out / "table2.csv", ("t", "vol_pct_mean", "vol_pct_min",
                                                 "vol_pct_max"), table2_rows(obj)))
        return files
    raise TypeError(f"no artifacts for {type(obj).__name__}")


def nan_equal(a, b) -> bool:
    """Cell-wise equality treating NaN as equal to NaN."""
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return a == b
