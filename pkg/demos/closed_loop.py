"""Adaptive tube MPC on the second-order plant: one closed loop from (3, 2).

Prints the state, input and identified-set volume every ten steps and writes
CSV tables and SVG figures to ``out/demo_closed_loop``.
"""
import numpy as np

from tubeamp.lab import build_setup, emit_artifacts, load_scenario, run_closed_loop

cfg = load_scenario("bundled:second_order")
setup = build_setup(cfg)
print("tube shape rows:", setup.design.shape.T.shape[0])
print("feedback gain K:", np.round(setup.design.feedback.K, 4))

log = run_closed_loop(cfg, ic_index=0, seed=cfg.seed, setup=setup)
for r in log.rows[::10]:
    print(f"t={r.t:3d}  x={np.round(r.x, 3)}  u={np.round(r.u, 3)}  vol={r.vol_pct:6.2f}%")
print("summary:", log.meta["summary"])
files = emit_artifacts(log, "out/demo_closed_loop")
print(f"wrote {len(files)} files to out/demo_closed_loop")
