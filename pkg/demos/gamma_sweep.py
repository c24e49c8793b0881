"""Excitation weight against identification: volume after 20 steps per gamma.

Every gamma sees the same initial state and disturbance tapes.  Takes a few
minutes at the default ensemble of 3.
"""
from tubeamp.lab import emit_artifacts, gamma_sweep, load_scenario

cfg = load_scenario("bundled:second_order")
res = gamma_sweep(cfg, ensemble=3)
print(f"{'gamma':>8} {'vol20 %':>9} {'beta*':>9} {'beta1':>9}")
for g, v, bs, b1 in res.table():
    print(f"{g:8.0e} {v:9.2f} {bs:9.4f} {b1:9.4f}")
print("shared tapes:", res.shared_tapes())
emit_artifacts(res, "out/demo_gamma_sweep")
