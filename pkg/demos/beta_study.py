"""Excitation level against set size on random third-order systems (scaled ensemble)."""
from tubeamp.lab import beta_vs_convergence, emit_artifacts, load_scenario

cfg = load_scenario("bundled:third_order")
res = beta_vs_convergence(cfg, n_samples=20, sequences=10)
print(f"Spearman(beta1, volume) = {res.spearman_volume:.3f}")
print(f"Spearman(beta1, side)   = {res.spearman_side:.3f}")
zero = beta_vs_convergence(cfg, n_samples=20, sequences=10, excitation="zero")
print(f"median beta1: feedback {sorted(res.column('beta1'))[10]:.4f}, "
      f"zero input {sorted(zero.column('beta1'))[10]:.4f}")
emit_artifacts(res, "out/demo_beta_study")
