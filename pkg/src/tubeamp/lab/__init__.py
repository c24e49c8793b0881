"""Experiment harness: scenarios, closed-loop runs, ensemble studies and artifacts."""
from .artifacts import emit_artifacts
from .runner import RunFailed, RunLog, StepRow, replay, run_closed_loop
from .scenario import ScenarioConfig, Setup, build_setup, load_scenario, save_scenario
from .studies import beta_vs_convergence, convergence_mc, gamma_sweep

__all__ = ["ScenarioConfig", "Setup", "build_setup", "load_scenario", "save_scenario",
           "RunLog", "StepRow", "RunFailed", "run_closed_loop", "replay", "gamma_sweep",
           "convergence_mc", "beta_vs_convergence", "emit_artifacts"]
