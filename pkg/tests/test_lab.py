import json
import math

import numpy as np
import pytest

from tubeamp.lab import (
    RunLog, ScenarioConfig, build_setup, emit_artifacts, load_scenario, replay,
    run_closed_loop, save_scenario,
)
from tubeamp.lab.artifacts import (
    CONVERGE_HEADER, SWEEP_HEADER, TABLE2_TIMES, nan_equal, read_csv, runlog_header,
    runlog_rows, table2_rows, write_converge_csv, write_runlog_csv, write_sweep_csv,
)
from tubeamp.lab.cli import main
from tubeamp.lab.runner import disturbance_tape, mu_increases, tape_hash
from tubeamp.lab.scenario import ScenarioError
from tubeamp.lab.studies import (
    SweepResult, beta_vs_convergence, convergence_mc, gamma_sweep, monotone_violations,
    theorem_bound,
)


@pytest.fixture(scope="module")
def cfg():
    return load_scenario("bundled:second_order").with_overrides(steps=6)


@pytest.fixture(scope="module")
def setup(cfg):
    return build_setup(cfg)


@pytest.fixture(scope="module")
def log(cfg, setup):
    return run_closed_loop(cfg, 0, 3, setup)


# --------------------------------------------------------------------------
# Scenarios

def test_scenario_round_trip(cfg, tmp_path):
    p = tmp_path / "s.json"
    save_scenario(cfg, p)
    again = load_scenario(p)
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash == cfg.config_hash


def test_config_hash_ignores_out_and_ensemble(cfg):
    assert cfg.with_overrides(out="/elsewhere", ensemble=7).config_hash == cfg.config_hash
    assert cfg.with_overrides(seed=cfg.seed + 1).config_hash != cfg.config_hash
    assert cfg.with_overrides(steps=7).config_hash != cfg.config_hash


def test_scenario_rejects_unknown_keys(cfg):
    d = cfg.to_dict()
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({**d, "bogus": 1})
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({**d, "controller": {"horizon": 3}})
    with pytest.raises(ScenarioError):
        ScenarioConfig.from_dict({**d, "theta0": "nominal"})


@pytest.mark.parametrize("name", ["second_order", "nominal", "convergence", "third_order"])
def test_bundled_scenarios_load(name):
    c = load_scenario(f"bundled:{name}")
    assert c.name


# --------------------------------------------------------------------------
# Runs and replay

def test_tape_depends_only_on_seed_and_ic(setup):
    a = disturbance_tape(setup, 5, 2, 30)
    assert tape_hash(a) == tape_hash(disturbance_tape(setup, 5, 2, 30))
    assert tape_hash(a) != tape_hash(disturbance_tape(setup, 6, 2, 30))
    assert tape_hash(a) != tape_hash(disturbance_tape(setup, 5, 3, 30))
    assert np.array_equal(disturbance_tape(setup, 5, 2, 10), a[:10])
    assert np.all(setup.disturbance.W.normals @ a.T <= setup.disturbance.W.offsets[:, None] + 1e-12)


def test_run_log_shape_and_summary(log, cfg):
    assert len(log.rows) == cfg.steps
    assert log.states.shape == (cfg.steps + 1, 2)
    s = log.meta["summary"]
    assert s["constraint_violations"] == 0
    assert s["tube_violations"] == 0
    assert s["truth_violations"] == 0
    assert s["mu_increases"] == 0
    assert all(r.verified for r in log.rows)


def test_runlog_json_round_trip(log, tmp_path):
    log.save(tmp_path / "log.json")
    again = RunLog.load(tmp_path / "log.json")
    assert len(again.rows) == len(log.rows)
    for a, b in zip(log.rows, again.rows):
        for name in a.__dataclass_fields__:
            va, vb = getattr(a, name), getattr(b, name)
            if isinstance(va, float):
                assert nan_equal(va, vb)
            else:
                assert va == vb


def test_replay_is_bit_exact(cfg, setup, log):
    res = replay(cfg, log, setup)
    assert res.identical, res.mismatches[:5]


def test_replay_refuses_other_config(cfg, setup, log):
    with pytest.raises(ValueError):
        replay(cfg.with_overrides(seed=99), log, setup)


def test_replay_detects_tampering(cfg, setup, log):
    bad = RunLog.from_dict(json.loads(json.dumps(log.to_dict())))
    bad.rows[2].u = [bad.rows[2].u[0] + 1e-12]
    res = replay(cfg, bad, setup)
    assert not res.identical
    assert any(m[:2] == (2, "u") for m in res.mismatches)


def test_mu_increase_counter():
    lg = RunLog({})
    from tubeamp.lab.runner import StepRow
    base = dict(x=[0.0], u=[0.0], status="Optimal", assembly_s=0.0, solve_s=0.0, cost=0.0,
                beta_star=0.0, beta1=0.0, vol_pct=1.0, theta_bar=[0.0], alpha1=[0.0],
                degraded=False, verified=None)
    for t, mu in enumerate([[1, 1], [1, 0.5], [1.2, 0.5], [1.2, 0.5]]):
        lg.append(StepRow(t=t, mu=mu, **base))
    assert mu_increases(lg) == 1
    with pytest.raises(ValueError):
        lg.append(StepRow(t=9, mu=[0, 0], **base))


# --------------------------------------------------------------------------
# Artifacts

def test_runlog_csv_header_and_round_trip(log, tmp_path):
    p = write_runlog_csv(log, tmp_path / "runlog.csv")
    header, rows = read_csv(p)
    assert header == ["t", "x1", "x2", "u1", "status", "assembly_s", "solve_s", "cost",
                      "beta_star", "beta1", "vol_pct"] + [f"mu{i + 1}" for i in range(log.meta["r"])]
    assert header == runlog_header(2, 1, log.meta["r"])
    mem = runlog_rows(log)
    assert len(rows) == len(mem)
    for a, b in zip(mem, rows):
        assert len(a) == len(b) == len(header)
        for va, vb in zip(a, b):
            assert nan_equal(float(va), vb) if not isinstance(va, str) else va == vb


def test_sweep_and_converge_headers(tmp_path):
    res = SweepResult(gammas=np.array([0.1, 1.0]), vol20=np.array([[50.0, 40.0], [30.0, 20.0]]),
                      beta_star_mean=np.array([[0.1, 0.2]] * 2), beta1_mean=np.array([[0.3, 0.4]] * 2),
                      tape_hashes=[["a", "a"], ["b", "b"]], vol_long=None, long_steps=None,
                      eval_step=20)
    header, rows = read_csv(write_sweep_csv(res, tmp_path / "sweep.csv"))
    assert tuple(header) == SWEEP_HEADER == ("gamma", "vol20_pct", "beta_star_mean", "beta1_mean")
    assert rows == [[0.1, 40.0, 0.1, 0.3], [1.0, 30.0, 0.2, 0.4]]
    assert res.shared_tapes()
    assert CONVERGE_HEADER == ("run", "t", "diameter", "max_support_gap", "contained")


def test_table2_rows_structure(log):
    rows = table2_rows([log, log])
    assert [r[0] for r in rows] == [t for t in TABLE2_TIMES if t < len(log.rows)]
    for t, mean, lo, hi in rows:
        assert lo <= mean <= hi
        assert mean == log.rows[t].vol_pct


def test_emit_artifacts_for_log(log, tmp_path):
    files = emit_artifacts(log, tmp_path)
    names = {f.name for f in files}
    assert {"runlog.csv", "runlog.json", "table2.csv", "states.svg", "tube0.csv",
            "tube0.svg", "volume.svg"} <= names
    for f in files:
        assert f.exists() and f.stat().st_size > 0
    assert (tmp_path / "states.svg").read_text().startswith("<svg")


def test_emit_artifacts_rejects_unknown(tmp_path):
    with pytest.raises(TypeError):
        emit_artifacts(3, tmp_path)


# --------------------------------------------------------------------------
# Studies

def test_monotone_violations():
    assert monotone_violations([5, 4, 4, 3]) == 0
    assert monotone_violations([5, 6, 4, 4.5]) == 2


def test_theorem_bound():
    assert theorem_bound(0.5, 1, 0) == 1.0
    assert theorem_bound(0.5, 1, 3) == 0.125
    assert theorem_bound(0.5, 2, 5) == pytest.approx(0.75 ** 2)


def test_small_gamma_sweep_shares_tapes(cfg):
    res = gamma_sweep(cfg, (0.0, 10.0), ensemble=2, eval_step=3, long_steps=5, ic_index=0,
                      workers=1)
    assert res.vol20.shape == (2, 2)
    assert res.shared_tapes()
    assert res.vol_long is not None and len(res.vol_long) == 2
    assert np.all(res.vol20 <= 100.0 + 1e-9)


def test_small_gamma_sweep_independent_of_workers(cfg):
    a = gamma_sweep(cfg, (1.0,), ensemble=2, eval_step=2, ic_index=0, workers=1)
    b = gamma_sweep(cfg, (1.0,), ensemble=2, eval_step=2, ic_index=0, workers=2)
    assert np.array_equal(a.vol20, b.vol20)


@pytest.fixture(scope="module")
def conv_cfg():
    return load_scenario("bundled:convergence")


@pytest.mark.parametrize("variant", ["minimal", "fixed", "inexact", "noisy"])
def test_small_convergence_runs(conv_cfg, variant, tmp_path):
    res = convergence_mc(conv_cfg, variant, ensemble=4, steps=60, workers=1)
    assert len(res.runs) == 4
    assert res.containment_fraction() == 1.0 or variant == "inexact"
    for r in res.runs:
        d = r.diameter
        assert d[0] == pytest.approx(2.0)
        assert np.all(np.diff(d) <= 1e-9)
        assert r.tau <= 1.0 + 1e-12
        assert r.beta >= 0.25 - 1e-12
        assert r.zero_windows == 0
    if variant == "inexact":
        assert res.inexact_fraction() == 1.0
    assert np.all((res.empirical >= 0) & (res.empirical <= 1))
    files = emit_artifacts(res, tmp_path)
    header, rows = read_csv(tmp_path / "converge.csv")
    assert tuple(header) == CONVERGE_HEADER
    assert len(rows) == 4 * 61
    assert {f.name for f in files} >= {"converge.csv", "exceedance.csv", "table2.csv"}


def test_convergence_rejects_unknown_variant(conv_cfg):
    with pytest.raises(ValueError):
        convergence_mc(conv_cfg, "magic", ensemble=1, steps=2)


@pytest.fixture(scope="module")
def beta_small():
    c = load_scenario("bundled:third_order")
    return (beta_vs_convergence(c, n_samples=6, sequences=3, workers=1),
            beta_vs_convergence(c, n_samples=6, sequences=3, excitation="zero", workers=1))


def test_beta_study_radii_ordered(beta_small):
    for res in beta_small:
        assert np.all(res.column("inner_radius") <= res.column("outer_radius") + 1e-9)
        assert np.all(res.column("volume") > 0)
        assert -1 <= res.spearman_volume <= 1


def test_beta_study_zero_excitation_ablation(beta_small):
    fb, zero = beta_small
    # from rest with u = 0 only the disturbance excites the regressor
    assert np.median(zero.column("beta1")) < 0.1 * np.median(fb.column("beta1"))
    assert np.median(zero.column("volume")) > np.median(fb.column("volume"))
    assert np.all(zero.column("x0_norm") == 0)


# --------------------------------------------------------------------------
# CLI

def test_cli_run_and_replay(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--out", str(out), "--seed", "2", "--ic", "1"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["constraint_violations"] == 0
    logp = out / "ic1_seed2" / "runlog.json"
    assert logp.exists()
    assert main(["replay", "--log", str(logp), "--seed", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["identical"] is True
    assert main(["replay", "--log", str(logp), "--seed", "3"]) == 2


def test_cli_design(tmp_path, capsys):
    assert main(["design", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "design.json").exists()


def test_cli_mc_converge(tmp_path, capsys):
    assert main(["mc-converge", "--out", str(tmp_path), "--ensemble", "2", "--steps", "20",
                 "--variant", "fixed", "--workers", "1"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["runs"] == 2 and res["containment_fraction"] == 1.0
    assert math.isfinite(res["fraction_diameter_le_eps"])
