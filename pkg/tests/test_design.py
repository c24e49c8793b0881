import numpy as np
import pytest

from tubeamp.design import (NotContractive, TerminalInfeasible, check_invariant,
                            compute_wbar, contraction_factor, design_from_dict, design_to_dict,
                            load_design, make_shape, min_lambda_gain, save_design, synthesize_T,
                            terminal_exists, tube_coefficients, verify_contractive, vertex_maps)
from tubeamp.geometry import HPolytope, box, inf_ball, minimal_rows
from tubeamp.system import UncertainModel, regressor


def scalar_model(a_lo, a_hi, b=1.0):
    # x+ = (a_mid + theta) x + b u with theta in [a_lo - a_mid, a_hi - a_mid]
    mid, half = 0.5 * (a_lo + a_hi), 0.5 * (a_hi - a_lo)
    A = np.array([[[mid]], [[half]]])
    B = np.array([[[b]], [[0.0]]])
    return UncertainModel(A, B, [0.0], box([-1.0], [1.0]))


def test_synthesize_T_scalar():
    m = UncertainModel(np.array([[[0.5]], [[0.0]]]), np.array([[[0.0]], [[0.0]]]), [0.0],
                       box([-1.0], [1.0]))
    T, P, _ = synthesize_T(m, K_init=np.zeros((1, 1)), n_dirs=2)
    assert T.shape == (2, 1)
    assert T[0, 0] == pytest.approx(-T[1, 0]) and T[0, 0] > 0


def test_synthesize_T_second_order(second_order, design):
    assert design.shape.T.shape == (9, 2)
    X = HPolytope(design.shape.T, np.ones(9))
    assert np.all(minimal_rows(X))


def test_min_lambda_scalar(frozen):
    K_ref, lam_ref = frozen["scalar_gain"]
    fb = min_lambda_gain(scalar_model(0.5, 0.7), np.array([[1.0], [-1.0]]))
    assert fb.K[0, 0] == pytest.approx(K_ref, abs=1e-6)
    assert fb.lam == pytest.approx(lam_ref, abs=1e-6)


def test_dead_beat_plant():
    m = UncertainModel(np.zeros((2, 1, 1)), np.zeros((2, 1, 1)), [0.0], box([-1.0], [1.0]))
    T = np.array([[1.0], [-1.0]])
    assert contraction_factor(m, T, np.array([[0.7]])) == pytest.approx(0.0)
    assert min_lambda_gain(m, T).lam == pytest.approx(0.0, abs=1e-8)


def test_not_contractive():
    # an unstable, uncontrollable scalar mode cannot be contracted
    m = UncertainModel(np.array([[[1.5]], [[0.0]]]), np.zeros((2, 1, 1)), [0.0], box([-1.0], [1.0]))
    with pytest.raises(NotContractive):
        min_lambda_gain(m, np.array([[1.0], [-1.0]]))


def test_second_order_contractive(second_order, design):
    m = second_order.model
    assert design.feedback.lam < 1
    assert verify_contractive(m, design.shape.T, design.feedback.K, design.feedback.lam)
    assert not verify_contractive(m, design.shape.T, design.feedback.K, design.feedback.lam - 1e-3)


def test_vertex_maps_box(frozen):
    T = np.vstack([np.eye(2), -np.eye(2)])
    U, R = vertex_maps(T)
    assert U.shape[0] == 4
    j = [k for k in range(4) if np.allclose(U[k] @ np.ones(4), [1, 1])][0]
    assert R[j] == (0, 1)
    assert np.allclose(U[j], np.hstack([np.eye(2), np.zeros((2, 2))]))
    V = sorted(map(list, (U @ np.array([2.0, 1, 1, 1])).tolist()))
    assert np.allclose(V, frozen["box_vertices_alpha2111"])


def test_vertex_maps_triangle():
    T = np.array([[-1.0, -0.2], [0.3, -1.0], [1.0, 1.0]])
    U, R = vertex_maps(T)
    assert len(U) == 3 and len(set(R)) == 3


def test_wbar(frozen):
    T = np.vstack([np.eye(2), -np.eye(2)])
    assert not compute_wbar(T, inf_ball(0.0, 2)).any()
    assert np.allclose(compute_wbar(T, inf_ball(0.05, 2)), 0.05)
    Tg = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -1.0]])
    assert np.allclose(compute_wbar(Tg, inf_ball(0.05, 2)), frozen["wbar_skew"], atol=1e-12)


def test_tube_coefficients_match_regressor(second_order, design):
    m = second_order.model
    K = design.feedback.K
    co = tube_coefficients(m, design.shape, K)
    rng = np.random.default_rng(0)
    alpha, v = rng.uniform(0.5, 2, 9), rng.standard_normal(1)
    for j in range(design.shape.m):
        x = design.shape.U[j] @ alpha
        u = K @ x + v
        D, d = regressor(m, x, u)
        TD = (design.shape.T @ D).reshape(-1)
        assert np.allclose(co.Da[j] @ alpha + co.Dv @ v, TD)
        assert np.allclose(co.da[j] @ alpha + co.dv @ v, design.shape.T @ d)


def test_terminal_second_order(second_order, design):
    m = second_order.model
    aN = design.alpha_terminal
    assert aN is not None
    assert check_invariant(m, design.shape, design.feedback.K, aN, m.theta0, second_order.disturbance.W)


def test_terminal_nominal_unit():
    # W = {0}, Theta = {0}, stable A0: alpha = 1 is admissible
    m = UncertainModel(np.array([[[0.5, 0.1], [0.0, 0.4]], np.zeros((2, 2))]),
                       np.array([[[0.0], [1.0]], np.zeros((2, 1))]), [0.0], box([0.0], [0.0]))
    T = np.vstack([np.eye(2), -np.eye(2)])
    shape = make_shape(T, inf_ball(0.0, 2))
    aN = terminal_exists(m, shape, np.zeros((1, 2)))
    assert check_invariant(m, shape, np.zeros((1, 2)), aN, m.theta0, inf_ball(0.0, 2))


def test_terminal_infeasible_without_contraction():
    m = UncertainModel(np.array([[[1.2]], [[0.0]]]), np.zeros((2, 1, 1)), [0.0], box([-1.0], [1.0]),
                       F=[[1.0]], G=[[0.0]])
    shape = make_shape(np.array([[1.0], [-1.0]]), inf_ball(0.1, 1))
    with pytest.raises(TerminalInfeasible):
        terminal_exists(m, shape, np.zeros((1, 1)))


def test_design_roundtrip(design, tmp_path):
    save_design(design, tmp_path / "d.json")
    back = load_design(tmp_path / "d.json")
    assert np.array_equal(back.shape.T, design.shape.T)
    assert np.array_equal(back.shape.U, design.shape.U)
    assert back.shape.active == design.shape.active
    assert design_to_dict(design_from_dict(design_to_dict(design))) == design_to_dict(design)
