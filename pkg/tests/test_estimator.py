import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from tubeamp.estimator import (EmptyIntersection, ParamSet, SetEstimator, UnfalsifiedSet,
                               exact_intersection_oracle, outer_approximation, pe_coefficient,
                               project_nominal, remove_redundant, unfalsified, unfalsified_noisy,
                               update, update_multiplier, update_periodic)
from tubeamp.geometry import HPolytope, Unbounded, box, contains_polytope, inf_ball, support
from tubeamp.system import UncertainModel, make_rng, regressor, step_truth
from conftest import brute_vertices


def scalar_ar(theta_star=0.8):
    # x+ = theta x + w
    return UncertainModel(np.array([[[0.0]], [[1.0]]]), np.zeros((2, 1, 1)), [theta_star],
                          box([-1.0], [1.0]))


W1 = inf_ball(0.1, 1)


def interval(delta):
    return -delta.support([-1.0]), delta.support([1.0])


def test_unfalsified_interval(frozen):
    d = unfalsified(scalar_ar(), W1, [1.0], [0.0], [0.85])
    assert np.allclose(interval(d), frozen["delta_interval"], atol=1e-12)


def test_unfalsified_zero_regressor(second_order):
    m = second_order.model
    W = second_order.disturbance.W
    inside = unfalsified(m, W, np.zeros(2), np.zeros(1), [0.01, -0.02])
    assert inside.contains(np.array([5.0, -7.0, 3.0]))      # whole space
    outside = unfalsified(m, W, np.zeros(2), np.zeros(1), [0.2, 0.0])
    assert not outside.contains(np.zeros(3))                 # empty


def test_unfalsified_noisy_example(frozen):
    S = inf_ball(0.05, 1)
    d = unfalsified_noisy(scalar_ar(), W1, S, np.array([[-0.05], [0.05]]), [1.0], [0.0], [0.85])
    for (P, q), ref in zip(d.components, frozen["noisy_components"]):
        lo = -support(HPolytope(P, q), [-1.0])
        hi = support(HPolytope(P, q), [1.0])
        assert np.allclose([lo, hi], ref, atol=1e-10)
    assert np.allclose(interval(d), frozen["noisy_hull"], atol=1e-10)
    assert d.contains([1.0]) and not d.contains([1.06])


def test_noisy_reduces_without_noise(second_order):
    m = second_order.model
    W = second_order.disturbance.W
    x, u, xn = np.array([1.0, 2.0]), np.array([0.3]), np.array([0.9, 1.1])
    plain = unfalsified(m, W, x, u, xn)
    noisy = unfalsified_noisy(m, W, inf_ball(0.0, 2), np.zeros((1, 2)), x, u, xn)
    P, q = noisy.components[0]
    assert np.allclose(P, plain.P) and np.allclose(q, plain.q)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_truth_always_unfalsified(second_order, seed):
    m = second_order.model
    W = second_order.disturbance.W
    rng = np.random.default_rng(seed)
    x, u = rng.uniform(-5, 5, 2), rng.uniform(-1, 1, 1)
    w = rng.uniform(-0.05, 0.05, 2)
    assert unfalsified(m, W, x, u, step_truth(m, x, u, w)).contains(m.theta_star, 1e-9)
    s0, s1 = rng.uniform(-0.02, 0.02, 2), rng.uniform(-0.02, 0.02, 2)
    S = inf_ball(0.02, 2)
    Sv = np.array([[a, b] for a in (-0.02, 0.02) for b in (-0.02, 0.02)])
    d = unfalsified_noisy(m, W, S, Sv, x + s0, u, step_truth(m, x, u, w) + s1)
    assert d.contains(m.theta_star, 1e-9)


def test_update_examples(frozen):
    theta = ParamSet.from_polytope(box([-1.0], [1.0]))
    out = update(theta, [UnfalsifiedSet(np.array([[1.0]]), np.array([0.3]))])
    assert np.allclose(out.mu, [0.3, 1.0])
    # uninformative set leaves the offsets unchanged
    same = update(theta, [UnfalsifiedSet(np.array([[1.0]]), np.array([5.0]))])
    assert np.array_equal(same.mu, theta.mu)
    sq = ParamSet.from_polytope(inf_ball(1, 2))
    out = update(sq, [UnfalsifiedSet(np.array([[1.0, 1.0]]), np.array([0.0]))])
    assert np.allclose(out.mu, frozen["update_square_halfplane"], atol=1e-9)


def test_update_empty_raises():
    theta = ParamSet.from_polytope(box([-1.0], [1.0]))
    with pytest.raises(EmptyIntersection):
        update(theta, [UnfalsifiedSet(np.array([[1.0]]), np.array([-2.0]))])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_update_matches_multiplier_form(second_order, seed):
    m = second_order.model
    W = second_order.disturbance.W
    rng = np.random.default_rng(seed)
    theta = ParamSet.from_polytope(m.theta0)
    deltas = []
    for _ in range(2):
        x, u = rng.uniform(-4, 4, 2), rng.uniform(-1, 1, 1)
        deltas.append(unfalsified(m, W, x, u, step_truth(m, x, u, rng.uniform(-0.05, 0.05, 2))))
    a = update(theta, deltas)
    b = update_multiplier(theta, deltas)
    assert np.allclose(a.mu, b.mu, atol=1e-7)
    # outer bound of the exact intersection, checked against its vertices
    P = exact_intersection_oracle(m.theta0, deltas)
    V = brute_vertices(P.normals, P.offsets)
    assert np.allclose(a.mu, np.max(theta.M @ V.T, axis=1), atol=1e-7)


def test_noisy_update_modes():
    m = scalar_ar()
    S = inf_ball(0.05, 1)
    d = unfalsified_noisy(m, W1, S, np.array([[-0.05], [0.05]]), [1.0], [0.0], [0.85])
    theta = ParamSet.from_polytope(box([-2.0], [2.0]))
    lifted = update(theta, [d])
    outer = update(theta, [d], noisy="outer")
    assert np.allclose(lifted.mu, [1.0526315789473684, -0.6666666666666666], atol=1e-9)
    assert np.allclose(outer.mu, lifted.mu, atol=1e-9)


def test_outer_approximation_unbounded(second_order):
    m = second_order.model
    d = unfalsified_noisy(m, second_order.disturbance.W, inf_ball(0.01, 2),
                          np.array([[0.01, 0.01], [-0.01, -0.01]]), [1.0, 0.0], [0.0], [0.5, -0.1])
    with pytest.raises(Unbounded):
        outer_approximation(d, np.eye(3))


def test_project_examples():
    unit = ParamSet.from_polytope(inf_ball(1, 2))
    assert np.array_equal(project_nominal([0.2, -0.3], unit), [0.2, -0.3])
    assert np.allclose(project_nominal([2.0, 0.0], unit), [1.0, 0.0], atol=1e-12)
    half = ParamSet.from_polytope(HPolytope(np.vstack([np.eye(2), -np.eye(2), [[1, 1]]]),
                                            [1, 1, 1, 1, 0]))
    th = project_nominal([1.0, 1.0], half)
    assert np.allclose(th, [0.0, 0.0], atol=1e-12)
    assert half.contains(th, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
@example(500)  # solver stops short of the tight tolerance here
def test_projection_optimality(seed):
    rng = np.random.default_rng(seed)
    P = ParamSet.from_polytope(box(-rng.uniform(0.2, 1, 2), rng.uniform(0.2, 1, 2)))
    y = rng.uniform(-3, 3, 2)
    th = project_nominal(y, P)
    lo, hi = -P.mu[2:], P.mu[:2]
    assert np.allclose(th, np.clip(y, lo, hi), atol=1e-9)


def test_pe_coefficient_examples():
    w = pe_coefficient([np.eye(2)])
    assert w.beta1 == pytest.approx(1) and w.tau == pytest.approx(1)
    e1, e2 = np.diag([1.0, 0.0]), np.diag([0.0, 1.0])
    assert pe_coefficient([e1, e2]).beta1 == pytest.approx(1)
    assert pe_coefficient([np.zeros((2, 2))] * 3).beta1 == 0.0


def test_remove_redundant():
    P = HPolytope(np.vstack([np.eye(2), -np.eye(2), [[1, 1]], [[2, 0]]]), [1, 1, 1, 1, 5, 4])
    R = remove_redundant(P)
    assert R.rows == 4


def _run_estimator(m, W, steps, rng, window=2, periodic=False):
    est = SetEstimator(ParamSet.from_polytope(m.theta0), window=window, periodic=periodic)
    x = rng.uniform(-3, 3, m.n_x)
    deltas, mus = [], [est.theta.mu]
    for _ in range(steps):
        u = rng.uniform(-1, 1, m.n_u)
        xn = step_truth(m, x, u, rng.uniform(-0.05, 0.05, m.n_x))
        d = unfalsified(m, W, x, u, xn)
        deltas.append(d)
        if periodic:
            update_periodic(est, d, regressor(m, x, u)[0])
        else:
            est.observe(d, regressor(m, x, u)[0])
        mus.append(est.theta.mu)
        x = xn
    return est, deltas, np.array(mus)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_estimator_soundness_and_monotonicity(second_order, seed, periodic):
    m, W = second_order.model, second_order.disturbance.W
    est, deltas, mus = _run_estimator(m, W, 12, np.random.default_rng(seed), periodic=periodic)
    assert est.theta.contains(m.theta_star, 1e-9)
    assert np.all(np.diff(mus, axis=0) <= 0)
    # fixed-complexity set contains the exact intersection (containment LP)
    exact = exact_intersection_oracle(m.theta0, deltas)
    assert contains_polytope(est.theta.M, est.theta.mu, exact, tol=1e-8).contained
    assert 0 < est.volume_pct() <= 100


def test_periodic_updates_only_at_window_end(second_order):
    m, W = second_order.model, second_order.disturbance.W
    _, _, mus = _run_estimator(m, W, 6, np.random.default_rng(4), window=3, periodic=True)
    for t in (1, 2, 4, 5):
        assert np.array_equal(mus[t], mus[t - 1])


def test_update_periodic_requires_mode():
    est = SetEstimator(ParamSet.from_polytope(box([-1.0], [1.0])))
    with pytest.raises(ValueError):
        update_periodic(est, UnfalsifiedSet(np.array([[1.0]]), np.array([0.3])))


def test_diameter_and_volume():
    ps = ParamSet.from_polytope(box([0.0, -1.0], [0.3, 1.0]))
    assert ps.diameter() == pytest.approx(2.0)
    assert ps.volume() == pytest.approx(0.6)
