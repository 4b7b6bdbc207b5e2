import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpsls import sls
from cpsls.dynamics import DiscreteDynamics, LinearDynamics, finite_difference_jacobian
from cpsls.models import LearnedDynamics, MlpParams

import oracles
from ltv_fixtures import default_weights, nominal_for, random_ltv, unit_ball


def feedback_sim(ltv, resp, nominal, xi):
    """Simulate x+ = A x + B u + E xi with u = v + K (x - z)."""
    z, v = nominal
    return sls.simulate_ltv(ltv, z[0], lambda k, xs, us: v[k] + (xs[..., k, :] - z[k]) @ resp.K[k].T, xi)


# ---------------------------------------------------------------- linearize

def test_linearize_linear_model_exact():
    A, B = np.arange(9.0).reshape(3, 3), np.ones((3, 1))
    A2, B2 = sls.linearize(LinearDynamics(A, B), np.zeros(3), np.zeros(1))
    np.testing.assert_array_equal(A2, A)
    np.testing.assert_array_equal(B2, B)


def test_linearize_mlp_matches_fd():
    model = LearnedDynamics(MlpParams.init(6, 16, 4, seed=3, out_scale=0.5))
    x, u = np.array([0.1, -0.3, 0.5, 1.0]), np.array([0.2, -0.4])
    A, B = sls.linearize(model, x, u)
    Af, Bf = finite_difference_jacobian(model.predict, x, u)
    np.testing.assert_allclose(A, Af, atol=1e-7)
    np.testing.assert_allclose(B, Bf, atol=1e-7)


def test_linearize_car_heading_entry():
    dyn = DiscreteDynamics.for_tag("car-id")
    A, _ = sls.linearize(dyn, np.array([0.0, 0.0, 0.4, 2.0]), np.zeros(2))
    assert A[0, 2] == pytest.approx(-2.0 * math.sin(0.4) * 0.1)


# ---------------------------------------------------------------- rollout

def test_rollout_zero_disturbance():
    rng = np.random.default_rng(0)
    ltv = random_ltv(rng, T=6)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    z, v = nominal_for(ltv, rng)
    x, u = sls.closed_loop_rollout(ltv, resp, (z, v), np.zeros((5, 4)))
    np.testing.assert_array_equal(x, z)
    np.testing.assert_array_equal(u, v)


def test_rollout_one_step():
    rng = np.random.default_rng(1)
    ltv = random_ltv(rng, T=3)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    z, v = nominal_for(ltv, rng)
    xi = np.zeros((2, 4))
    xi[0] = rng.normal(size=4)
    x, _ = sls.closed_loop_rollout(ltv, resp, (z, v), xi)
    np.testing.assert_allclose(x[1], z[1] + ltv.E[0] @ xi[0], rtol=1e-14)


def test_rollout_matches_simulation_T5():
    rng = np.random.default_rng(2)
    ltv = random_ltv(rng, T=5)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    nom = nominal_for(ltv, rng)
    xi = unit_ball(rng, (50, 4), 4)
    x, u = sls.closed_loop_rollout(ltv, resp, nom, xi)
    xs, us = feedback_sim(ltv, resp, nom, xi)
    np.testing.assert_allclose(x, xs, atol=1e-9)
    np.testing.assert_allclose(u, us, atol=1e-9)


def test_rollout_rejects_infeasible_response():
    rng = np.random.default_rng(3)
    ltv = random_ltv(rng, T=4)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    resp.Phi_x[3, 0] += 1.0
    with pytest.raises(sls.InfeasibleResponseError):
        sls.closed_loop_rollout(ltv, resp, nominal_for(ltv, rng), np.zeros((3, 4)))


# ---------------------------------------------------------------- tubes

def block_response(blocks, T=3, n_u=1):
    n_x = blocks[0].shape[0]
    resp = sls.SystemResponse.zeros(T, n_x, n_u)
    for j, b in enumerate(blocks):
        resp.Phi_x[T - 1, j] = b
    return resp


def test_tube_identity_block():
    t = sls.tube_extents(block_response([np.eye(3)], T=2), (np.zeros((2, 3)), np.zeros((1, 1))))
    np.testing.assert_allclose(t.state[1], 1.0)
    np.testing.assert_allclose(t.state[0], 0.0)


def test_tube_minkowski_sum():
    t = sls.tube_extents(block_response([np.eye(2), 2 * np.eye(2)]), (np.zeros((3, 2)), np.zeros((2, 1))))
    np.testing.assert_allclose(t.state[2], 3.0)
    assert t.max_axis_length() == 6.0


def test_tube_extent_is_support_function():
    rng = np.random.default_rng(4)
    blocks = [rng.normal(size=(3, 3)) for _ in range(2)]
    t = sls.tube_extents(block_response(blocks), (np.zeros((3, 3)), np.zeros((2, 1))))
    xi = unit_ball(rng, (20000, 2), 3)
    reach = np.einsum("jab,njb->na", np.array(blocks), xi)
    assert np.all(reach.max(axis=0) <= t.state[2] + 1e-12)
    assert np.all(reach.max(axis=0) >= 0.9 * t.state[2])
    for i in range(3):
        aligned = np.array([b[i] / np.linalg.norm(b[i]) for b in blocks])
        assert np.einsum("jb,jb->", np.array(blocks)[:, i], aligned) == pytest.approx(t.state[2, i], rel=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1.01, 10.0))
def test_tube_scales_with_E(seed, gamma):
    rng = np.random.default_rng(seed)
    ltv = random_ltv(rng, n_x=3, n_u=1, T=6)
    nom = nominal_for(ltv, rng)
    w = default_weights(3, 1)
    t1 = sls.tube_extents(sls.riccati_phi(ltv, w), nom)
    t2 = sls.tube_extents(sls.riccati_phi(sls.LtvModel(ltv.A, ltv.B, gamma * ltv.E), w), nom)
    np.testing.assert_allclose(t2.state, gamma * t1.state, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(t2.control, gamma * t1.control, rtol=1e-12, atol=1e-14)


def test_tube_axis_lengths_and_volume():
    t = sls.Tube(np.zeros((2, 1)), np.zeros((1, 1)), np.array([[0.0], [0.5]]), np.array([[2.0]]))
    assert t.max_axis_length() == 4.0
    assert t.max_axis_length(1) == 1.0
    assert t.log_volume() == pytest.approx(math.log(0.5))


# ---------------------------------------------------------------- tightening

def test_tighten_zero_response():
    c = sls.halfspace([1.0, 2.0], [0.0], 0.5)
    z = np.array([[1.0, 1.0], [2.0, -1.0]])
    assert sls.tighten(c, sls.SystemResponse.zeros(2, 2, 1), z, np.zeros((1, 1)), 1) == pytest.approx(0.5)


def test_tighten_unit_block():
    c = sls.halfspace([1.0, 0.0], [0.0], 0.0)
    resp = block_response([np.eye(2)], T=2)
    assert sls.tighten(c, resp, np.zeros((2, 2)), np.zeros((1, 1)), 1) == pytest.approx(1.0)


def test_tighten_circle_obstacle_hand():
    c = sls.sphere_obstacle([0.0, 0.0], 1.0, [0, 1], 1)
    resp = block_response([np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0, 1.0], [1.0, 0.0]])])
    z = np.array([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    # gradient (-1, 0): row norms sqrt(5) and 1; g = 1 - 2
    assert sls.tighten(c, resp, z, np.zeros((2, 1)), 2) == pytest.approx(math.sqrt(5.0))


def test_sphere_gradient_matches_fd():
    c = sls.sphere_obstacle([1.0, -1.0, 0.5], 0.7, [0, 1, 2], 2)
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(size=5)
        gx, _ = c.grad(x, np.zeros(2))
        h = 1e-6
        fd = np.array([(c.g(x + h * e, None) - c.g(x - h * e, None)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(gx, fd, rtol=1e-4, atol=1e-8)


def test_tightening_soundness():
    rng = np.random.default_rng(6)
    ltv = random_ltv(rng, T=10)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    z, v = nominal_for(ltv, rng)
    x, u = sls.closed_loop_rollout(ltv, resp, (z, v), unit_ball(rng, (10000, 9), 4))
    for k in range(1, 9):
        c = sls.halfspace(rng.normal(size=4), rng.normal(size=2), 0.0)
        c.b = -sls.tighten(c, resp, z, v, k)  # tightened constraint holds with equality
        assert sls.tighten(c, resp, z, v, k) == pytest.approx(0.0, abs=1e-12)
        g = x[:, k] @ c.grad(None, None)[0] + u[:, k] @ c.grad(None, None)[1] + c.b
        assert np.all(g <= 1e-10)


# ---------------------------------------------------------------- Riccati

def test_riccati_zero_E():
    rng = np.random.default_rng(7)
    ltv = random_ltv(rng, T=5)
    ltv.E[:] = 0.0
    assert sls.riccati_phi(ltv, default_weights(4, 2)).is_zero()


def test_riccati_scalar_gain():
    ltv = sls.LtvModel(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.ones((1, 1, 1)))
    K = sls.riccati_gains(ltv, np.eye(1), np.eye(1), np.eye(1))
    assert K[0, 0, 0] == pytest.approx(-0.5)
    ltv3 = sls.LtvModel(np.ones((2, 1, 1)), np.ones((2, 1, 1)), np.ones((2, 1, 1)))
    resp = sls.riccati_phi(ltv3, (np.eye(1), np.eye(1), np.eye(1)))
    assert resp.Phi_u[1, 0, 0, 0] == pytest.approx(-0.5)
    assert resp.Phi_x[2, 0, 0, 0] == pytest.approx(0.5)


def test_riccati_rejects_indefinite():
    ltv = sls.LtvModel(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.ones((1, 1, 1)))
    with pytest.raises(sls.RiccatiError):
        sls.riccati_gains(ltv, np.eye(1), np.eye(1), -2 * np.eye(1))


@settings(max_examples=40)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(2, 15))
def test_riccati_response_identity(seed, n_x, T):
    rng = np.random.default_rng(seed)
    n_u = int(rng.integers(1, n_x + 1))
    ltv = random_ltv(rng, n_x=n_x, n_u=n_u, T=T)
    resp = sls.riccati_phi(ltv, default_weights(n_x, n_u))
    assert resp.residual(ltv) <= 1e-9 * max(1.0, np.abs(resp.Phi_x).max())
    for j in range(T - 1):
        np.testing.assert_array_equal(resp.Phi_x[j + 1, j], ltv.E[j])


def test_constant_response_uses_V():
    rng = np.random.default_rng(8)
    ltv = random_ltv(rng, T=4)
    resp = sls.constant_response(ltv, 0.3 * np.eye(4), default_weights(4, 2))
    for j in range(3):
        np.testing.assert_array_equal(resp.Phi_x[j + 1, j], 0.3 * np.eye(4))


def test_closed_loop_identity_and_containment():
    rng = np.random.default_rng(9)
    ltv = random_ltv(rng, n_x=6, n_u=3, T=15)
    resp = sls.riccati_phi(ltv, default_weights(6, 3))
    nom = nominal_for(ltv, rng)
    xi = unit_ball(rng, (10000, 14), 6)
    x, u = sls.closed_loop_rollout(ltv, resp, nom, xi)
    xs, us = feedback_sim(ltv, resp, nom, xi)
    assert np.max(np.abs(x - xs)) <= 1e-9 * max(1.0, np.abs(xs).max())
    assert np.max(np.abs(u - us)) <= 1e-9 * max(1.0, np.abs(us).max())
    tube = sls.tube_extents(resp, nom)
    assert np.all(np.abs(x - nom[0]) <= tube.state + 1e-12)
    assert np.all(np.abs(u - nom[1]) <= tube.control + 1e-12)


# ---------------------------------------------------------------- subproblem

class QuadCost:
    """J(w) = 0.5 w' H w + h' w over w = [z.ravel(), v.ravel()]."""

    def __init__(self, H, h):
        self.H, self.h = H, h

    def quadratic(self, z, v):
        w = np.concatenate([z.ravel(), v.ravel()])
        return self.H @ w + self.h, self.H


def tracking_cost(T, n_x, n_u, Q, R, Qf, goal):
    nz = T * n_x
    H = np.zeros((nz + (T - 1) * n_u,) * 2)
    h = np.zeros(H.shape[0])
    for k in range(T - 1):
        H[k * n_x:(k + 1) * n_x, k * n_x:(k + 1) * n_x] = 2 * Q
        H[nz + k * n_u:nz + (k + 1) * n_u, nz + k * n_u:nz + (k + 1) * n_u] = 2 * R
    H[nz - n_x:nz, nz - n_x:nz] = 2 * Qf
    h[nz - n_x:nz] = -2 * Qf @ goal
    return QuadCost(H, h)


def test_subproblem_matches_lqr():
    rng = np.random.default_rng(10)
    n_x, n_u, T = 3, 2, 8
    A = np.eye(n_x) + 0.2 * rng.normal(size=(n_x, n_x))
    B = rng.normal(size=(n_x, n_u))
    ltv = sls.LtvModel(np.repeat(A[None], T - 1, 0), np.repeat(B[None], T - 1, 0), np.zeros((T - 1, n_x, n_x)))
    Q, R, Qf = 0.5 * np.eye(n_x), np.eye(n_u), 10 * np.eye(n_x)
    goal, x0 = rng.normal(size=n_x), rng.normal(size=n_x)
    cost = tracking_cost(T, n_x, n_u, Q, R, Qf, goal)
    res = sls.scp_subproblem((np.zeros((T, n_x)), np.zeros((T - 1, n_u))), ltv,
                             sls.SystemResponse.zeros(T, n_x, n_u), [], cost, x0, trust_radius=None)
    assert res.status == sls.OPTIMAL
    xs, us = oracles.lqr_tracking(A, B, Q, R, Qf, x0, goal, T)
    np.testing.assert_allclose(res.dv, us, atol=1e-6)
    np.testing.assert_allclose(res.dz, xs, atol=1e-6)


def test_subproblem_scalar_kkt():
    # min (x1 - 2)^2 + u^2 with x1 = u, subject to x1 <= 0.5: unconstrained u = 1, active bound u = 0.5
    ltv = sls.LtvModel(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    cost = tracking_cost(2, 1, 1, np.zeros((1, 1)), np.eye(1), np.eye(1), np.array([2.0]))
    cur = (np.zeros((2, 1)), np.zeros((1, 1)))
    resp = sls.SystemResponse.zeros(2, 1, 1)
    free = sls.scp_subproblem(cur, ltv, resp, [], cost, [0.0], trust_radius=None)
    assert free.dv[0, 0] == pytest.approx(1.0, abs=1e-8)
    bound = sls.box_constraints(None, 0.5, 0, 1, 1)
    res = sls.scp_subproblem(cur, ltv, resp, bound, cost, [0.0], trust_radius=None)
    assert res.status == sls.OPTIMAL
    assert res.dv[0, 0] == pytest.approx(0.5, abs=1e-8)
    assert res.predicted_cost == pytest.approx(2.5 - 4.0, abs=1e-6)  # J(0.5) - J(0)


def test_subproblem_contradictory_box_infeasible():
    ltv = sls.LtvModel(np.ones((2, 1, 1)), np.ones((2, 1, 1)), np.zeros((2, 1, 1)))
    cost = tracking_cost(3, 1, 1, np.eye(1), np.eye(1), np.eye(1), np.zeros(1))
    cons = sls.box_constraints(1.0, 0.0, 0, 1, 1, on="u")
    res = sls.scp_subproblem((np.zeros((3, 1)), np.zeros((2, 1))), ltv, sls.SystemResponse.zeros(3, 1, 1),
                             cons, cost, [0.0], trust_radius=None)
    assert res.status == sls.INFEASIBLE


def test_subproblem_trust_region_respected():
    ltv = sls.LtvModel(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    cost = tracking_cost(2, 1, 1, np.zeros((1, 1)), 1e-3 * np.eye(1), np.eye(1), np.array([10.0]))
    res = sls.scp_subproblem((np.zeros((2, 1)), np.zeros((1, 1))), ltv, sls.SystemResponse.zeros(2, 1, 1),
                             [], cost, [0.0], trust_radius=0.25)
    assert res.status == sls.OPTIMAL
    assert abs(res.dv[0, 0]) <= 0.25 + 1e-9


def test_subproblem_tightening_shrinks_step():
    ltv = sls.LtvModel(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.ones((1, 1, 1)))
    cost = tracking_cost(2, 1, 1, np.zeros((1, 1)), np.eye(1), np.eye(1), np.array([2.0]))
    resp = sls.SystemResponse.zeros(2, 1, 1)
    resp.Phi_x[1, 0] = 0.2
    res = sls.scp_subproblem((np.zeros((2, 1)), np.zeros((1, 1))), ltv, resp,
                             sls.box_constraints(None, 0.5, 0, 1, 1), cost, [0.0], trust_radius=None)
    assert res.dv[0, 0] == pytest.approx(0.3, abs=1e-8)


def test_subproblem_elastic_mode_never_infeasible():
    ltv = sls.LtvModel(np.ones((2, 1, 1)), np.ones((2, 1, 1)), np.zeros((2, 1, 1)))
    cost = tracking_cost(3, 1, 1, np.eye(1), np.eye(1), np.eye(1), np.zeros(1))
    cons = sls.box_constraints(1.0, 0.0, 0, 1, 1, on="x")
    res = sls.scp_subproblem((np.zeros((3, 1)), np.zeros((2, 1))), ltv, sls.SystemResponse.zeros(3, 1, 1),
                             cons, cost, [0.0], trust_radius=None, slack_penalty=100.0)
    assert res.status == sls.OPTIMAL


def test_dump_debug(tmp_path):
    import json
    rng = np.random.default_rng(11)
    ltv = random_ltv(rng, T=3)
    resp = sls.riccati_phi(ltv, default_weights(4, 2))
    tube = sls.tube_extents(resp, nominal_for(ltv, rng))
    path = tmp_path / "d.json"
    sls.dump_debug(path, resp, tube)
    blob = json.loads(path.read_text())
    assert np.asarray(blob["response"]["Phi_x"]).shape == resp.Phi_x.shape
