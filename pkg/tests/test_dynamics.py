"""Rigid-body kinematics and inverse dynamics checks."""
import numpy as np
import pytest

from locoplan import builtin_model
from locoplan import dynamics as dyn


def _random_state(model, rng, scale=0.5):
    q = np.zeros(model.n_q)
    q[:3] = rng.uniform(-0.5, 0.5, 3)
    q[3:6] = rng.uniform(-0.3, 0.3, 3)          # MRP, well inside the unit ball
    q[6:] = rng.uniform(-scale, scale, model.n_q - 6)
    v = rng.uniform(-scale, scale, model.n_v)
    return q, v


def test_mass_matrix_symmetric_positive_definite(miniquad):
    rng = np.random.default_rng(11)
    for _ in range(5):
        q, _ = _random_state(miniquad, rng)
        M = dyn.mass_matrix(miniquad, q)
        assert np.array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() > 0.0


def test_inverse_dynamics_linear_in_acceleration(miniquad):
    # rnea(q, v, a) - rnea(q, v, 0) must equal M a for any a
    rng = np.random.default_rng(12)
    q, v = _random_state(miniquad, rng)
    M = dyn.mass_matrix(miniquad, q)
    h = dyn.inverse_dynamics(miniquad, q, v, np.zeros(miniquad.n_v))
    for _ in range(3):
        a = rng.standard_normal(miniquad.n_v)
        g = dyn.inverse_dynamics(miniquad, q, v, a)
        assert np.abs(g - h - M @ a).max() < 1e-10


def test_gravity_load_at_rest(miniquad, standing_q):
    z = np.zeros(miniquad.n_v)
    h = dyn.bias(miniquad, standing_q, z)
    w = miniquad.total_mass() * dyn.GRAVITY
    # vertical force row carries the whole weight, no lateral force
    assert abs(h[0]) < 1e-9 and abs(h[1]) < 1e-9
    assert abs(h[2] - w) < 1e-9
    # the posture is left-right symmetric: no roll or yaw moment
    assert abs(h[3]) < 1e-9 and abs(h[5]) < 1e-9


def test_pendulum_matches_rigid_rod_formula():
    # hinge about -y, unit mass bob, com 0.5 below the pivot; the required
    # torque is I th_dd + m g l sin(th) with I the rod inertia about the pivot
    p = builtin_model("pendulum")
    inertia, m, l = 0.2500000000010, 1.0, 0.5
    rng = np.random.default_rng(13)
    for _ in range(20):
        th, thd, thdd = rng.uniform(-3.0, 3.0, 3)
        q = np.zeros(p.n_q)
        v = np.zeros(p.n_v)
        a = np.zeros(p.n_v)
        q[6], v[6], a[6] = th, thd, thdd
        tau = dyn.inverse_dynamics(p, q, v, a)[6]
        ref = inertia * thdd + m * dyn.GRAVITY * l * np.sin(th)
        assert abs(tau - ref) < 1e-10


def test_point_jacobian_matches_path_derivative(miniquad):
    # J v must be the world velocity of the point along q(t) = q + t qdot
    rng = np.random.default_rng(14)
    q, v = _random_state(miniquad, rng)
    eps = 1e-6
    qdot = dyn.configuration_rate(q, v)
    for c in miniquad.contacts:
        J = dyn.point_jacobian(miniquad, q, c.link, c.offset)
        names = [cc.name for cc in miniquad.contacts]
        ci = names.index(c.name)
        pp = dyn.fk(miniquad, q + eps * qdot).contacts[ci]
        pm = dyn.fk(miniquad, q - eps * qdot).contacts[ci]
        assert np.abs((pp - pm) / (2 * eps) - J @ v).max() < 1e-7


def test_ee_jacobian_matches_path_derivative(miniquad):
    rng = np.random.default_rng(15)
    q, v = _random_state(miniquad, rng)
    eps = 1e-6
    qdot = dyn.configuration_rate(q, v)
    J = dyn.ee_jacobian(miniquad, q)
    pp = dyn.fk(miniquad, q + eps * qdot).ee.translation
    pm = dyn.fk(miniquad, q - eps * qdot).ee.translation
    assert np.abs((pp - pm) / (2 * eps) - J @ v).max() < 1e-7


def test_frame_jacobian_angular_rows(miniquad):
    # rows 3:6 give the world angular velocity: vee(Rdot R^T) along the path
    rng = np.random.default_rng(16)
    q, v = _random_state(miniquad, rng)
    eps = 1e-6
    qdot = dyn.configuration_rate(q, v)
    J = dyn.frame_jacobian(miniquad, q, "arm_fore")
    Rp = dyn.fk(miniquad, q + eps * qdot).link_pose("arm_fore").rotation
    Rm = dyn.fk(miniquad, q - eps * qdot).link_pose("arm_fore").rotation
    Rdot = (Rp - Rm) / (2 * eps)
    W = Rdot @ dyn.fk(miniquad, q).link_pose("arm_fore").rotation.T
    omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
    assert np.abs(omega - J[3:6] @ v).max() < 1e-7


def test_support_jacobian_stacks_contact_points(miniquad, standing_q):
    Js = dyn.support_jacobian(miniquad, standing_q)
    for i, c in enumerate(miniquad.contacts):
        Jp = dyn.point_jacobian(miniquad, standing_q, c.link, c.offset)
        assert np.array_equal(Js[3 * i:3 * i + 3], Jp)
    # active subset picks the same rows
    sub = dyn.support_jacobian(miniquad, standing_q, active=[1, 3])
    assert np.array_equal(sub, np.vstack([Js[3:6], Js[9:12]]))


def test_contact_wrench_enters_linearly(miniquad):
    # g(lam, f) = g(0, 0) - Js^T lam - Je^T f, exactly
    rng = np.random.default_rng(17)
    q, v = _random_state(miniquad, rng)
    a = rng.standard_normal(miniquad.n_v)
    lam = rng.standard_normal(3 * len(miniquad.contacts))
    f = rng.standard_normal(3)
    g0 = dyn.inverse_dynamics(miniquad, q, v, a)
    g = dyn.inverse_dynamics(miniquad, q, v, a, lam, f_ext=f)
    Js = dyn.support_jacobian(miniquad, q)
    Je = dyn.ee_jacobian(miniquad, q)
    assert np.abs(g - (g0 - Js.T @ lam - Je.T @ f)).max() < 1e-9


def test_active_subset_wrench(miniquad):
    rng = np.random.default_rng(18)
    q, v = _random_state(miniquad, rng)
    a = rng.standard_normal(miniquad.n_v)
    lam = rng.standard_normal(6)
    g = dyn.inverse_dynamics(miniquad, q, v, a, lam, active=[0, 2])
    full = np.zeros(12)
    full[0:3], full[6:9] = lam[0:3], lam[3:6]
    ref = dyn.inverse_dynamics(miniquad, q, v, a, full)
    assert np.abs(g - ref).max() < 1e-12


def test_batch_inverse_dynamics_matches_loop(miniquad):
    rng = np.random.default_rng(19)
    B = 5
    qs = np.stack([_random_state(miniquad, rng)[0] for _ in range(B)])
    vs = rng.uniform(-0.5, 0.5, (B, miniquad.n_v))
    acc = rng.uniform(-1.0, 1.0, (B, miniquad.n_v))
    t = dyn.tree(miniquad)
    g = dyn.rnea_batch(t, qs, vs, acc)
    for b in range(B):
        ref = dyn.inverse_dynamics(miniquad, qs[b], vs[b], acc[b])
        assert np.abs(g[b] - ref).max() < 1e-12


def test_configuration_rate_blocks(miniquad):
    from locoplan.spatial import mrp_rate
    rng = np.random.default_rng(20)
    q, v = _random_state(miniquad, rng)
    qd = dyn.configuration_rate(q, v)
    assert np.array_equal(qd[:3], v[:3])
    assert np.array_equal(qd[6:], v[6:])
    assert np.abs(qd[3:6] - mrp_rate(q[3:6], v[3:6])).max() < 1e-15


def test_fk_places_standing_feet_on_ground(miniquad, standing_q):
    fk = dyn.fk(miniquad, standing_q)
    # the standing posture was chosen to put all four feet at z = 0
    assert np.abs(fk.contacts[:, 2]).max() < 1e-3
