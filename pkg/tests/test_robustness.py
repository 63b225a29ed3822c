"""Margin computation: decision rule, oracle, failure analysis, margin rows."""
import numpy as np
import pytest

from locoplan import dynamics as dyn
from locoplan import robustness as rb
from locoplan import solver as sv
from locoplan.transcription import (ContactSchedule, MeshGrid, StancePhase,
                                    assemble_plan_problem)


@pytest.fixture(scope="module")
def standing_knot(miniquad, standing_q):
    """A dynamically consistent standing knot: v = vdot = 0, four feet
    sharing the weight (least-norm balance), torques from inverse dynamics."""
    m = miniquad
    q = standing_q
    z = np.zeros(m.n_v)
    g0 = dyn.inverse_dynamics(m, q, z, z)
    Js = dyn.support_jacobian(m, q)
    lam = np.linalg.lstsq(Js[:, :6].T, g0[:6], rcond=None)[0]
    resid = dyn.inverse_dynamics(m, q, z, z, lam, active=[0, 1, 2, 3])
    tau = resid[6:]
    assert np.abs(resid[:6]).max() < 1e-9
    return q, z, z, tau, lam, [0, 1, 2, 3]


@pytest.fixture(scope="module")
def standing_suf(miniquad, standing_knot):
    q, v, vd, tau, lam, act = standing_knot
    return rb.suf_at_knot(miniquad, q, v, vd, tau, lam, act)


def test_smooth_norm():
    assert rb.smooth_norm(np.zeros(3)) == 0.0
    z = np.array([3.0, 4.0])
    assert abs(rb.smooth_norm(z) - 5.0) < rb.NORM_DELTA
    # upper bound ||z||, lower bound ||z|| - delta, elementwise over a batch
    zs = np.random.default_rng(0).standard_normal((20, 3))
    n = rb.smooth_norm(zs)
    assert n.shape == (20,)
    true = np.linalg.norm(zs, axis=1)
    assert np.all(n <= true + 1e-15)
    assert np.all(n >= true - rb.NORM_DELTA)


def test_torque_polytope(miniquad, standing_knot):
    tp = rb.torque_polytope(miniquad)
    n = miniquad.n_j
    assert tp.A.shape == (2 * n, n)
    tau = standing_knot[3]
    assert tp.slack(tau).min() > 0.0
    # a torque at the upper bound has zero slack on its upper row
    tb = miniquad.tau_bounds()
    s = tp.slack(tb[:, 1])
    assert np.abs(s[:n]).max() < 1e-12
    assert any("upper" in nm for nm in tp.row_names)


def test_friction_polytope(miniquad, standing_knot):
    lam = standing_knot[4]
    fp = rb.friction_polytope(miniquad, [0, 1, 2, 3])
    assert fp.A.shape == (20, 12)
    assert fp.slack(lam).min() > 0.0
    # pure downward push violates only the min-normal row of that foot
    bad = lam.copy()
    bad[2] = 0.2
    s = fp.slack(bad)
    assert s[4] < 0.0
    assert s[5:].min() > 0.0


def test_recover_gain_torque(miniquad, standing_q):
    rng = np.random.default_rng(3)
    Js = dyn.support_jacobian(miniquad, standing_q)
    Je = dyn.ee_jacobian(miniquad, standing_q)
    K = rng.standard_normal((12, 3))
    rho = 7.5
    Kt = rb.recover_gain_torque(Js[:, 6:], Je[:, 6:], K, rho)
    ref = -(Js[:, 6:].T @ K) - rho * Je[:, 6:].T
    assert np.abs(Kt - ref).max() < 1e-12


def test_suf_at_knot_standing(miniquad, standing_knot, standing_suf):
    q, v, vd, tau, lam, act = standing_knot
    k = standing_suf
    assert k.status in ("Optimal", "Feasible")
    assert k.rho > 5.0
    assert k.gain_contact.shape == (12, 3)
    assert k.gain_torque.shape == (miniquad.n_j, 3)
    Js = dyn.support_jacobian(miniquad, q)
    Je = dyn.ee_jacobian(miniquad, q)
    ref = rb.recover_gain_torque(Js[:, 6:], Je[:, 6:], k.gain_contact, k.rho)
    assert np.abs(k.gain_torque - ref).max() < 1e-10


def test_decision_rule_holds_in_sampled_directions(miniquad, standing_knot,
                                                   standing_suf):
    # For any unit disturbance u at the gripper, the adjusted forces and
    # torques must balance the base and respect both polytopes.
    q, v, vd, tau, lam, act = standing_knot
    k = standing_suf
    Js = dyn.support_jacobian(miniquad, q)
    Je = dyn.ee_jacobian(miniquad, q)
    fp = rb.friction_polytope(miniquad, act)
    tpoly = rb.torque_polytope(miniquad)
    dirs = rb.oracle_directions(60, seed=5)
    for u in dirs:
        lam_u = lam + k.gain_contact @ u
        tau_u = tau + k.gain_torque @ u
        assert fp.slack(lam_u).min() > -1e-5
        assert tpoly.slack(tau_u).min() > -1e-5
        # base balance under the disturbance rho * u
        g = dyn.inverse_dynamics(miniquad, q, v, vd, lam_u, active=act,
                                 f_ext=k.rho * u)
        assert np.abs(g[:6]).max() < 1e-4
        # limb rows are met by the adjusted torques
        assert np.abs(g[6:] - tau_u).max() < 1e-4


def test_suf_bounded_by_oracle(miniquad, standing_knot, standing_suf):
    q, v, vd, tau, lam, act = standing_knot
    best, vals = rb.suf_oracle(miniquad, q, v, vd, tau, lam, act, n_dirs=200)
    assert vals.shape == (200,)
    assert abs(best - vals.min()) < 1e-12
    # the linear rule is a restriction of the true per-direction optimum
    assert standing_suf.rho <= best + 1e-3
    assert standing_suf.rho > 0.3 * best


def test_oracle_directions():
    d0 = rb.oracle_directions(200, seed=0)
    assert d0.shape == (200, 3)
    assert np.abs(np.linalg.norm(d0, axis=1) - 1.0).max() < 1e-12
    axes = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0],
                     [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    assert np.abs(d0[194:] - axes).max() == 0.0
    assert np.abs(rb.oracle_directions(200, seed=0) - d0).max() == 0.0
    d7 = rb.oracle_directions(200, seed=7)
    assert np.abs(d7 - d0).max() > 0.1
    assert np.abs(np.linalg.norm(d7, axis=1) - 1.0).max() < 1e-12
    # one common rotation: all pairwise angles are preserved
    assert np.abs(d7 @ d7.T - d0 @ d0.T).max() < 1e-10
    assert rb.oracle_directions(50).shape == (50, 3)


def test_locked_leg_weakens_margin(miniquad, standing_knot, standing_suf):
    q, v, vd, tau, lam, act = standing_knot
    locked = rb.suf_at_knot(miniquad, q, v, vd, tau, lam, act,
                            locked_feet=("lf_foot",))
    assert locked.rho <= standing_suf.rho + 1e-4
    # the disabled foot's gain block is pinned at zero
    assert np.abs(locked.gain_contact[0:3]).max() < 1e-9
    # and its leg joints contribute no compensation torque
    jn = [j.name for j in miniquad.actuated_joints()]
    for idx in (jn.index("lf_hip"), jn.index("lf_knee")):
        assert np.abs(locked.gain_torque[idx]).max() < 1e-12


def test_unknown_leg(miniquad, standing_knot):
    q, v, vd, tau, lam, act = standing_knot
    with pytest.raises(rb.UnknownLeg):
        rb.suf_at_knot(miniquad, q, v, vd, tau, lam, act, locked_feet=("nope",))
    with pytest.raises(rb.UnknownLeg):
        rb.leg_failure_analysis(miniquad, [q], [v], [vd], [tau], [lam], [act],
                                leg="lf")


def test_dynamics_mismatch(miniquad, standing_knot):
    q, v, vd, tau, lam, act = standing_knot
    with pytest.raises(rb.DynamicsMismatch):
        rb.suf_at_knot(miniquad, q, v, vd, tau + 1.0, lam, act)


def test_infeasible_nominal(miniquad, standing_knot):
    q, v, vd, tau, lam, act = standing_knot
    bad = tau.copy()
    bad[0] = miniquad.tau_bounds()[0, 1] + 10.0
    with pytest.raises(rb.InfeasibleNominal, match="upper"):
        rb.suf_at_knot(miniquad, q, v, vd, bad, lam, act, audit_tol=1e9)


def test_trajectory_profile_and_leg_sweep(miniquad, standing_knot, standing_suf):
    q, v, vd, tau, lam, act = standing_knot
    qs, vs = [q, q], [v, v]
    vds, taus, lams, acts = [vd, vd], [tau, tau], [lam, lam], [act, act]
    prof = rb.suf_of_trajectory(miniquad, qs, vs, vds, taus, lams, acts,
                                times=np.array([0.0, 0.1]))
    assert prof.rho.shape == (2,)
    assert np.abs(prof.rho - standing_suf.rho).max() < 1e-4
    s = prof.summary()
    assert set(s) == {"min", "mean", "argmin", "argmin_time"}
    assert s["argmin_time"] in (0.0, 0.1)
    # disabling any single leg can only reduce the margin
    for leg in miniquad.contact_names():
        dp = rb.leg_failure_analysis(miniquad, [q], [v], [vd], [tau], [lam],
                                     [act], leg=leg)
        assert dp.rho[0] <= standing_suf.rho + 1e-4


def test_seed_from_plan(miniquad, standing_q):
    g = MeshGrid(0.3, 3)
    fk = dyn.fk(miniquad, standing_q)
    feet = {c.name: [StancePhase(0, 3, position=fk.contacts[ci].copy(),
                                 ground_z=fk.contacts[ci][2])]
            for ci, c in enumerate(miniquad.contacts)}
    sched = ContactSchedule(feet)
    plan_tp = assemble_plan_problem(miniquad, g, sched)
    rob_tp = rb.assemble_robust_problem(miniquad, g, sched)
    x_plan = sv.default_initial_guess(plan_tp, standing_q)
    x0 = rb.seed_from_plan(rob_tp, plan_tp, x_plan)
    la, lp = rob_tp.layout, plan_tp.layout
    for k in range(4):
        assert np.array_equal(x0[la.q(k)], x_plan[lp.q(k)])
        assert np.array_equal(x0[la.v(k)], x_plan[lp.v(k)])
    for k in range(3):
        assert np.abs(x0[la.rho(k)]).max() == 0.0
        assert np.abs(x0[la.gains(k)]).max() == 0.0
    # margin rows are exactly satisfied at zero gains
    for b in rob_tp.eq_blocks():
        r = b.fn(x0)
        if r.size:
            assert np.abs(r).max() < 1e-8, b.name
    for b in rob_tp.ineq_blocks():
        r = b.fn(x0)
        if r.size:
            assert r.max() < 0.0, b.name
