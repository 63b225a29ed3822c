"""Layout, constraint-block, and bound checks on small meshes."""
import numpy as np
import pytest

from locoplan import dynamics as dyn
from locoplan import solver as sv
from locoplan.model import ValidationError
from locoplan.transcription import (ContactSchedule, LayoutOptions, MeshGrid,
                                    StancePhase, Waypoint, all_stance_schedule,
                                    assemble_plan_problem, build_layout)


def _stand_schedule(model, q0, grid, free_xy=False):
    fk = dyn.fk(model, q0)
    feet = {}
    for ci, c in enumerate(model.contacts):
        feet[c.name] = [StancePhase(0, grid.segments, position=fk.contacts[ci].copy(),
                                    free_xy=free_xy, ground_z=fk.contacts[ci][2])]
    return ContactSchedule(feet)


def test_mesh_grid():
    g = MeshGrid(4.0, 40)
    assert g.n_points == 41
    assert g.h == 0.1
    assert np.abs(g.times() - 0.1 * np.arange(41)).max() < 1e-15


def test_schedule_validation(miniquad):
    g = MeshGrid(1.0, 4)
    with pytest.raises(ValidationError):
        ContactSchedule({"nope": [StancePhase(0, 4)]}).validate(miniquad, g)
    with pytest.raises(ValidationError):
        ContactSchedule({"lf_foot": [StancePhase(0, 9)]}).validate(miniquad, g)
    with pytest.raises(ValidationError):
        ContactSchedule({"lf_foot": [StancePhase(0, 2), StancePhase(2, 4)]}
                        ).validate(miniquad, g)
    # three feet lifted at once leaves one in stance, below the support floor
    sched = ContactSchedule({n: [StancePhase(0, 1), StancePhase(3, 4)]
                             for n in ("lf_foot", "rf_foot", "lh_foot")})
    with pytest.raises(ValidationError):
        sched.validate(miniquad, g)


def test_single_segment_counts(miniquad, standing_q):
    # hand count for N = 1, all feet in stance, one position waypoint:
    #   q 2*17, v 2*17, tau 11, lam 12  -> 91 variables
    #   dynamics 17+17, boundary 2*17, stance 4 feet * 2 mesh pts * 3, ee 3
    #   friction 5 rows * 4 contacts
    g = MeshGrid(0.1, 1)
    sched = _stand_schedule(miniquad, standing_q, g)
    ee = dyn.fk(miniquad, standing_q).ee.translation
    tp = assemble_plan_problem(miniquad, g, sched, waypoints=[Waypoint(1, position=ee)],
                               min_support=2)
    assert tp.layout.dim == 91
    assert tp.layout.counts() == {"q": 34, "v": 34, "tau": 11, "lam": 12, "foot_xy": 0}
    rows = {b.name: b.dim for b in tp.blocks}
    assert rows == {"dynamics_defect": 34, "boundary_velocity": 34,
                    "stance_foot": 24, "ee_pose": 3, "swing_force": 0,
                    "friction": 20}
    rep = tp.report()
    assert rep["dim"] == 91
    assert sum(rep["eq_rows"].values()) == 95
    assert sum(rep["ineq_rows"].values()) == 20


def test_single_segment_robust_layout(miniquad, standing_q):
    # margin variables add rho plus a 3x3 gain per active contact: 91 + 1 + 36
    g = MeshGrid(0.1, 1)
    sched = _stand_schedule(miniquad, standing_q, g)
    lay = build_layout(miniquad, g, sched, LayoutOptions(robust=True))
    assert lay.dim == 128
    c = lay.counts()
    assert c["rho"] == 1 and c["gains"] == 36


def test_friction_cone_probes(miniquad, standing_q):
    g = MeshGrid(0.1, 1)
    sched = _stand_schedule(miniquad, standing_q, g)
    tp = assemble_plan_problem(miniquad, g, sched, eps_n=1.0)
    blk = [b for b in tp.blocks if b.name == "friction"][0]
    lay = tp.layout

    def rows_for(lam3):
        x = np.zeros(lay.dim)
        for j in range(4):
            x[lay.lam(0)[3 * j:3 * j + 3]] = lam3
        return blk.fn(x).reshape(4, 5)

    # well inside the cone (mu = 0.8): every row strictly negative
    assert rows_for(np.array([10.0, -5.0, 100.0])).max() < 0.0
    # tangential force past mu * normal violates some row
    assert rows_for(np.array([90.0, 0.0, 100.0])).max() > 0.0
    # normal force below the unilateral floor eps_n violates some row
    assert rows_for(np.array([0.0, 0.0, 0.5])).max() > 0.0
    assert rows_for(np.array([0.0, 0.0, 1.5])).max() < 0.0


def test_boundary_velocity_rows(miniquad, standing_q):
    g = MeshGrid(0.2, 2)
    sched = _stand_schedule(miniquad, standing_q, g)
    tp = assemble_plan_problem(miniquad, g, sched, boundary_velocity=True)
    blk = [b for b in tp.blocks if b.name == "boundary_velocity"][0]
    assert blk.dim == 2 * miniquad.n_v
    x = np.zeros(tp.layout.dim)
    x[tp.layout.v(0)] = 1.0
    x[tp.layout.v(2)] = 2.0
    r = blk.fn(x)
    assert np.array_equal(r[:17], np.full(17, 1.0))
    assert np.array_equal(r[17:], np.full(17, 2.0))
    tp2 = assemble_plan_problem(miniquad, g, sched, boundary_velocity=False)
    assert [b for b in tp2.blocks if b.name == "boundary_velocity"][0].dim == 0


def test_static_guess_near_feasible(miniquad, standing_q):
    # the stationary seed satisfies stance and dynamics rows to rounding and
    # sits strictly inside the friction cones
    g = MeshGrid(0.3, 3)
    sched = _stand_schedule(miniquad, standing_q, g)
    tp = assemble_plan_problem(miniquad, g, sched)
    x0 = sv.default_initial_guess(tp, standing_q)
    for b in tp.eq_blocks():
        r = b.fn(x0)
        if r.size:
            assert np.abs(r).max() < 1e-9, b.name
    fr = [b for b in tp.ineq_blocks() if b.name == "friction"][0].fn(x0)
    assert fr.max() < -1.0


def test_swing_forces_eliminated_or_pinned(miniquad, standing_q):
    g = MeshGrid(0.4, 4)
    fk = dyn.fk(miniquad, standing_q)
    feet = {c.name: [StancePhase(0, 4, position=fk.contacts[ci].copy())]
            for ci, c in enumerate(miniquad.contacts)}
    feet["rh_foot"] = [StancePhase(0, 1, position=fk.contacts[3].copy()),
                       StancePhase(3, 4, position=fk.contacts[3].copy())]
    sched = ContactSchedule(feet)

    tp = assemble_plan_problem(miniquad, g, sched)
    # the force of knot k spans mesh [k, k+1]: only knot 2 is swing for rh,
    # and its force variables are dropped entirely
    assert [len(a) for a in tp.layout.active] == [4, 4, 3, 4]
    assert [b for b in tp.blocks if b.name == "swing_force"][0].dim == 0

    tp2 = assemble_plan_problem(miniquad, g, sched,
                                opts=LayoutOptions(eliminate_swing_forces=False))
    blk = [b for b in tp2.blocks if b.name == "swing_force"][0]
    assert blk.dim == 3                  # 1 swing knot * 3 force components
    x = np.zeros(tp2.layout.dim)
    x[tp2.layout.lam(2)[9:12]] = (1.0, 2.0, 3.0)
    assert np.array_equal(blk.fn(x), [1.0, 2.0, 3.0])


def test_free_xy_variables_and_rows(miniquad, standing_q):
    g = MeshGrid(0.2, 2)
    sched = _stand_schedule(miniquad, standing_q, g, free_xy=True)
    tp = assemble_plan_problem(miniquad, g, sched)
    lay = tp.layout
    assert lay.counts()["foot_xy"] == 8
    blk = [b for b in tp.blocks if b.name == "stance_foot"][0]
    x0 = sv.default_initial_guess(tp, standing_q)
    assert np.abs(blk.fn(x0)).max() < 1e-9
    # moving the xy variable shifts the matching rows, z rows stay pinned
    off = lay.foot_xy("lf_foot", 0)
    x1 = x0.copy()
    x1[off[0]] += 0.02
    r = blk.fn(x1)
    assert np.isclose(np.abs(r).max(), 0.02)
    assert np.count_nonzero(np.abs(r) > 1e-9) == 3   # mesh pts 0..2 share the phase


def test_ee_rows_with_orientation(miniquad, standing_q):
    g = MeshGrid(0.1, 1)
    sched = _stand_schedule(miniquad, standing_q, g)
    from locoplan.spatial import rotation_to_mrp
    fk = dyn.fk(miniquad, standing_q)
    wp = [Waypoint(1, position=fk.ee.translation + (0.0, 0.0, 0.01)),
          Waypoint(0, position=fk.ee.translation,
                   orientation=rotation_to_mrp(fk.ee.rotation))]
    tp = assemble_plan_problem(miniquad, g, sched, waypoints=wp)
    blk = [b for b in tp.blocks if b.name == "ee_pose"][0]
    assert blk.dim == 9                  # 3 + (3 + 3) rows
    x0 = sv.default_initial_guess(tp, standing_q)
    r = blk.fn(x0)
    assert np.isclose(np.abs(r).max(), 0.01)


def test_variable_bounds(miniquad, standing_q):
    g = MeshGrid(0.4, 4)
    fk = dyn.fk(miniquad, standing_q)
    feet = {c.name: [StancePhase(0, 4, position=fk.contacts[ci].copy())]
            for ci, c in enumerate(miniquad.contacts)}
    feet["rh_foot"] = [StancePhase(0, 1, position=fk.contacts[3].copy()),
                       StancePhase(3, 4, position=fk.contacts[3].copy())]
    sched = ContactSchedule(feet)
    lay = build_layout(miniquad, g, sched,
                       LayoutOptions(robust=True, eliminate_swing_forces=False))
    from locoplan.transcription import variable_bounds
    lb, ub = variable_bounds(lay)
    tb = miniquad.tau_bounds()
    assert np.array_equal(lb[lay.tau(0)], tb[:, 0])
    assert np.array_equal(ub[lay.tau(0)], tb[:, 1])
    assert lb[lay.rho(0)] == 0.0 and ub[lay.rho(0)] == 1e4
    # swing contact at knot 2: its gain block is pinned to zero
    gidx = lay.gains(2)
    assert np.array_equal(lb[gidx[27:36]], np.zeros(9))
    assert np.array_equal(ub[gidx[27:36]], np.zeros(9))
    # stance gains stay free
    assert np.all(np.isinf(ub[gidx[:27]]))
    # base translation confined to the workspace box
    assert lb[lay.q(0)[0]] == -10.0 and ub[lay.q(0)[2]] == 10.0


def test_baseline_objective_gradient(miniquad, standing_q):
    g = MeshGrid(0.2, 2)
    sched = _stand_schedule(miniquad, standing_q, g)
    tp = assemble_plan_problem(miniquad, g, sched, objective="baseline")
    rng = np.random.default_rng(21)
    x = rng.standard_normal(tp.layout.dim)
    grad = tp.objective.grad(x)
    eps = 1e-6
    for i in rng.choice(tp.layout.dim, 12, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (tp.objective.fn(xp) - tp.objective.fn(xm)) / (2 * eps)
        assert abs(fd - grad[i]) < 1e-5


def test_unknown_objective_rejected(miniquad, standing_q):
    g = MeshGrid(0.1, 1)
    sched = _stand_schedule(miniquad, standing_q, g)
    with pytest.raises(ValidationError):
        assemble_plan_problem(miniquad, g, sched, objective="margin")
