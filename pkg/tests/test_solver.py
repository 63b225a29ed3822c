"""Augmented-Lagrangian solver behavior on toys and small trajectory problems."""
import numpy as np
import pytest
import scipy.sparse as sp

from locoplan import dynamics as dyn
from locoplan import solver as sv
from locoplan import tasks as tk


def _nlp(dim, f, grad, c_eq=None, jac_eq=None, c_in=None, jac_in=None,
         lb=None, ub=None):
    z0 = lambda x: np.zeros(0)
    jz = lambda x: sp.csr_matrix((0, dim))
    return sv.NlpProblem(
        dim=dim,
        lb=np.full(dim, -np.inf) if lb is None else np.asarray(lb, float),
        ub=np.full(dim, np.inf) if ub is None else np.asarray(ub, float),
        f=f, grad=grad,
        c_eq=c_eq or z0, jac_eq=jac_eq or jz,
        c_in=c_in or z0, jac_in=jac_in or jz)


def test_bound_constrained_quadratic():
    # min x^2 subject to x >= 1: solution pinned at the bound
    nlp = _nlp(1, lambda x: float(x[0] ** 2), lambda x: 2 * x, lb=[1.0])
    res = sv.solve(nlp, np.array([5.0]))
    assert res.status == "Optimal"
    assert abs(res.x[0] - 1.0) < 1e-6
    assert abs(res.objective - 1.0) < 1e-6


def test_equality_constrained_quadratic():
    # min (x-2)^2 + (y-1)^2 subject to x + y = 1.  Stationarity: the gradient
    # 2(x-2, y-1) must be a multiple of (1, 1), so x - 2 = y - 1; with the
    # constraint this gives (x, y) = (1, 0), f = 2, multiplier 2.
    nlp = _nlp(2,
               lambda x: float((x[0] - 2) ** 2 + (x[1] - 1) ** 2),
               lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
               c_eq=lambda x: np.array([x[0] + x[1] - 1.0]),
               jac_eq=lambda x: sp.csr_matrix(np.array([[1.0, 1.0]])))
    res = sv.solve(nlp, np.zeros(2))
    assert res.status == "Optimal"
    assert np.abs(res.x - (1.0, 0.0)).max() < 1e-5
    assert abs(res.objective - 2.0) < 1e-5
    assert abs(res.multipliers_eq[0] - 2.0) < 1e-2


def test_inequality_constrained_quadratic():
    # min x^2 + y^2 subject to x >= 1 written as a general inequality row
    nlp = _nlp(2,
               lambda x: float(x[0] ** 2 + x[1] ** 2),
               lambda x: 2 * x,
               c_in=lambda x: np.array([1.0 - x[0]]),
               jac_in=lambda x: sp.csr_matrix(np.array([[-1.0, 0.0]])))
    res = sv.solve(nlp, np.zeros(2))
    assert res.status == "Optimal"
    assert np.abs(res.x - (1.0, 0.0)).max() < 1e-6
    assert abs(res.multipliers_ineq[0] - 2.0) < 0.1


def test_contradictory_constraints_reported_infeasible():
    # x + y = 3 cannot hold inside the unit box
    nlp = _nlp(2,
               lambda x: float(x @ x),
               lambda x: 2 * x,
               c_eq=lambda x: np.array([x[0] + x[1] - 3.0]),
               jac_eq=lambda x: sp.csr_matrix(np.array([[1.0, 1.0]])),
               lb=[0.0, 0.0], ub=[1.0, 1.0])
    res = sv.solve(nlp, np.zeros(2))
    assert res.status == "Infeasible"
    assert not res.feasible
    assert res.max_eq_violation > 0.5


def test_start_point_outside_bounds_is_clipped():
    nlp = _nlp(1, lambda x: float(x[0] ** 2), lambda x: 2 * x, lb=[1.0], ub=[4.0])
    res = sv.solve(nlp, np.array([-50.0]))
    assert res.status == "Optimal"
    assert abs(res.x[0] - 1.0) < 1e-6


def test_nonfinite_callbacks_raise_callback_error():
    nlp = _nlp(2, lambda x: float(x @ x),
               lambda x: np.array([np.nan, 0.0]))
    with pytest.raises(sv.CallbackError) as ei:
        sv.solve(nlp, np.zeros(2))
    assert "objective gradient" in str(ei.value)

    nlp2 = _nlp(2, lambda x: float(x @ x), lambda x: 2 * x,
                c_eq=lambda x: np.array([np.inf]),
                jac_eq=lambda x: sp.csr_matrix(np.array([[1.0, 1.0]])))
    with pytest.raises(sv.CallbackError) as ei2:
        sv.solve(nlp2, np.zeros(2))
    assert "equality residual" in str(ei2.value)


def test_check_derivatives_flags_wrong_jacobian():
    # analytic jacobian deliberately wrong in one entry
    nlp = _nlp(2,
               lambda x: float(x @ x),
               lambda x: 2 * x,
               c_eq=lambda x: np.array([x[0] * x[1] - 1.0]),
               jac_eq=lambda x: sp.csr_matrix(np.array([[x[1], x[0] + 0.5]])))
    rep = sv.check_derivatives(nlp, np.array([0.7, 1.3]))
    assert not rep.ok
    assert rep.max_rel_err > 1e-2
    assert rep.worst[0] == "equality"

    # entry present numerically but missing from the stored sparsity
    nlp2 = _nlp(2,
                lambda x: 0.0,
                lambda x: np.zeros(2),
                c_eq=lambda x: np.array([x[0] * x[1] - 1.0]),
                jac_eq=lambda x: sp.csr_matrix(
                    (np.array([x[1]]), (np.array([0]), np.array([0]))), shape=(1, 2)))
    rep2 = sv.check_derivatives(nlp2, np.array([0.7, 1.3]))
    assert rep2.outside_pattern
    assert rep2.outside_pattern[0][:3] == ("equality", 0, 1)


def test_path_guess_zeroes_dynamics_rows(miniquad, standing_q):
    # a moving configuration path seeded through divided differences must
    # satisfy the integration and torque rows to rounding
    spec = tk.TaskSpec(name="t", model="miniquad", duration=0.4, segments=4,
                       base_height=standing_q[2],
                       joint_posture=tuple((j.name, standing_q[6 + i])
                                           for i, j in enumerate(miniquad.actuated_joints())))
    built = tk.build_problem(spec)
    qs = np.tile(standing_q, (5, 1))
    bump = 0.02 * np.sin(np.linspace(0.0, np.pi, 5))
    qs[:, 2] += bump           # base heave
    qs[:, 15] += bump          # arm pitch swings along the path
    x = sv.path_initial_guess(built.problem, qs)
    blk = {b.name: b for b in built.problem.eq_blocks()}
    assert np.abs(blk["dynamics_defect"].fn(x)).max() < 1e-9
    lay = built.problem.layout
    assert np.array_equal(x[lay.v(0)], np.zeros(17))
    assert np.abs(x[lay.q(2)] - qs[2]).max() < 1e-12


def test_warm_start_keeps_quality():
    nlp = _nlp(2,
               lambda x: float((x[0] - 2) ** 2 + (x[1] - 1) ** 2),
               lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
               c_eq=lambda x: np.array([x[0] + x[1] - 1.0]),
               jac_eq=lambda x: sp.csr_matrix(np.array([[1.0, 1.0]])))
    first = sv.solve(nlp, np.zeros(2))
    second = sv.solve(nlp, first.x)
    assert second.feasible
    assert second.objective <= first.objective + 1e-5


def test_deterministic_repeat():
    nlp = _nlp(2,
               lambda x: float((x[0] - 2) ** 2 + (x[1] - 1) ** 2),
               lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
               c_eq=lambda x: np.array([x[0] + x[1] - 1.0]),
               jac_eq=lambda x: sp.csr_matrix(np.array([[1.0, 1.0]])))
    a = sv.solve(nlp, np.array([3.0, -3.0]))
    b = sv.solve(nlp, np.array([3.0, -3.0]))
    assert np.array_equal(a.x, b.x)
    assert a.objective == b.objective
    assert len(a.history) == len(b.history)


def test_small_hold_history_contract(miniquad, standing_q):
    # short standing task: solves to tolerance, and accepted outer iterations
    # never worsen the violation beyond the 1.4x acceptance rule
    spec = tk.TaskSpec(name="t", model="miniquad", duration=0.5, segments=5,
                       base_height=standing_q[2],
                       joint_posture=tuple((j.name, standing_q[6 + i])
                                           for i, j in enumerate(miniquad.actuated_joints())))
    built = tk.build_problem(spec)
    nlp = sv.NlpProblem.from_transcribed(built.problem)
    res = sv.solve(nlp, tk.initial_guess(built), built.options)
    assert res.feasible
    assert res.max_eq_violation <= 1e-6
    assert res.max_ineq_violation <= 1e-8
    accepted = [h for h in res.history if "polished" in h]
    assert accepted
    prev = None
    for h in accepted:
        viol = max(h["eq_violation"], h["ineq_violation"])
        if prev is not None:
            assert viol <= max(1.4 * prev, 1e-6) * (1 + 1e-12)
        prev = viol
