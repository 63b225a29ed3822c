"""Smallest-unrejectable-force (SUF) analysis and robust re-planning.

The margin of a knot is the largest rho such that every end-effector force
rho*u with |u| <= 1 can be rejected by a linear decision rule: contact
forces shift by K_lambda u and joint torques by K_tau u, keeping friction
pyramids and torque limits satisfied.  Worst-casing each polytope row over
the unit ball turns the row into nominal value + Euclidean norm of the
row's gain product, which is what the per-knot NLP constrains.

A direction-sampling linear-program oracle upper-bounds the true margin
independently; the decision-rule value can never exceed it (restriction).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import dynamics as dyn
from .model import RobotModel
from .solver import NlpProblem, SolveResult, SolverOptions, solve
from .transcription import (ConstraintBlock, DecisionLayout, TranscribedProblem,
                            assemble_plan_problem, friction_rows_for_contact,
                            margin_objective, _pattern, CSTEP)

NORM_DELTA = 1e-8
RHO_MAX = 1e4


class DynamicsMismatch(Exception):
    pass


class InfeasibleNominal(Exception):
    pass


class UnknownLeg(Exception):
    pass


def smooth_norm(z, delta: float = NORM_DELTA):
    """sqrt(z.z + delta^2) - delta along the last axis; exact at 0, bias <= delta."""
    return np.sqrt((z * z).sum(axis=-1) + delta * delta) - delta


@dataclass
class PolytopeForm:
    A: np.ndarray
    b: np.ndarray
    row_names: list

    def slack(self, x) -> np.ndarray:
        return self.b - self.A @ x


def torque_polytope(model: RobotModel) -> PolytopeForm:
    """Box limits of the actuated joints as A tau <= b."""
    tb = model.tau_bounds()
    n = model.n_j
    A = np.vstack([np.eye(n), -np.eye(n)])
    b = np.concatenate([tb[:, 1], -tb[:, 0]])
    names = [f"joint {j.name}, upper" for j in model.joints if j.kind != "floating"]
    names += [f"joint {j.name}, lower" for j in model.joints if j.kind != "floating"]
    return PolytopeForm(A, b, names)


def friction_polytope(model: RobotModel, active, eps_n: float = 1.0) -> PolytopeForm:
    """Stacked per-contact pyramid rows, block diagonal over active contacts."""
    act = list(active)
    A = np.zeros((5 * len(act), 3 * len(act)))
    b = np.zeros(5 * len(act))
    names = []
    faces = ["+t", "-t", "+b", "-b", "-n"]
    for i, ci in enumerate(act):
        c = model.contacts[ci]
        Ac, bc = friction_rows_for_contact(c, eps_n)
        A[5 * i:5 * i + 5, 3 * i:3 * i + 3] = Ac
        b[5 * i:5 * i + 5] = bc
        names += [f"foot {c.name}, {f} face" for f in faces]
    return PolytopeForm(A, b, names)


def recover_gain_torque(J_s_limbs, J_e_limbs, gain_contact, rho):
    """K_tau = -J_s_limbs^T K_lambda - J_e_limbs^T rho (no inversion needed)."""
    Kt = -J_e_limbs.T * rho
    if gain_contact.size:
        Kt = Kt - J_s_limbs.T @ gain_contact
    return Kt


@dataclass
class SufKnot:
    rho: float
    gain_contact: np.ndarray       # (3 n_active, 3)
    gain_torque: np.ndarray        # (n_j, 3)
    active: list
    status: str


@dataclass
class SufProfile:
    knots: list                    # [SufKnot]
    times: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return np.array([k.rho for k in self.knots])

    def summary(self) -> dict:
        r = self.rho
        i = int(np.argmin(r))
        return {"min": float(r.min()), "mean": float(r.mean()), "argmin": i,
                "argmin_time": float(self.times[i])}


def _knot_matrices(model, q, active, failed_joint_cols=None):
    t = dyn.tree(model)
    Js = dyn.support_jacobian(model, q, active=list(active)) if len(active) \
        else np.zeros((0, model.n_v))
    Je = dyn.ee_jacobian(model, q)
    if failed_joint_cols is not None and len(failed_joint_cols):
        Js = Js.copy(); Je = Je.copy()
        Js[:, 6 + np.asarray(failed_joint_cols, int)] = 0.0
        Je[:, 6 + np.asarray(failed_joint_cols, int)] = 0.0
    return Js, Je


def _audit_nominal(model, q, v, vdot, tau, lam, active, tol=1e-4):
    resid = dyn.inverse_dynamics(model, q, v, vdot, lam if len(active) else None,
                                 active=list(active) if len(active) else None)
    resid[6:] -= tau
    worst = float(np.abs(resid).max())
    if worst > tol:
        raise DynamicsMismatch(
            f"knot state violates the nominal dynamics by {worst:.3e} (tol {tol:.1e})")


def _check_nominal_polytopes(model, tau, lam, active, eps_n, tol=1e-8):
    fp = friction_polytope(model, active, eps_n)
    tp = torque_polytope(model)
    bad = []
    if len(active):
        s = fp.slack(lam)
        for i in np.where(s < -tol)[0]:
            bad.append(f"{fp.row_names[i]} (slack {s[i]:.3e})")
    s = tp.slack(tau)
    for i in np.where(s < -tol)[0]:
        bad.append(f"{tp.row_names[i]} (slack {s[i]:.3e})")
    if bad:
        raise InfeasibleNominal("nominal point violates: " + "; ".join(bad))


def _suf_nlp(model, Js, Je, tau, lam, active, eps_n, locked_blocks=()):
    """NlpProblem over y = [rho, vec(K_lambda)] for one knot.

    locked_blocks: indices into the active list whose 3x3 gain block is
    pinned at zero (failed-leg analysis).
    """
    c = len(active)
    dim = 1 + 9 * c
    fp = friction_polytope(model, active, eps_n)
    tpoly = torque_polytope(model)
    Jsb = Js[:, :6]                 # (3c, 6)
    Jeb = Je[:, :6]                 # (3, 6)
    Jsl = Js[:, 6:]                 # (3c, n_j)
    Jel = Je[:, 6:]                 # (3, n_j)
    n_j = model.n_j
    fric_nom = fp.A @ lam - fp.b if c else np.zeros(0)
    tau_nom = tpoly.A @ tau - tpoly.b

    def unpack(y):
        return y[0], y[1:].reshape(3 * c, 3)

    def c_eq(y):
        rho, K = unpack(y)
        E = Jeb.T * rho             # (6, 3)
        if c:
            E = E + Jsb.T @ K
        return E.ravel()

    def jac_eq(y):
        rows = np.arange(18)
        data, ri, ci = [Jeb.T.ravel()], [rows], [np.zeros(18, int)]
        if c:
            # d E[i, m] / d K[a, m] = Jsb[a, i]
            for i in range(6):
                for mcol in range(3):
                    r = 3 * i + mcol
                    data.append(Jsb[:, i])
                    ri.append(np.full(3 * c, r))
                    ci.append(1 + np.arange(3 * c) * 3 + mcol)
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
                             shape=(18, dim))

    def c_in(y):
        rho, K = unpack(y)
        out = np.empty(5 * c + 2 * n_j)
        if c:
            Z = fp.A @ K            # (5c, 3)
            out[:5 * c] = fric_nom + smooth_norm(Z)
        G = recover_gain_torque(Jsl, Jel, K, rho)   # (n_j, 3); norm rows shared
        ng = smooth_norm(G)
        out[5 * c:] = tau_nom + np.concatenate([ng, ng])
        return out

    def jac_in(y):
        rho, K = unpack(y)
        data, ri, ci = [], [], []
        if c:
            Z = fp.A @ K
            sq = np.sqrt((Z * Z).sum(axis=1) + NORM_DELTA ** 2)
            # d |Z_r| / d K[a, m] = A[r, a] * Z[r, m] / sq_r
            for r in range(5 * c):
                akt = fp.A[r]
                nz = np.nonzero(akt)[0]
                for a in nz:
                    data.append(akt[a] * Z[r] / sq[r])
                    ri.append(np.full(3, r))
                    ci.append(1 + 3 * a + np.arange(3))
        G = recover_gain_torque(Jsl, Jel, K, rho)
        sq = np.sqrt((G * G).sum(axis=1) + NORM_DELTA ** 2)
        for j in range(n_j):
            gj = G[j] / sq[j]
            # d |G_j| / d rho = -Jel[:, j] . gj ; d / d K[a, m] = -Jsl[a, j] * gj[m]
            for row in (5 * c + j, 5 * c + n_j + j):
                data.append(np.array([-(Jel[:, j] @ gj)]))
                ri.append(np.array([row], int))
                ci.append(np.array([0], int))
                if c:
                    nz = np.nonzero(Jsl[:, j])[0]
                    for a in nz:
                        data.append(-Jsl[a, j] * gj)
                        ri.append(np.full(3, row))
                        ci.append(1 + 3 * a + np.arange(3))
        if not data:
            return sp.csr_matrix((2 * n_j, dim))
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
                             shape=(5 * c + 2 * n_j, dim))

    lb = np.full(dim, -np.inf)
    ub = np.full(dim, np.inf)
    lb[0], ub[0] = 0.0, RHO_MAX
    for blk in locked_blocks:
        lo = 1 + 9 * blk
        lb[lo:lo + 9] = 0.0
        ub[lo:lo + 9] = 0.0

    g = np.zeros(dim); g[0] = -1.0
    nlp = NlpProblem(dim, lb, ub,
                     f=lambda y: float(-y[0]), grad=lambda y: g,
                     c_eq=c_eq, jac_eq=jac_eq, c_in=c_in, jac_in=jac_in)
    return nlp


def suf_at_knot(model: RobotModel, q, v, vdot, tau, lam, active, eps_n: float = 1.0,
                opts: SolverOptions | None = None, audit_tol: float = 1e-4,
                locked_feet=()) -> SufKnot:
    """Largest guaranteed-rejectable end-effector force at one knot.

    locked_feet: contact names whose gain block (and whose leg-joint torque
    compensation) is disabled, for failure analysis.
    """
    active = list(active)
    lam = np.asarray(lam, float).ravel()
    tau = np.asarray(tau, float).ravel()
    _audit_nominal(model, q, v, vdot, tau, lam, active, tol=audit_tol)
    _check_nominal_polytopes(model, tau, lam, active, eps_n)

    locked_blocks, failed_cols = [], []
    for name in locked_feet:
        if name not in model.contact_names():
            raise UnknownLeg(name)
        ci = model.contact_names().index(name)
        if ci in active:
            locked_blocks.append(active.index(ci))
        failed_cols.extend(_leg_joint_indices(model, name))

    Js, Je = _knot_matrices(model, q, active, failed_joint_cols=failed_cols)
    nlp = _suf_nlp(model, Js, Je, tau, lam, active, eps_n, locked_blocks=locked_blocks)
    o = opts or SolverOptions(tol_feas=1e-8, tol_opt=1e-6)
    y0 = np.zeros(nlp.dim)
    res = solve(nlp, y0, o)
    rho = float(res.x[0])
    K = res.x[1:].reshape(3 * len(active), 3)
    Kt = recover_gain_torque(Js[:, 6:], Je[:, 6:], K, rho)
    return SufKnot(rho, K, Kt, active, res.status)


def _leg_joint_indices(model: RobotModel, contact_name: str):
    """Actuated-joint indices on the kinematic path from the root to the
    contact's link (the leg serving that foot)."""
    t = dyn.tree(model)
    body = t.contact_body[model.contact_names().index(contact_name)]
    out = []
    b = int(body)
    while b >= 0:
        if t.qi[b] >= 6:
            out.append(int(t.qi[b]) - 6)
        b = int(t.parent[b])
    return sorted(out)


def fibonacci_directions(n: int = 194) -> np.ndarray:
    """n points spiraling the unit sphere plus the 6 axis directions."""
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    axes = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                    dtype=float)
    return np.vstack([pts, axes])


def oracle_directions(n_dirs: int = 200, seed: int = 0) -> np.ndarray:
    """Deterministic unit-sphere sample for the oracle.

    Seed 0 keeps the canonical spiral-plus-axes set; any other seed applies
    one orthogonal rotation to it, giving an independent but reproducible
    sample of the same size.
    """
    dirs = fibonacci_directions(max(0, n_dirs - 6))
    if seed:
        rng = np.random.default_rng(seed)
        rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        dirs = dirs @ rot.T
    return dirs


def suf_oracle(model: RobotModel, q, v, vdot, tau, lam, active, n_dirs: int = 200,
               eps_n: float = 1.0, audit_tol: float = 1e-4, seed: int = 0):
    """Direction-sampled true margin: per direction, the exact LP optimum.

    Returns (min over directions, per-direction magnitudes).  The decision
    rule of suf_at_knot is a restriction, so its rho can exceed this value
    only by solver tolerance.
    """
    active = list(active)
    lam = np.asarray(lam, float).ravel()
    tau = np.asarray(tau, float).ravel()
    _audit_nominal(model, q, v, vdot, tau, lam, active, tol=audit_tol)
    _check_nominal_polytopes(model, tau, lam, active, eps_n)
    dirs = oracle_directions(n_dirs, seed)
    Js, Je = _knot_matrices(model, q, active)
    fp = friction_polytope(model, active, eps_n)
    tpoly = torque_polytope(model)
    c = len(active)
    n_j, n_v = model.n_j, model.n_v
    # variables [s, dlam (3c), dtau (n_j)]
    nx = 1 + 3 * c + n_j
    A_ub = np.zeros((fp.A.shape[0] + tpoly.A.shape[0], nx))
    A_ub[:fp.A.shape[0], 1:1 + 3 * c] = fp.A
    A_ub[fp.A.shape[0]:, 1 + 3 * c:] = tpoly.A
    b_ub = np.concatenate([fp.b - fp.A @ lam if c else fp.b, tpoly.b - tpoly.A @ tau])
    A_eq = np.zeros((n_v, nx))
    if c:
        A_eq[:, 1:1 + 3 * c] = Js.T
    A_eq[6:, 1 + 3 * c:] = np.eye(n_j)
    cost = np.zeros(nx); cost[0] = -1.0
    bounds = [(0.0, 1e5)] + [(None, None)] * (3 * c + n_j)
    vals = np.empty(len(dirs))
    for i, u in enumerate(dirs):
        A_eq[:, 0] = Je.T @ u
        r = linprog(cost, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.zeros(n_v),
                    bounds=bounds, method="highs")
        if r.status == 3:          # unbounded: cap active
            vals[i] = 1e5
        elif not r.success:
            vals[i] = 0.0
        else:
            vals[i] = -r.fun
    return float(vals.min()), vals


def suf_of_trajectory(model: RobotModel, qs, vs, vdots, taus, lams, actives,
                      times=None, eps_n: float = 1.0, opts: SolverOptions | None = None,
                      locked_feet=(), workers: int = 1, audit_tol: float = 1e-4) -> SufProfile:
    """Per-knot margins of a trajectory; lams[k] stacks the knot's active forces."""
    N = len(taus)
    times = np.arange(N, dtype=float) if times is None else np.asarray(times, float)

    def one(k):
        return suf_at_knot(model, qs[k], vs[k], vdots[k], taus[k], lams[k], actives[k],
                           eps_n=eps_n, opts=opts, audit_tol=audit_tol,
                           locked_feet=locked_feet)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as ex:
            knots = list(ex.map(one, range(N)))
    else:
        knots = [one(k) for k in range(N)]
    return SufProfile(knots, times[:N])


def leg_failure_analysis(model: RobotModel, qs, vs, vdots, taus, lams, actives,
                         leg: str, times=None, eps_n: float = 1.0,
                         opts: SolverOptions | None = None, workers: int = 1,
                         audit_tol: float = 1e-4) -> SufProfile:
    """Margins when one leg's compensation is disabled (its gains zeroed)."""
    if leg not in model.contact_names():
        raise UnknownLeg(leg)
    return suf_of_trajectory(model, qs, vs, vdots, taus, lams, actives, times=times,
                             eps_n=eps_n, opts=opts, locked_feet=(leg,), workers=workers,
                             audit_tol=audit_tol)


# ---------------------------------------------------------------------------
# Problem 3: trajectory re-planning with margin rows in the NLP


def robust_margin_block(layout: DecisionLayout, eps_n: float = 1.0):
    """Per-knot margin rows coupled to q_k: 18 equality rows (base balance of
    the gain columns) plus worst-cased friction and torque rows."""
    model = layout.model
    t = dyn.tree(model)
    n_q, n_j = model.n_q, model.n_j
    N = layout.grid.segments
    tpoly = torque_polytope(model)

    eq_per = 18
    knot_meta = []
    eq_off = in_off = 0
    for k in range(N):
        c = len(layout.active[k])
        knot_meta.append({"k": k, "c": c, "eq_off": eq_off, "in_off": in_off,
                          "in_rows": 5 * c + 2 * n_j})
        eq_off += eq_per
        in_off += 5 * c + 2 * n_j
    eq_dim, in_dim = eq_off, in_off

    groups = {}
    for k in range(N):
        groups.setdefault(tuple(layout.active[k]), []).append(k)
    groups = [(list(a), np.array(ks, dtype=int)) for a, ks in groups.items()]
    gmeta = []
    for act, ks in groups:
        c = len(act)
        fp = friction_polytope(model, act, eps_n) if c else None
        IQ = np.array([layout.q(k) for k in ks], dtype=int)
        IT = np.array([layout.tau(k) for k in ks], dtype=int)
        IR = np.array([layout.rho(k) for k in ks], dtype=int)
        IL = np.array([layout.lam(k) for k in ks], dtype=int).reshape(len(ks), 3 * c)
        IK = np.array([layout.gains(k) for k in ks], dtype=int).reshape(len(ks), 9 * c)
        cols = np.concatenate([IQ, IL, IT, IR[:, None], IK], axis=1)  # (Kg, nc)
        gmeta.append({"act": act, "ks": ks, "c": c, "fp": fp, "IQ": IQ, "IT": IT,
                      "IR": IR, "IL": IL, "IK": IK, "cols": cols})

    def rows_batch(gm, qB, lamB, tauB, rhoB, KB):
        """eq (B, 18) and ineq (B, 5c + 2 n_j) rows for one active set."""
        act, c = gm["act"], gm["c"]
        R, p, z, pj = dyn.fk_arrays(t, qB)
        Je = dyn.ee_jacobian_batch(t, R, p, z, pj)          # (B, 3, n_v)
        rho = rhoB[:, None, None]
        if c:
            Js = dyn.support_jacobian_batch(t, R, p, z, pj, act)   # (B, 3c, n_v)
            E = np.einsum("bai,bam->bim", Js[:, :, :6], KB) \
                + Je[:, :, :6].transpose(0, 2, 1) * rho
            fp = gm["fp"]
            Z = np.einsum("ra,bam->brm", fp.A, KB)
            fric = lamB @ fp.A.T - fp.b + smooth_norm(Z)
            G = -(np.einsum("baj,bam->bjm", Js[:, :, 6:], KB)
                  + Je[:, :, 6:].transpose(0, 2, 1) * rho)
        else:
            E = Je[:, :, :6].transpose(0, 2, 1) * rho
            fric = np.zeros((qB.shape[0], 0), dtype=qB.dtype)
            G = -Je[:, :, 6:].transpose(0, 2, 1) * rho
        ng = smooth_norm(G)
        trq = tauB @ tpoly.A.T - tpoly.b + np.concatenate([ng, ng], axis=1)
        return E.reshape(qB.shape[0], 18), np.concatenate([fric, trq], axis=1)

    def gather(x, gm, idx):
        qB = x[gm["IQ"][idx]]
        lamB = x[gm["IL"][idx]]
        tauB = x[gm["IT"][idx]]
        rhoB = x[gm["IR"][idx]]
        KB = x[gm["IK"][idx]].reshape(len(idx), 3 * gm["c"], 3)
        return qB, lamB, tauB, rhoB, KB

    def fn_all(x):
        eq = np.empty(eq_dim)
        ineq = np.empty(in_dim)
        for gm in gmeta:
            ks = gm["ks"]
            E, I = rows_batch(gm, *gather(x, gm, np.arange(len(ks))))
            for i, k in enumerate(ks):
                km = knot_meta[k]
                eq[km["eq_off"]:km["eq_off"] + eq_per] = E[i]
                ineq[km["in_off"]:km["in_off"] + km["in_rows"]] = I[i]
        return eq, ineq

    def jac_all(x):
        # rows are linear in lam/tau and smooth in rho/K with closed-form
        # partials; only the q dependence (through the Jacobian matrices)
        # needs a complex step, which cuts the batch 4x vs stepping every
        # column
        eq_data, eq_ri, eq_ci = [], [], []
        in_data, in_ri, in_ci = [], [], []
        rows18 = np.arange(18)
        mvec, ibvec = rows18 % 3, rows18 // 3
        arr3 = np.arange(3)
        for gm in gmeta:
            ks = gm["ks"]
            Kg = len(ks)
            c = gm["c"]
            act = gm["act"]
            idx = np.arange(Kg)
            qB, lamB, tauB, rhoB, KB = gather(x, gm, idx)

            R, p, z, pj = dyn.fk_arrays(t, qB)
            JeB = dyn.ee_jacobian_batch(t, R, p, z, pj)                # (Kg, 3, n_v)
            rho = rhoB[:, None, None]
            if c:
                JsB = dyn.support_jacobian_batch(t, R, p, z, pj, act)  # (Kg, 3c, n_v)
                fp = gm["fp"]
                Z = np.einsum("ra,bam->brm", fp.A, KB)
                Zh = Z / np.sqrt((Z * Z).sum(-1) + NORM_DELTA ** 2)[..., None]
                G = -(np.einsum("baj,bam->bjm", JsB[:, :, 6:], KB)
                      + JeB[:, :, 6:].transpose(0, 2, 1) * rho)
                nzr, nza = np.nonzero(fp.A)
                Af = fp.A[nzr, nza]
            else:
                G = -JeB[:, :, 6:].transpose(0, 2, 1) * rho
            Gh = G / np.sqrt((G * G).sum(-1) + NORM_DELTA ** 2)[..., None]

            q2 = np.repeat(qB.astype(complex), n_q, axis=0)
            q2[np.arange(Kg * n_q), np.tile(np.arange(n_q), Kg)] += 1j * CSTEP
            l2 = np.repeat(lamB.astype(complex), n_q, axis=0)
            t2 = np.repeat(tauB.astype(complex), n_q, axis=0)
            r2 = np.repeat(rhoB.astype(complex), n_q, axis=0)
            K2 = np.repeat(KB.astype(complex).reshape(Kg, 9 * c), n_q,
                           axis=0).reshape(Kg * n_q, 3 * c, 3)
            E2, I2 = rows_batch(gm, q2, l2, t2, r2, K2)
            dE = E2.imag.reshape(Kg, n_q, 18) / CSTEP
            dI = I2.imag.reshape(Kg, n_q, -1) / CSTEP

            for i, k in enumerate(ks):
                km = knot_meta[k]
                e0, i0 = km["eq_off"], km["in_off"]
                IQ, IT = gm["IQ"][i], gm["IT"][i]
                IRk, IK = gm["IR"][i], gm["IK"][i]
                Je = JeB[i]

                eq_data.append(dE[i].T.ravel())
                eq_ri.append(np.repeat(e0 + rows18, n_q))
                eq_ci.append(np.tile(IQ, 18))
                eq_data.append(Je[:, :6].T.ravel())        # rho col: E row 3i+m
                eq_ri.append(e0 + rows18)
                eq_ci.append(np.full(18, IRk))

                dtrq = dI[i][:, 5 * c:]                     # torque rows only
                in_data.append(dtrq.T.ravel())
                in_ri.append(np.repeat(i0 + 5 * c + np.arange(2 * n_j), n_q))
                in_ci.append(np.tile(IQ, 2 * n_j))

                drho = -(Gh[i] * Je[:, 6:].T).sum(axis=1)   # (n_j,)
                in_data.append(np.concatenate([drho, drho]))
                in_ri.append(i0 + 5 * c + np.arange(2 * n_j))
                in_ci.append(np.full(2 * n_j, IRk))
                in_data.append(np.concatenate([np.ones(n_j), -np.ones(n_j)]))
                in_ri.append(i0 + 5 * c + np.arange(2 * n_j))
                in_ci.append(np.tile(IT, 2))

                if c:
                    Js = JsB[i]
                    IL = gm["IL"][i]
                    avec = np.tile(np.arange(3 * c), 18)
                    eq_data.append(Js[avec, np.repeat(ibvec, 3 * c)])
                    eq_ri.append(e0 + np.repeat(rows18, 3 * c))
                    eq_ci.append(IK[3 * avec + np.repeat(mvec, 3 * c)])

                    in_data.append(Af)                      # friction: lam cols
                    in_ri.append(i0 + nzr)
                    in_ci.append(IL[nza])
                    rr = np.repeat(nzr, 3)
                    aa = np.repeat(nza, 3)
                    mm = np.tile(arr3, len(nzr))
                    in_data.append(Af.repeat(3) * Zh[i][rr, mm])
                    in_ri.append(i0 + rr)
                    in_ci.append(IK[3 * aa + mm])

                    JJ, AA, MM = np.meshgrid(np.arange(n_j), np.arange(3 * c),
                                             arr3, indexing="ij")
                    JJ, AA, MM = JJ.ravel(), AA.ravel(), MM.ravel()
                    valsK = -(Js[AA, 6 + JJ] * Gh[i][JJ, MM])
                    colsK = IK[3 * AA + MM]
                    in_data.append(np.concatenate([valsK, valsK]))
                    in_ri.append(np.concatenate([i0 + 5 * c + JJ,
                                                 i0 + 5 * c + n_j + JJ]))
                    in_ci.append(np.concatenate([colsK, colsK]))
        Jeq = sp.csr_matrix((np.concatenate(eq_data), (np.concatenate(eq_ri), np.concatenate(eq_ci))),
                            shape=(eq_dim, layout.dim))
        Jin = sp.csr_matrix((np.concatenate(in_data), (np.concatenate(in_ri), np.concatenate(in_ci))),
                            shape=(in_dim, layout.dim))
        return Jeq, Jin

    _cache = {}

    def _jac_cached(x):
        key = x.tobytes()
        if _cache.get("jkey") != key:
            _cache["jkey"] = key
            _cache["jval"] = jac_all(x)
        return _cache["jval"]

    def _fn_cached(x):
        key = x.tobytes()
        if _cache.get("fkey") != key:
            _cache["fkey"] = key
            _cache["fval"] = fn_all(x)
        return _cache["fval"]

    eq_rows_pat, eq_cols_pat = [], []
    in_rows_pat, in_cols_pat = [], []
    for gm in gmeta:
        for i, k in enumerate(gm["ks"]):
            km = knot_meta[k]
            cols = gm["cols"][i]
            eq_rows_pat.append(km["eq_off"] + np.arange(eq_per))
            eq_cols_pat.append(cols)
            in_rows_pat.append(km["in_off"] + np.arange(km["in_rows"]))
            in_cols_pat.append(cols)
    per, pec = _pattern(eq_rows_pat, eq_cols_pat)
    pir, pic = _pattern(in_rows_pat, in_cols_pat)

    eq_block = ConstraintBlock("margin_balance", "eq", eq_dim,
                               lambda x: _fn_cached(x)[0], lambda x: _jac_cached(x)[0],
                               per, pec)
    in_block = ConstraintBlock("margin_rows", "ineq", in_dim,
                               lambda x: _fn_cached(x)[1], lambda x: _jac_cached(x)[1],
                               pir, pic)
    return eq_block, in_block


def seed_from_plan(robust_tp, plan_tp, x_plan) -> np.ndarray:
    """Warm start for the margin problem from a plan solution of the same
    mesh and schedule: states, torques, forces and foot xy copied, margin and
    gain variables zero (an exactly feasible start for the margin rows)."""
    la, lp = robust_tp.layout, plan_tp.layout
    x = np.zeros(la.dim)
    N = la.grid.segments
    for k in range(N + 1):
        x[la.q(k)] = x_plan[lp.q(k)]
        x[la.v(k)] = x_plan[lp.v(k)]
        if k < N:
            x[la.tau(k)] = x_plan[lp.tau(k)]
            il = la.lam(k)
            if il.size:
                x[il] = x_plan[lp.lam(k)]
    for key, off in la._foot_xy.items():
        src = lp._foot_xy[key]
        x[off:off + 2] = x_plan[src:src + 2]
    return np.clip(x, robust_tp.lb, robust_tp.ub)


def assemble_robust_problem(model: RobotModel, grid, schedule, waypoints=(),
                            boundary_velocity: bool = True, eps_n: float = 1.0,
                            min_support: int = 2, opts=None) -> TranscribedProblem:
    """Planning problem plus margin variables/rows; objective max sum rho_k."""
    from .transcription import LayoutOptions
    lo = opts or LayoutOptions()
    lo.robust = True
    tp = assemble_plan_problem(model, grid, schedule, waypoints=waypoints,
                               objective="feasibility", boundary_velocity=boundary_velocity,
                               eps_n=eps_n, min_support=min_support, opts=lo)
    eq_block, in_block = robust_margin_block(tp.layout, eps_n)
    tp.blocks.extend([eq_block, in_block])
    tp.objective = margin_objective(tp.layout)
    tp.meta["robust"] = True
    return tp
