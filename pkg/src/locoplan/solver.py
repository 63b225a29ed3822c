"""Augmented Lagrangian solver for the transcribed trajectory problems.

Bound constraints go straight to an L-BFGS-B inner solver; equalities and
inequalities enter a Powell-Hestenes-Rockafellar augmented Lagrangian with
a classic penalty/tolerance schedule (inner tolerance omega and feasibility
target eta tighten when a subproblem ends near-feasible, otherwise the
penalty grows).

The solver works internally on a diagonally scaled problem: decision
variables are divided by natural magnitudes (torque limits, per-contact
weight share), force-valued residual rows by the robot weight, and the
objective by its initial gradient norm.  A limited-memory quasi-Newton
method stalls badly on the raw problem (condition number around 1e7 from
mixing Newtons with radians); with the natural scaling the same schedule
converges in a handful of outer iterations.  Reported violations are always
recomputed in raw units.

The best feasible iterate ever seen, including the start point, is tracked
and returned in preference to a worse final iterate, so warm starts never
come back degraded.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.optimize import Bounds, minimize

from . import dynamics as dyn
from .transcription import TranscribedProblem


class CallbackError(RuntimeError):
    """A user callback produced NaN or Inf; carries component and index."""

    def __init__(self, component: str, index: int):
        super().__init__(f"non-finite value from {component} at index {index}")
        self.component = component
        self.index = index


def _assert_finite(a: np.ndarray, component: str):
    if not np.all(np.isfinite(a)):
        idx = int(np.flatnonzero(~np.isfinite(np.atleast_1d(a)))[0])
        raise CallbackError(component, idx)


@dataclass
class SolverOptions:
    tol_feas: float = 1e-6
    tol_ineq: float = 1e-8       # tighter target for inequality rows
    tol_opt: float = 1e-5        # scaled projected-gradient tolerance to certify
    max_outer: int = 50
    max_inner: int = 500
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    multiplier_max: float = 1e8
    polish_viol: float = 1e-2    # residual level that triggers the Newton cleanup
    seed: int = 0                # recorded for reproducibility of callers


@dataclass
class NlpProblem:
    dim: int
    lb: np.ndarray
    ub: np.ndarray
    f: callable
    grad: callable
    c_eq: callable
    jac_eq: callable
    c_in: callable
    jac_in: callable
    x0: np.ndarray | None = None
    eq_slices: dict = field(default_factory=dict)    # block name -> slice
    ineq_slices: dict = field(default_factory=dict)
    x_scale: np.ndarray | None = None    # natural column magnitudes
    eq_scale: np.ndarray | None = None   # natural equality row magnitudes
    in_scale: np.ndarray | None = None   # natural inequality row magnitudes
    source: TranscribedProblem | None = None

    @staticmethod
    def from_transcribed(tp: TranscribedProblem,
                         x0: np.ndarray | None = None) -> "NlpProblem":
        eqs = tp.eq_blocks()
        ins = tp.ineq_blocks()
        eq_slices, off = {}, 0
        for b in eqs:
            eq_slices[b.name] = slice(off, off + b.dim)
            off += b.dim
        in_slices, off = {}, 0
        for b in ins:
            in_slices[b.name] = slice(off, off + b.dim)
            off += b.dim

        def c_eq(x):
            return np.concatenate([b.fn(x) for b in eqs]) if eqs else np.zeros(0)

        def jac_eq(x):
            return sp.vstack([b.jac(x) for b in eqs], format="csr") if eqs \
                else sp.csr_matrix((0, tp.layout.dim))

        def c_in(x):
            return np.concatenate([b.fn(x) for b in ins]) if ins else np.zeros(0)

        def jac_in(x):
            return sp.vstack([b.jac(x) for b in ins], format="csr") if ins \
                else sp.csr_matrix((0, tp.layout.dim))

        d, s_e, s_i = _natural_scales(tp)
        return NlpProblem(tp.layout.dim, tp.lb, tp.ub, tp.objective.fn,
                          tp.objective.grad, c_eq, jac_eq, c_in, jac_in,
                          x0=x0, eq_slices=eq_slices, ineq_slices=in_slices,
                          x_scale=d, eq_scale=s_e, in_scale=s_i, source=tp)

    def violations(self, x) -> tuple:
        """(max |c_eq|, max positive c_in) recomputed from scratch."""
        ce = self.c_eq(x)
        ci = self.c_in(x)
        ve = float(np.abs(ce).max()) if ce.size else 0.0
        vi = float(np.maximum(ci, 0.0).max()) if ci.size else 0.0
        return ve, vi

    def block_violations(self, x) -> dict:
        out = {}
        ce = self.c_eq(x)
        for name, sl in self.eq_slices.items():
            seg = ce[sl]
            out[name] = float(np.abs(seg).max()) if seg.size else 0.0
        ci = self.c_in(x)
        for name, sl in self.ineq_slices.items():
            seg = ci[sl]
            out[name] = float(np.maximum(seg, 0.0).max()) if seg.size else 0.0
        return out


def _natural_scales(tp: TranscribedProblem) -> tuple:
    """Column and row magnitudes that bring the problem near unit scale.

    Torques scale by their limit, contact forces and wrench gains by the
    per-contact share of the robot weight, the disturbance bound by the full
    weight.  Force-valued rows (dynamics torque rows, friction rows, the
    margin blocks) scale by weight or torque limit; geometric rows stay as
    they are.
    """
    lay = tp.layout
    m = lay.model
    mg = m.total_mass() * dyn.GRAVITY
    d = np.ones(lay.dim)
    tau_s = np.maximum(np.abs(m.tau_bounds()).max(axis=1), 1.0)
    lam_s = mg / max(1, len(m.contacts))
    for k in range(lay.grid.segments):
        d[lay.tau(k)] = tau_s
        if lay.active[k]:
            d[lay.lam(k)] = lam_s
        if lay.opts.robust:
            d[lay.rho(k)] = mg
            if lay.active[k]:
                d[lay.gains(k)] = lam_s
    se = []
    for b in tp.eq_blocks():
        if b.name == "dynamics_defect":
            per = np.concatenate([np.full(m.n_v, mg), np.ones(m.n_q)])
            se.append(np.tile(per, lay.grid.segments))
        elif b.name == "margin_balance":
            se.append(np.full(b.dim, mg))
        else:
            se.append(np.ones(b.dim))
    si = []
    for b in tp.ineq_blocks():
        if b.name == "friction":
            si.append(np.full(b.dim, mg))
        elif b.name == "margin_rows":
            parts = []
            for k in range(lay.grid.segments):
                parts.append(np.full(5 * len(lay.active[k]), mg))
                parts.append(np.tile(tau_s, 2))
            si.append(np.concatenate(parts) if parts else np.zeros(0))
        else:
            si.append(np.ones(b.dim))
    s_e = np.concatenate(se) if se else np.zeros(0)
    s_i = np.concatenate(si) if si else np.zeros(0)
    return d, s_e, s_i


@dataclass
class SolveResult:
    x: np.ndarray
    status: str                  # Optimal | Feasible | Infeasible | IterationLimit
    objective: float
    max_eq_violation: float
    max_ineq_violation: float
    outer_iters: int
    inner_iters: int
    wall_time: float
    multipliers_eq: np.ndarray
    multipliers_ineq: np.ndarray
    history: list

    @property
    def feasible(self) -> bool:
        return self.status in ("Optimal", "Feasible")


def solve(nlp: NlpProblem, x0: np.ndarray | None = None,
          opts: SolverOptions | None = None, log=None) -> SolveResult:
    """Run the augmented Lagrangian loop from x0 (or nlp.x0).

    log, if given, is called with one dict per outer iteration (penalty,
    inner tolerance, violations, objective, inner iteration count).
    """
    o = opts or SolverOptions()
    if x0 is None:
        x0 = nlp.x0 if nlp.x0 is not None else np.zeros(nlp.dim)
    x = np.clip(np.asarray(x0, float), nlp.lb, nlp.ub)

    d = nlp.x_scale if nlp.x_scale is not None else np.ones(nlp.dim)
    y = x / d
    lby, uby = nlp.lb / d, nlp.ub / d
    n_eq = nlp.c_eq(x).size
    n_in = nlp.c_in(x).size
    s_e = nlp.eq_scale if nlp.eq_scale is not None else np.ones(n_eq)
    s_i = nlp.in_scale if nlp.in_scale is not None else np.ones(n_in)
    g0 = np.asarray(nlp.grad(x), float)
    _assert_finite(g0, "objective gradient")
    fs = max(1.0, float(np.abs(d * g0).max()) if g0.size else 1.0)

    def scl_jac(J, s):
        J = J.tocsr(copy=True)
        J.data *= d[J.indices]
        if s.size:
            J.data /= np.repeat(s, np.diff(J.indptr))
        return J

    def feasible(ve, vi):
        return ve <= o.tol_feas and vi <= o.tol_ineq

    def newton_polish(y):
        """Damped Gauss-Newton least-norm steps on the violated residuals.

        The truncated inner solves leave a small constraint residual that a
        quadratic penalty could only remove at extreme penalty values; a few
        projected corrections close it directly.  Each step solves the
        normal equations of the scaled residual system with a direct sparse
        factorization (iterative least-squares stalls on the mixed-unit
        Jacobian) and backtracks until the raw violation decreases.
        """
        yy = y.copy()
        for _ in range(25):
            x = d * yy
            ce = nlp.c_eq(x)
            ci = nlp.c_in(x)
            ve = float(np.abs(ce).max()) if ce.size else 0.0
            vi = float(np.maximum(ci, 0.0).max()) if ci.size else 0.0
            if ve <= 0.5 * o.tol_feas and vi <= 0.5 * o.tol_ineq:
                return yy
            rows = [ce / s_e] if n_eq else []
            jacs = [scl_jac(nlp.jac_eq(x), s_e)] if n_eq else []
            if n_in:
                act = np.flatnonzero(ci > -o.tol_ineq)
                if act.size:
                    rows.append(np.maximum(ci[act], 0.0) / s_i[act])
                    jacs.append(scl_jac(nlp.jac_in(x), s_i)[act])
            if not rows:
                return yy
            res = np.concatenate(rows)
            J = sp.vstack(jacs, format="csr")
            A = (J @ J.T).tocsc()
            A += 1e-10 * max(A.diagonal().max(), 1.0) * sp.identity(
                A.shape[0], format="csc")
            try:
                w = sp.linalg.splu(A).solve(-res)
            except RuntimeError:
                return None
            dy = J.T @ w
            viol0 = max(ve, vi)
            t = 1.0
            for _bt in range(8):
                yt = np.clip(yy + t * dy, lby, uby)
                vet, vit = nlp.violations(d * yt)
                if max(vet, vit) < viol0:
                    break
                t *= 0.5
            else:
                return None
            yy = yt
        x = d * yy
        ve, vi = nlp.violations(x)
        return yy if feasible(ve, vi) else None

    mu = np.zeros(n_eq)
    nu = np.zeros(n_in)
    r = o.penalty_init
    omega = 1.0 / r
    eta = 1.0 / r ** 0.1
    t0 = time.perf_counter()

    best = None   # ((infeasible flag, viol-or-0, f), x, ve, vi, f) lexicographic

    def consider(x, ve, vi, f):
        nonlocal best
        bad = not feasible(ve, vi)
        key = (bad, max(ve, vi) if bad else 0.0, f)
        if best is None or key < best[0]:
            best = (key, x.copy(), ve, vi, f)

    ve, vi = nlp.violations(x)
    consider(x, ve, vi, nlp.f(x))

    history = []
    inner_total = 0
    status = "IterationLimit"
    converged = False
    x_final, ve_final, vi_final = x, ve, vi
    # monotone-feasibility baseline starts at the first outer iterate, not the
    # seed: an exactly feasible seed would otherwise forbid any useful step
    y_acc, viol_acc = y.copy(), np.inf
    ve_acc, vi_acc, f_acc = ve, vi, nlp.f(x)

    for outer in range(o.max_outer):
        def fg(yy, mu=mu, nu=nu, r=r):
            xx = d * yy
            ce = nlp.c_eq(xx) / s_e if n_eq else np.zeros(0)
            ci = nlp.c_in(xx) / s_i if n_in else np.zeros(0)
            _assert_finite(ce, "equality residual")
            _assert_finite(ci, "inequality residual")
            f = nlp.f(xx) / fs
            g = d * nlp.grad(xx) / fs
            if ce.size:
                w = mu + r * ce
                f += mu @ ce + 0.5 * r * (ce @ ce)
                g += scl_jac(nlp.jac_eq(xx), s_e).T @ w
            if ci.size:
                w = np.maximum(0.0, nu + r * ci)
                f += (w @ w - nu @ nu) / (2.0 * r)
                g += scl_jac(nlp.jac_in(xx), s_i).T @ w
            _assert_finite(g, "merit gradient")
            return f, g

        res = minimize(fg, y, jac=True, method="L-BFGS-B",
                       bounds=Bounds(lby, uby),
                       options={"maxiter": o.max_inner, "maxfun": 3 * o.max_inner,
                                "maxcor": 10, "ftol": 1e-16,
                                "gtol": max(omega, 1e-2 * o.tol_opt)})
        y = res.x
        inner_total += res.nit
        x = d * y
        ce = nlp.c_eq(x)
        ci = nlp.c_in(x)
        ve = float(np.abs(ce).max()) if ce.size else 0.0
        vi = float(np.maximum(ci, 0.0).max()) if ci.size else 0.0
        viol = max(ve, vi)
        f_now = nlp.f(x)
        consider(x, ve, vi, f_now)

        if viol > max(1.4 * viol_acc, o.tol_feas):
            # feasibility degraded too much: reject the step, restore the
            # previous iterate and retry under a stiffer penalty
            rec = {"outer": outer, "penalty": r, "omega": omega, "eta": eta,
                   "eq_violation": ve_acc, "ineq_violation": vi_acc,
                   "objective": f_acc, "inner_iters": int(res.nit),
                   "inner_status": int(res.status), "rejected_trial": viol}
            history.append(rec)
            if log is not None:
                log(rec)
            y = y_acc.copy()
            r *= o.penalty_growth
            if r > o.penalty_max:
                status = "Infeasible"
                break
            omega = max(1.0 / r, 1e-2 * o.tol_opt)
            eta = max(1.0 / r ** 0.1, 0.1 * o.tol_feas)
            continue

        polished = False
        if not feasible(ve, vi) and viol <= max(o.polish_viol, 1e3 * o.tol_feas):
            y_pol = newton_polish(y)
            if y_pol is not None:
                y = y_pol
                x = d * y
                ce = nlp.c_eq(x)
                ci = nlp.c_in(x)
                ve = float(np.abs(ce).max()) if ce.size else 0.0
                vi = float(np.maximum(ci, 0.0).max()) if ci.size else 0.0
                viol = max(ve, vi)
                f_now = nlp.f(x)
                consider(x, ve, vi, f_now)
                polished = True

        y_acc, viol_acc = y.copy(), viol
        ve_acc, vi_acc, f_acc = ve, vi, f_now
        x_final, ve_final, vi_final = x, ve, vi
        rec = {"outer": outer, "penalty": r, "omega": omega, "eta": eta,
               "eq_violation": ve, "ineq_violation": vi, "objective": f_now,
               "inner_iters": int(res.nit), "inner_status": int(res.status),
               "polished": polished}
        history.append(rec)
        if log is not None:
            log(rec)

        if viol <= max(eta, o.tol_feas):
            sce = ce / s_e if n_eq else ce
            sci = ci / s_i if n_in else ci
            mu = np.clip(mu + r * sce, -o.multiplier_max, o.multiplier_max)
            if n_in:
                nu = np.clip(np.maximum(0.0, nu + r * sci), 0.0, o.multiplier_max)
            if feasible(ve, vi) and omega <= o.tol_opt:
                status = "Optimal"
                converged = True
                break
            omega = max(omega / r, 1e-2 * o.tol_opt)
            eta = max(eta / r ** 0.9, 0.1 * o.tol_feas)
        else:
            r *= o.penalty_growth
            if r > o.penalty_max:
                status = "Infeasible"
                break
            omega = max(1.0 / r, 1e-2 * o.tol_opt)
            eta = max(1.0 / r ** 0.1, 0.1 * o.tol_feas)

    wall = time.perf_counter() - t0
    mu_raw = fs * mu / s_e if n_eq else mu
    nu_raw = fs * nu / s_i if n_in else nu
    if converged:
        return SolveResult(x_final, "Optimal", nlp.f(x_final), ve_final, vi_final,
                           len(history), inner_total, wall, mu_raw, nu_raw, history)
    key, xb, ve_b, vi_b, f_b = best
    if not key[0]:
        status = "Feasible"       # a feasible iterate exists, keep the best one
    elif status != "Infeasible":
        status = "IterationLimit"
    return SolveResult(xb, status, f_b, ve_b, vi_b, len(history), inner_total,
                       wall, mu_raw, nu_raw, history)


# ---------------------------------------------------------------------------
# initial guess


def default_initial_guess(tp: TranscribedProblem, q0: np.ndarray) -> np.ndarray:
    """Stationary seed: constant configuration, zero velocity, stance forces
    sharing the weight equally plus a least-norm correction that balances the
    6 base static rows exactly, torques from inverse dynamics."""
    lay = tp.layout
    m = lay.model
    q0 = np.asarray(q0, float)
    x = np.zeros(lay.dim)
    N = lay.grid.segments
    for k in range(N + 1):
        x[lay.q(k)] = q0
    fk = dyn.fk(m, q0)
    for (foot, pi), off in lay._foot_xy.items():
        ci = m.contact_names().index(foot)
        x[off:off + 2] = fk.contacts[ci][:2]

    W = m.total_mass() * dyn.GRAVITY
    cache = {}
    zero_v = np.zeros(m.n_v)
    for k in range(N):
        act = tuple(lay.active[k])
        if act not in cache:
            if act:
                lam0 = np.zeros(3 * len(act))
                for i, ci in enumerate(act):
                    lam0[3 * i:3 * i + 3] = (W / len(act)) * m.contacts[ci].normal
                g0 = dyn.inverse_dynamics(m, q0, zero_v, zero_v, lam0, active=list(act))
                Js = dyn.support_jacobian(m, q0, active=list(act))
                B = Js[:, :6].T                              # (6, 3c)
                dlam, *_ = np.linalg.lstsq(B, g0[:6], rcond=None)
                lam = lam0 + dlam
                tau = dyn.inverse_dynamics(m, q0, zero_v, zero_v, lam, active=list(act))[6:]
            else:
                lam = np.zeros(0)
                tau = dyn.inverse_dynamics(m, q0, zero_v, zero_v)[6:]
            cache[act] = (lam, tau)
        lam, tau = cache[act]
        if lam.size:
            x[lay.lam(k)] = lam
        x[lay.tau(k)] = tau
    return np.clip(x, tp.lb, tp.ub)


def path_initial_guess(tp: TranscribedProblem, qs: np.ndarray) -> np.ndarray:
    """Seed from a configuration path qs of shape (N + 1, n_q).

    Velocities are chosen so the semi-implicit integration rows vanish
    exactly on the path (v_0 = 0, the MRP block inverted through the rate
    matrix at psi_k); contact forces take equal weight shares plus a
    least-norm correction that balances the 6 base rows of the inverse
    dynamics at the path accelerations, and torques are the actuated rows
    at those forces.  The result satisfies the dynamics block to rounding
    on any path that stays inside the variable bounds.
    """
    from .spatial import mrp_rate_matrix

    lay = tp.layout
    m = lay.model
    N, h = lay.grid.segments, lay.grid.h
    qs = np.asarray(qs, float)
    if qs.shape != (N + 1, m.n_q):
        raise ValueError(f"path shape {qs.shape} does not match ({N + 1}, {m.n_q})")

    vs = np.zeros((N + 1, m.n_v))
    for k in range(N):
        dq = (qs[k + 1] - qs[k]) / h
        vs[k + 1, :3] = dq[:3]
        vs[k + 1, 3:6] = np.linalg.solve(mrp_rate_matrix(qs[k, 3:6]), dq[3:6])
        vs[k + 1, 6:] = dq[6:]

    x = np.zeros(lay.dim)
    for k in range(N + 1):
        x[lay.q(k)] = qs[k]
        x[lay.v(k)] = vs[k]

    W = m.total_mass() * dyn.GRAVITY
    for k in range(N):
        act = list(lay.active[k])
        vdot = (vs[k + 1] - vs[k]) / h
        if act:
            lam0 = np.zeros(3 * len(act))
            for i, ci in enumerate(act):
                lam0[3 * i:3 * i + 3] = (W / len(act)) * m.contacts[ci].normal
            g0 = dyn.inverse_dynamics(m, qs[k], vs[k], vdot, lam0, active=act)
            Js = dyn.support_jacobian(m, qs[k], active=act)
            dlam, *_ = np.linalg.lstsq(Js[:, :6].T, g0[:6], rcond=None)
            lam = lam0 + dlam
            tau = dyn.inverse_dynamics(m, qs[k], vs[k], vdot, lam, active=act)[6:]
            x[lay.lam(k)] = lam
        else:
            tau = dyn.inverse_dynamics(m, qs[k], vs[k], vdot)[6:]
        x[lay.tau(k)] = tau

    fk0 = dyn.fk(m, qs[0])
    for (foot, pi), off in lay._foot_xy.items():
        ci = m.contact_names().index(foot)
        x[off:off + 2] = fk0.contacts[ci][:2]
    return np.clip(x, tp.lb, tp.ub)


# ---------------------------------------------------------------------------
# derivative checks


@dataclass
class DerivativeReport:
    max_rel_err: float
    worst: tuple                 # (component, row, col)
    outside_pattern: list        # [(component, row, col, value), ...]
    cols_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < 1e-5 and not self.outside_pattern


def check_derivatives(nlp: NlpProblem, x: np.ndarray, samples: int = 50,
                      h: float = 1e-6, seed: int = 0) -> DerivativeReport:
    """Central finite differences against the declared derivatives.

    Samples columns of the two Jacobians and the objective gradient, returns
    the worst relative error with its (component, row, column) location, and
    lists numerically nonzero entries missing from the sparsity structure.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, float)
    cols = np.arange(nlp.dim)
    if nlp.dim > samples:
        cols = np.sort(rng.choice(nlp.dim, size=samples, replace=False))
    parts = []
    ce = nlp.c_eq(x)
    if ce.size:
        parts.append(("equality", nlp.c_eq, nlp.jac_eq(x).tocsc()))
    ci = nlp.c_in(x)
    if ci.size:
        parts.append(("inequality", nlp.c_in, nlp.jac_in(x).tocsc()))

    worst = (0.0, ("objective", 0, 0))
    outside = []
    g = np.asarray(nlp.grad(x), float)
    for c in cols:
        xp = x.copy(); xp[c] += h
        xm = x.copy(); xm[c] -= h
        fd_g = (nlp.f(xp) - nlp.f(xm)) / (2.0 * h)
        scale = max(1.0, abs(g[c]), abs(fd_g))
        err = abs(fd_g - g[c]) / scale
        if err > worst[0]:
            worst = (err, ("objective", 0, int(c)))
        for name, fn, J in parts:
            col = np.asarray(J[:, [c]].todense()).ravel()
            fd = (fn(xp) - fn(xm)) / (2.0 * h)
            scale = np.maximum(1.0, np.maximum(np.abs(col), np.abs(fd)))
            errs = np.abs(fd - col) / scale
            i = int(np.argmax(errs))
            if errs[i] > worst[0]:
                worst = (float(errs[i]), (name, i, int(c)))
            pattern = set(J.indices[J.indptr[c]:J.indptr[c + 1]].tolist())
            big = np.flatnonzero(np.abs(fd) > 50.0 * h)
            for i in big:
                if int(i) not in pattern:
                    outside.append((name, int(i), int(c), float(fd[i])))
    return DerivativeReport(worst[0], worst[1], outside, len(cols))


def audit_derivatives(tp: TranscribedProblem, x: np.ndarray, seed: int = 0,
                      n_cols: int | None = None, h: float = 1e-6) -> dict:
    """Central finite differences against every block Jacobian.

    Returns per-block max relative column error and the count of numeric
    nonzeros falling outside the declared sparsity pattern.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for b in tp.blocks:
        if b.dim == 0:
            out[b.name] = {"max_rel_err": 0.0, "outside_pattern": 0, "cols": 0}
            continue
        J = b.jac(x).tocsc()
        declared = set(b.cols.tolist())
        cols = np.array(sorted(declared), dtype=int)
        if n_cols is not None and len(cols) > n_cols:
            cols = rng.choice(cols, size=n_cols, replace=False)
        err = 0.0
        for c in cols:
            xp = x.copy(); xp[c] += h
            xm = x.copy(); xm[c] -= h
            fd = (b.fn(xp) - b.fn(xm)) / (2.0 * h)
            col = np.asarray(J[:, c].todense()).ravel()
            scale = max(1.0, np.abs(col).max(), np.abs(fd).max())
            err = max(err, float(np.abs(fd - col).max() / scale))
        pat = set(zip(b.rows.tolist(), b.cols.tolist()))
        Jc = b.jac(x).tocoo()
        outside = sum(1 for i, j, v in zip(Jc.row, Jc.col, Jc.data)
                      if v != 0.0 and (int(i), int(j)) not in pat)
        out[b.name] = {"max_rel_err": err, "outside_pattern": int(outside),
                       "cols": int(len(cols))}
    return out
