"""Direct transcription of whole-body trajectory optimization.

Time grid with N segments / M = N+1 mesh points; states q_k, v_k at every
mesh point, controls tau_k and stacked stance forces lam_k on segments
k = 0..N-1.  Dynamics are enforced with semi-implicit Euler defects; foot
placement, end-effector waypoints, friction pyramids and boundary
velocities are separate constraint blocks, each carrying its own residual,
sparse Jacobian, and declared sparsity pattern.

Contact forces exist only where the schedule puts the foot in stance
(structural elimination of swing forces); the robust layout additionally
carries per-knot disturbance margins rho_k and contact gain matrices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import dynamics as dyn
from .model import RobotModel, ValidationError
from .spatial import mrp_rate_matrix, rotation_to_mrp, skew

CSTEP = 1e-200


@dataclass(frozen=True)
class MeshGrid:
    duration: float
    segments: int

    @property
    def n_points(self) -> int:
        return self.segments + 1

    @property
    def h(self) -> float:
        return self.duration / self.segments

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.h


@dataclass
class StancePhase:
    start: int                      # mesh index, inclusive
    end: int                        # mesh index, inclusive
    position: np.ndarray | None = None   # world target; None until resolved
    free_xy: bool = False
    ground_z: float = 0.0


@dataclass
class ContactSchedule:
    feet: dict                       # contact name -> [StancePhase, ...]

    def phase_at(self, foot: str, k: int):
        for ph in self.feet.get(foot, []):
            if ph.start <= k <= ph.end:
                return ph
        return None

    def in_stance(self, foot: str, k: int) -> bool:
        return self.phase_at(foot, k) is not None

    def active_contacts(self, model: RobotModel, k: int) -> list:
        return [c for c, ct in enumerate(model.contacts) if self.in_stance(ct.name, k)]

    def validate(self, model: RobotModel, grid: MeshGrid, min_support: int = 2):
        names = set(model.contact_names())
        for foot, phases in self.feet.items():
            if foot not in names:
                raise ValidationError(f"schedule references unknown contact '{foot}'")
            prev_end = -1
            for ph in phases:
                if not (0 <= ph.start <= ph.end <= grid.segments):
                    raise ValidationError(
                        f"stance phase [{ph.start}, {ph.end}] of '{foot}' leaves the mesh "
                        f"range [0, {grid.segments}]")
                if ph.start <= prev_end:
                    raise ValidationError(f"stance phases of '{foot}' overlap or are unordered")
                prev_end = ph.end
        for k in range(grid.n_points):
            n_act = len(self.active_contacts(model, k))
            if n_act < min_support:
                raise ValidationError(
                    f"only {n_act} feet in stance at mesh point {k} (need >= {min_support})")


def all_stance_schedule(model: RobotModel, grid: MeshGrid) -> ContactSchedule:
    return ContactSchedule({c.name: [StancePhase(0, grid.segments)] for c in model.contacts})


@dataclass
class LayoutOptions:
    robust: bool = False
    eliminate_swing_forces: bool = True
    workspace_box: float = 10.0
    rho_max: float = 1e4


class DecisionLayout:
    """Flat index map of the decision vector.

    Per mesh point k: q_k, v_k, then (k < N) tau_k, lam_k and, in robust
    layouts, rho_k and the contact gain entries; free-foot xy variables are
    appended at the end.  lam_k stacks 3-vectors for the contacts active at
    mesh point k only (unless swing-force elimination is disabled).
    """

    def __init__(self, model: RobotModel, grid: MeshGrid, schedule: ContactSchedule,
                 opts: LayoutOptions | None = None):
        self.model = model
        self.grid = grid
        self.schedule = schedule
        self.opts = opts or LayoutOptions()
        n_q, n_v, n_j = model.n_q, model.n_v, model.n_j
        N = grid.segments
        n_c = len(model.contacts)

        if self.opts.eliminate_swing_forces:
            self.active = [schedule.active_contacts(model, k) for k in range(N)]
        else:
            self.active = [list(range(n_c)) for _ in range(N)]

        self._q = np.zeros(N + 1, dtype=int)
        self._v = np.zeros(N + 1, dtype=int)
        self._tau = np.zeros(N, dtype=int)
        self._lam = np.zeros(N, dtype=int)
        self._rho = np.zeros(N, dtype=int)
        self._gain = np.zeros(N, dtype=int)
        off = 0
        for k in range(N):
            self._q[k] = off; off += n_q
            self._v[k] = off; off += n_v
            self._tau[k] = off; off += n_j
            self._lam[k] = off; off += 3 * len(self.active[k])
            if self.opts.robust:
                self._rho[k] = off; off += 1
                self._gain[k] = off; off += 9 * len(self.active[k])
        self._q[N] = off; off += n_q
        self._v[N] = off; off += n_v
        self._foot_xy = {}
        for c in model.contacts:
            for pi, ph in enumerate(schedule.feet.get(c.name, [])):
                if ph.free_xy:
                    self._foot_xy[(c.name, pi)] = off
                    off += 2
        self.dim = off

    # -- slice accessors (all return np.ndarray index vectors) --
    def q(self, k): return np.arange(self._q[k], self._q[k] + self.model.n_q)
    def v(self, k): return np.arange(self._v[k], self._v[k] + self.model.n_v)
    def tau(self, k): return np.arange(self._tau[k], self._tau[k] + self.model.n_j)

    def lam(self, k):
        return np.arange(self._lam[k], self._lam[k] + 3 * len(self.active[k]))

    def lam_foot(self, k, contact_index):
        if contact_index not in self.active[k]:
            return None
        i = self.active[k].index(contact_index)
        return np.arange(self._lam[k] + 3 * i, self._lam[k] + 3 * i + 3)

    def rho(self, k):
        if not self.opts.robust:
            raise KeyError("layout has no margin variables (robust=False)")
        return int(self._rho[k])

    def gains(self, k):
        if not self.opts.robust:
            raise KeyError("layout has no gain variables (robust=False)")
        return np.arange(self._gain[k], self._gain[k] + 9 * len(self.active[k]))

    def foot_xy(self, foot: str, phase_index: int):
        off = self._foot_xy[(foot, phase_index)]
        return np.arange(off, off + 2)

    def counts(self) -> dict:
        N = self.grid.segments
        n_lam = sum(3 * len(a) for a in self.active)
        d = {
            "q": (N + 1) * self.model.n_q,
            "v": (N + 1) * self.model.n_v,
            "tau": N * self.model.n_j,
            "lam": n_lam,
            "foot_xy": 2 * len(self._foot_xy),
        }
        if self.opts.robust:
            d["rho"] = N
            d["gains"] = 3 * n_lam
        return d

    def describe(self, i: int) -> str:
        if not (0 <= i < self.dim):
            raise IndexError(i)
        N = self.grid.segments
        for (foot, pi), off in self._foot_xy.items():
            if off <= i < off + 2:
                return f"foot_xy[{foot}/{pi}][{i - off}]"
        for k in range(N + 1):
            base = self._q[k]
            if base <= i < base + self.model.n_q:
                return f"q[{k}][{i - base}]"
            base = self._v[k]
            if base <= i < base + self.model.n_v:
                return f"v[{k}][{i - base}]"
            if k == N:
                continue
            base = self._tau[k]
            if base <= i < base + self.model.n_j:
                return f"tau[{k}][{i - base}]"
            base = self._lam[k]
            if base <= i < base + 3 * len(self.active[k]):
                return f"lam[{k}][{i - base}]"
            if self.opts.robust:
                if i == self._rho[k]:
                    return f"rho[{k}]"
                base = self._gain[k]
                if base <= i < base + 9 * len(self.active[k]):
                    return f"gain[{k}][{i - base}]"
        raise IndexError(i)


def build_layout(model: RobotModel, grid: MeshGrid, schedule: ContactSchedule,
                 opts: LayoutOptions | None = None) -> DecisionLayout:
    return DecisionLayout(model, grid, schedule, opts)


def variable_bounds(layout: DecisionLayout) -> tuple:
    """Box bounds (lb, ub) on the decision vector.

    Joint limits and torque/velocity limits come from the model; base
    translation gets the workspace box; MRP coordinates, contact forces and
    gains stay unbounded; rho_k in [0, rho_max]; free-foot xy in the
    workspace box.
    """
    m = layout.model
    lb = np.full(layout.dim, -np.inf)
    ub = np.full(layout.dim, np.inf)
    qb = m.q_bounds()
    vb = m.v_bounds()
    tb = m.tau_bounds()
    W = layout.opts.workspace_box
    qlo, qhi = qb[:, 0].copy(), qb[:, 1].copy()
    qlo[0:3] = np.maximum(qlo[0:3], -W)
    qhi[0:3] = np.minimum(qhi[0:3], W)
    N = layout.grid.segments
    for k in range(N + 1):
        iq, iv = layout.q(k), layout.v(k)
        lb[iq], ub[iq] = qlo, qhi
        lb[iv], ub[iv] = vb[:, 0], vb[:, 1]
        if k < N:
            it = layout.tau(k)
            lb[it], ub[it] = tb[:, 0], tb[:, 1]
            if layout.opts.robust:
                lb[layout.rho(k)] = 0.0
                ub[layout.rho(k)] = layout.opts.rho_max
                gidx = layout.gains(k)
                for j, cidx in enumerate(layout.active[k]):
                    if not layout.schedule.in_stance(m.contacts[cidx].name, k):
                        blk = gidx[9 * j:9 * j + 9]
                        lb[blk] = 0.0
                        ub[blk] = 0.0
    for key, off in layout._foot_xy.items():
        lb[off:off + 2] = -W
        ub[off:off + 2] = W
    return lb, ub


@dataclass
class ConstraintBlock:
    name: str
    kind: str                  # "eq" (residual == 0) or "ineq" (residual <= 0)
    dim: int
    fn: callable
    jac: callable
    rows: np.ndarray           # declared sparsity superset, COO row indices
    cols: np.ndarray


def _pattern(row_blocks, col_blocks):
    """Cartesian-product sparsity entries for paired (rows, cols) chunks."""
    rs, cs = [], []
    for r, c in zip(row_blocks, col_blocks):
        r = np.asarray(r, dtype=int)
        c = np.asarray(c, dtype=int)
        rs.append(np.repeat(r, len(c)))
        cs.append(np.tile(c, len(r)))
    return np.concatenate(rs) if rs else np.zeros(0, int), np.concatenate(cs) if cs else np.zeros(0, int)


# ---------------------------------------------------------------------------
# boundary velocities


def boundary_velocity_block(layout: DecisionLayout, enabled: bool = True) -> ConstraintBlock:
    """v_0 = 0 and v_N = 0 (rest-to-rest endpoints); 2 n_v rows when enabled."""
    n_v = layout.model.n_v
    if not enabled:
        z = np.zeros(0)
        return ConstraintBlock("boundary_velocity", "eq", 0, lambda x: z,
                               lambda x: sp.csr_matrix((0, layout.dim)),
                               np.zeros(0, int), np.zeros(0, int))
    idx = np.concatenate([layout.v(0), layout.v(layout.grid.segments)])
    J = sp.csr_matrix((np.ones(2 * n_v), (np.arange(2 * n_v), idx)), shape=(2 * n_v, layout.dim))
    return ConstraintBlock("boundary_velocity", "eq", 2 * n_v,
                           lambda x: x[idx], lambda x: J, np.arange(2 * n_v), idx)


# ---------------------------------------------------------------------------
# end-effector pose waypoints


@dataclass
class Waypoint:
    k: int                               # mesh index
    position: np.ndarray | None = None   # world target
    orientation: np.ndarray | None = None  # MRP of the desired world rotation


def ee_pose_block(layout: DecisionLayout, waypoints) -> ConstraintBlock:
    """Position/orientation residuals of the end-effector at given mesh points.

    Orientation rows are the MRP of R_desired^T R_ee; both row groups are
    differentiated by complex-stepping the configuration columns.
    """
    from .spatial import mrp_to_rotation

    model = layout.model
    t = dyn.tree(model)
    n_q = model.n_q
    wps = list(waypoints)
    for w in wps:
        if not (0 <= w.k <= layout.grid.segments):
            raise ValidationError(f"waypoint mesh index {w.k} outside [0, {layout.grid.segments}]")
        if w.position is None and w.orientation is None:
            raise ValidationError(f"waypoint at mesh point {w.k} constrains nothing")
    B = len(wps)
    pos = np.array([np.zeros(3) if w.position is None else np.asarray(w.position, float)
                    for w in wps]).reshape(B, 3)
    has_pos = np.array([w.position is not None for w in wps], dtype=bool)
    Rdes = np.array([np.eye(3) if w.orientation is None
                     else mrp_to_rotation(np.asarray(w.orientation, float)) for w in wps]).reshape(B, 3, 3)
    has_ori = np.array([w.orientation is not None for w in wps], dtype=bool)
    ks = np.array([w.k for w in wps], dtype=int)
    IQ = np.array([layout.q(k) for k in ks], dtype=int) if B else np.zeros((0, n_q), int)

    # row layout: per waypoint, its position rows then its orientation rows
    offs, lo = [], 0
    for i in range(B):
        offs.append(lo)
        lo += 3 * int(has_pos[i]) + 3 * int(has_ori[i])
    dim = lo

    def _raw(qs, wp):
        """Per-evaluation-row [pos_err(3); ori_err(3)] for waypoint index wp[row]."""
        R, p, z, pj = dyn.fk_arrays(t, qs)
        eb = t.ee_body
        x = p[:, eb] + np.einsum("bij,j->bi", R[:, eb], t.ee_offset)
        out = np.zeros((qs.shape[0], 6), dtype=qs.dtype)
        out[:, :3] = x - pos[wp]
        rel = np.matmul(Rdes[wp].transpose(0, 2, 1).astype(qs.dtype), R[:, eb])
        out[:, 3:] = rotation_to_mrp(rel)
        return out

    def _gather(vals, wp_rows):
        parts = []
        for i in range(B):
            v = vals[wp_rows[i]]
            if has_pos[i]:
                parts.append(v[..., 0:3])
            if has_ori[i]:
                parts.append(v[..., 3:6])
        return parts

    def fn(x):
        if not B:
            return np.zeros(0)
        raw = _raw(x[IQ], np.arange(B))
        return np.concatenate(_gather(raw, [i for i in range(B)]), axis=-1).ravel() \
            if dim else np.zeros(0)

    def jac(x):
        if not B:
            return sp.csr_matrix((0, layout.dim))
        big = np.repeat(x[IQ].astype(complex), n_q, axis=0)
        for c in range(n_q):
            big[c::n_q, c] += 1j * CSTEP
        der = _raw(big, np.repeat(np.arange(B), n_q)).imag / CSTEP   # (B*n_q, 6)
        data, ri, ci = [], [], []
        for i in range(B):
            D = der[i * n_q:(i + 1) * n_q]                            # (n_q, 6)
            sel = (([0, 1, 2] if has_pos[i] else []) + ([3, 4, 5] if has_ori[i] else []))
            Dr = D[:, sel].T                                          # (rows_i, n_q)
            rr = offs[i] + np.arange(len(sel))
            data.append(Dr.ravel())
            ri.append(np.repeat(rr, n_q))
            ci.append(np.tile(IQ[i], len(sel)))
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
                             shape=(dim, layout.dim))

    row_blocks = [offs[i] + np.arange(3 * int(has_pos[i]) + 3 * int(has_ori[i])) for i in range(B)]
    pr, pc = _pattern(row_blocks, [IQ[i] for i in range(B)])
    return ConstraintBlock("ee_pose", "eq", dim, fn, jac, pr, pc)


# ---------------------------------------------------------------------------
# stance feet


def stance_foot_block(layout: DecisionLayout) -> ConstraintBlock:
    """Pins every stance foot at every mesh point of its phase.

    Fixed phases: foot position equals the phase target (3 rows).  Free-xy
    phases: x/y equal the phase's shared decision variables and z the
    ground height.
    """
    model = layout.model
    t = dyn.tree(model)
    n_q = model.n_q
    entries = []      # (contact idx, k, target(3) or None, xy index array or None, ground_z)
    for ci, c in enumerate(model.contacts):
        for pi, ph in enumerate(layout.schedule.feet.get(c.name, [])):
            for k in range(ph.start, ph.end + 1):
                if ph.free_xy:
                    entries.append((ci, k, None, layout.foot_xy(c.name, pi), ph.ground_z))
                else:
                    if ph.position is None:
                        raise ValidationError(
                            f"stance phase {pi} of '{c.name}' has no resolved position")
                    entries.append((ci, k, np.asarray(ph.position, float), None, 0.0))
    dim = 3 * len(entries)
    if not entries:
        return ConstraintBlock("stance_foot", "eq", 0, lambda x: np.zeros(0),
                               lambda x: sp.csr_matrix((0, layout.dim)),
                               np.zeros(0, int), np.zeros(0, int))
    IQ = np.array([layout.q(k) for (_, k, _, _, _) in entries], dtype=int)
    bodies = np.array([t.contact_body[ci] for (ci, *_ ) in entries], dtype=int)
    offsets = np.array([t.contact_offset[ci] for (ci, *_ ) in entries])

    def _points(qs):
        R, p, z, pj = dyn.fk_arrays(t, qs)
        idx = np.arange(qs.shape[0])
        b = bodies if qs.shape[0] == len(entries) else np.repeat(bodies, n_q)
        o = offsets if qs.shape[0] == len(entries) else np.repeat(offsets, n_q, axis=0)
        return p[idx, b] + np.einsum("bij,bj->bi", R[idx, b], o)

    def fn(x):
        pts = _points(x[IQ])
        out = np.empty(dim)
        for i, (ci, k, target, xy, gz) in enumerate(entries):
            if xy is None:
                out[3 * i:3 * i + 3] = pts[i] - target
            else:
                out[3 * i] = pts[i, 0] - x[xy[0]]
                out[3 * i + 1] = pts[i, 1] - x[xy[1]]
                out[3 * i + 2] = pts[i, 2] - gz
        return out

    def jac(x):
        B = len(entries)
        qs = x[IQ].astype(complex)
        big = np.repeat(qs, n_q, axis=0)
        for c in range(n_q):
            big[c::n_q, c] += 1j * CSTEP
        der = _points(big).imag / CSTEP               # (B*n_q, 3)
        data, ri, ci_ = [], [], []
        for i in range(B):
            D = der[i * n_q:(i + 1) * n_q].T          # (3, n_q)
            data.append(D.ravel())
            ri.append(np.repeat(np.arange(3 * i, 3 * i + 3), n_q))
            ci_.append(np.tile(IQ[i], 3))
        for i, (cidx, k, target, xy, gz) in enumerate(entries):
            if xy is not None:
                data.append(np.array([-1.0, -1.0]))
                ri.append(np.array([3 * i, 3 * i + 1]))
                ci_.append(np.asarray(xy))
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci_))),
                             shape=(dim, layout.dim))

    row_blocks = [np.arange(3 * i, 3 * i + 3) for i in range(len(entries))]
    col_blocks = [IQ[i] for i in range(len(entries))]
    for i, (cidx, k, target, xy, gz) in enumerate(entries):
        if xy is not None:
            row_blocks.append(np.array([3 * i, 3 * i + 1]))
            col_blocks.append(np.asarray(xy))
    pr, pc = _pattern(row_blocks, col_blocks)
    return ConstraintBlock("stance_foot", "eq", dim, fn, jac, pr, pc)


# ---------------------------------------------------------------------------
# swing forces (materialized layouts only)


def swing_force_block(layout: DecisionLayout) -> ConstraintBlock:
    """lam = 0 where the foot is not in stance; empty under structural elimination."""
    model = layout.model
    idx = []
    for k in range(layout.grid.segments):
        for j, ci in enumerate(layout.active[k]):
            if not layout.schedule.in_stance(model.contacts[ci].name, k):
                lam = layout.lam(k)
                idx.extend(lam[3 * j:3 * j + 3])
    idx = np.array(idx, dtype=int)
    dim = len(idx)
    J = sp.csr_matrix((np.ones(dim), (np.arange(dim), idx)), shape=(dim, layout.dim))
    return ConstraintBlock("swing_force", "eq", dim, lambda x: x[idx], lambda x: J,
                           np.arange(dim), idx)


# ---------------------------------------------------------------------------
# friction pyramid


def friction_rows_for_contact(contact, eps_n: float = 1.0):
    """(A, b) with A lam <= b: 4 pyramid faces plus a minimum normal force.

    Row order: +t, -t, +b, -b, -n; b-vector zeros except -eps_n on the last
    row.  The tangential bound is mu/sqrt(2) of the normal component so the
    pyramid inscribes the friction cone.
    """
    c = contact.mu / np.sqrt(2.0)
    A = np.array([
        contact.tangent - c * contact.normal,
        -contact.tangent - c * contact.normal,
        contact.bitangent - c * contact.normal,
        -contact.bitangent - c * contact.normal,
        -contact.normal,
    ])
    b = np.array([0.0, 0.0, 0.0, 0.0, -eps_n])
    return A, b


def friction_block(layout: DecisionLayout, eps_n: float = 1.0) -> ConstraintBlock:
    """A lam - b <= 0 for every scheduled contact force; constant and linear."""
    model = layout.model
    data, ri, ci = [], [], []
    rhs = []
    r = 0
    for k in range(layout.grid.segments):
        for j, cidx in enumerate(layout.active[k]):
            if not layout.schedule.in_stance(model.contacts[cidx].name, k):
                continue  # materialized swing forces are pinned to zero, not coned
            A, b = friction_rows_for_contact(model.contacts[cidx], eps_n)
            lam = layout.lam(k)[3 * j:3 * j + 3]
            for fi in range(5):
                data.extend(A[fi])
                ri.extend([r] * 3)
                ci.extend(lam)
                rhs.append(b[fi])
                r += 1
    dim = r
    A_sp = sp.csr_matrix((data, (ri, ci)), shape=(dim, layout.dim))
    rhs = np.array(rhs)

    return ConstraintBlock("friction", "ineq", dim, lambda x: A_sp @ x - rhs,
                           lambda x: A_sp, np.array(ri, dtype=int), np.array(ci, dtype=int))


# ---------------------------------------------------------------------------
# dynamics defects


def _mrp_rate_dpsi(psi, omega):
    """d(mrp_rate)/d(psi): (B,3,3) for psi, omega of shape (B,3)."""
    B = psi.shape[0]
    eye = np.eye(3)
    d = np.empty((B, 3, 3))
    pw = (psi * omega).sum(axis=1)
    d[:] = 0.25 * (-2.0 * omega[:, :, None] * psi[:, None, :]
                   - 2.0 * skew(omega)
                   + 2.0 * (pw[:, None, None] * eye)
                   + 2.0 * psi[:, :, None] * omega[:, None, :])
    return d


def dynamics_defect_block(layout: DecisionLayout) -> ConstraintBlock:
    """Semi-implicit Euler defects, n_v torque rows + n_q integration rows per knot.

    Torque rows: inverse dynamics at (q_k, v_k, (v_{k+1}-v_k)/h, lam_k)
    minus the applied tau_k on actuated rows; the 6 base rows must vanish
    on their own.  Integration rows: q_k + h qdot*_{k+1} - q_{k+1} with
    qdot*_{k+1} mapping v_{k+1} through the MRP rate at psi_k.
    """
    model = layout.model
    t = dyn.tree(model)
    grid = layout.grid
    N, h = grid.segments, grid.h
    n_q, n_v, n_j = model.n_q, model.n_v, model.n_j
    rpk = n_v + n_q                      # rows per knot
    dim = N * rpk

    IQ = np.array([layout.q(k) for k in range(N)], dtype=int)
    IV = np.array([layout.v(k) for k in range(N)], dtype=int)
    IQ1 = np.array([layout.q(k + 1) for k in range(N)], dtype=int)
    IV1 = np.array([layout.v(k + 1) for k in range(N)], dtype=int)
    IT = np.array([layout.tau(k) for k in range(N)], dtype=int)

    groups = {}
    for k in range(N):
        groups.setdefault(tuple(layout.active[k]), []).append(k)
    groups = [(list(a), np.array(ks, dtype=int)) for a, ks in groups.items()]
    ILAM = {id(ks): np.array([layout.lam(k) for k in ks], dtype=int).reshape(len(ks), -1)
            for _, ks in groups}

    def _torque_rows(qs, vs, v1s, lams, act):
        return dyn.rnea_batch(t, qs, vs, (v1s - vs) / h, lams if lams.size else None, act)

    def fn(x):
        out = np.empty((N, rpk))
        q, v, v1, q1 = x[IQ], x[IV], x[IV1], x[IQ1]
        for act, ks in groups:
            lam = x[ILAM[id(ks)]]
            g = _torque_rows(q[ks], v[ks], v1[ks], lam, act)
            g[:, 6:] -= x[IT][ks]
            out[ks, :n_v] = g
        out[:, n_v:] = q + h * dyn.configuration_rate(q, v1) - q1
        return out.ravel()

    def jac(x):
        q, v, v1 = x[IQ], x[IV], x[IV1]
        data, ri, ci = [], [], []
        row0 = np.arange(N) * rpk

        ncols = n_q + n_v
        for act, ks in groups:
            K = len(ks)
            lam = x[ILAM[id(ks)]]
            qs = np.repeat(q[ks].astype(complex), ncols, axis=0)
            vs = np.repeat(v[ks].astype(complex), ncols, axis=0)
            v1s = np.repeat(v1[ks].astype(complex), ncols, axis=0)
            lams = np.repeat(lam.astype(complex), ncols, axis=0)
            for c in range(n_q):
                qs[c::ncols, c] += 1j * CSTEP
            for c in range(n_v):
                vs[(n_q + c)::ncols, c] += 1j * CSTEP
            der = _torque_rows(qs, vs, v1s, lams, act).imag / CSTEP  # (K*ncols, n_v)
            for i, k in enumerate(ks):
                D = der[i * ncols:(i + 1) * ncols].T                  # (n_v, ncols)
                rr = row0[k] + np.arange(n_v)
                data.append(D[:, :n_q].ravel())
                ri.append(np.repeat(rr, n_q))
                ci.append(np.tile(IQ[k], n_v))
                data.append(D[:, n_q:].ravel())
                ri.append(np.repeat(rr, n_v))
                ci.append(np.tile(IV[k], n_v))

            # d(torque rows)/d v_{k+1} = M(q_k) / h
            Mb = dyn.mass_matrix_batch(t, q[ks]) / h
            for i, k in enumerate(ks):
                rr = row0[k] + np.arange(n_v)
                data.append(Mb[i].ravel())
                ri.append(np.repeat(rr, n_v))
                ci.append(np.tile(IV1[k], n_v))

            # d(torque rows)/d lam = -J_s^T
            if len(act):
                R, p, z, pj = dyn.fk_arrays(t, q[ks])
                Js = dyn.support_jacobian_batch(t, R, p, z, pj, act)  # (K, 3c, n_v)
                for i, k in enumerate(ks):
                    JT = -Js[i].T                                      # (n_v, 3c)
                    rr = row0[k] + np.arange(n_v)
                    data.append(JT.ravel())
                    ri.append(np.repeat(rr, JT.shape[1]))
                    ci.append(np.tile(ILAM[id(ks)][i], n_v))

        # d(torque rows)/d tau = -I on actuated rows
        act_rows = (row0[:, None] + 6 + np.arange(n_j)[None, :]).ravel()
        data.append(np.full(N * n_j, -1.0))
        ri.append(act_rows)
        ci.append(IT.ravel())

        # integration rows
        int0 = row0 + n_v
        psi = q[:, 3:6]
        om1 = v1[:, 3:6]
        # d/d q_k: identity + h * d(mrp_rate)/dpsi on the MRP 3x3 block
        ones = np.ones(N * n_q)
        rr = (int0[:, None] + np.arange(n_q)[None, :]).ravel()
        cc = IQ.ravel()
        data.append(ones); ri.append(rr); ci.append(cc)
        Dpsi = h * _mrp_rate_dpsi(psi, om1)                            # (N,3,3)
        rr = (int0[:, None] + 3 + np.repeat(np.arange(3), 3)[None, :]).ravel()
        cc = (IQ[:, 3:6][:, np.tile(np.arange(3), 3)]).ravel()
        data.append(Dpsi.ravel()); ri.append(rr); ci.append(cc)
        # d/d v_{k+1}: h * G(q_k)
        hG = np.full(N * n_q, h)
        rr = (int0[:, None] + np.arange(n_q)[None, :]).ravel()
        cc = IV1.ravel()
        keep = np.tile(np.r_[np.ones(3, bool), np.zeros(3, bool), np.ones(n_j, bool)], N)
        data.append(hG[keep]); ri.append(rr[keep]); ci.append(cc[keep])
        Bm = h * mrp_rate_matrix(psi)                                  # (N,3,3)
        rr = (int0[:, None] + 3 + np.repeat(np.arange(3), 3)[None, :]).ravel()
        cc = (IV1[:, 3:6][:, np.tile(np.arange(3), 3)]).ravel()
        data.append(Bm.ravel()); ri.append(rr); ci.append(cc)
        # d/d q_{k+1} = -I
        rr = (int0[:, None] + np.arange(n_q)[None, :]).ravel()
        data.append(np.full(N * n_q, -1.0)); ri.append(rr); ci.append(IQ1.ravel())

        data = np.concatenate(data)
        ri = np.concatenate([np.asarray(r, dtype=int) for r in ri])
        ci = np.concatenate([np.asarray(c, dtype=int) for c in ci])
        return sp.csr_matrix((data, (ri, ci)), shape=(dim, layout.dim))

    row_blocks, col_blocks = [], []
    for k in range(N):
        rr = np.arange(k * rpk, k * rpk + n_v)
        cols = np.concatenate([IQ[k], IV[k], IV1[k], IT[k], layout.lam(k)])
        row_blocks.append(rr); col_blocks.append(cols)
        rr = np.arange(k * rpk + n_v, (k + 1) * rpk)
        cols = np.concatenate([IQ[k], IV1[k], IQ1[k]])
        row_blocks.append(rr); col_blocks.append(cols)
    pr, pc = _pattern(row_blocks, col_blocks)
    return ConstraintBlock("dynamics_defect", "eq", dim, fn, jac, pr, pc)


# ---------------------------------------------------------------------------
# objectives


@dataclass
class Objective:
    name: str
    fn: callable
    grad: callable


def feasibility_objective(layout: DecisionLayout) -> Objective:
    z = np.zeros(layout.dim)
    return Objective("feasibility", lambda x: 0.0, lambda x: z)


def baseline_objective(layout: DecisionLayout, w_tau: float = 1.0, w_lambda: float = 1e-2) -> Objective:
    """sum_k w_tau |tau_k|^2 + w_lambda |lam_k|^2 (control effort)."""
    tid = np.concatenate([layout.tau(k) for k in range(layout.grid.segments)])
    lid = np.concatenate([layout.lam(k) for k in range(layout.grid.segments)]) \
        if any(len(a) for a in layout.active) else np.zeros(0, int)

    def fn(x):
        return float(w_tau * (x[tid] ** 2).sum() + w_lambda * (x[lid] ** 2).sum())

    def grad(x):
        g = np.zeros(layout.dim)
        g[tid] = 2.0 * w_tau * x[tid]
        g[lid] = 2.0 * w_lambda * x[lid]
        return g

    return Objective("baseline", fn, grad)


def margin_objective(layout: DecisionLayout) -> Objective:
    """-sum_k rho_k: maximize the accumulated disturbance margin."""
    rid = np.array([layout.rho(k) for k in range(layout.grid.segments)], dtype=int)
    g0 = np.zeros(layout.dim)
    g0[rid] = -1.0
    return Objective("margin", lambda x: float(-x[rid].sum()), lambda x: g0)


# ---------------------------------------------------------------------------
# assembled problem


@dataclass
class TranscribedProblem:
    layout: DecisionLayout
    blocks: list
    objective: Objective
    lb: np.ndarray
    ub: np.ndarray
    meta: dict = field(default_factory=dict)

    def eq_blocks(self):
        return [b for b in self.blocks if b.kind == "eq"]

    def ineq_blocks(self):
        return [b for b in self.blocks if b.kind == "ineq"]

    def report(self) -> dict:
        return {
            "variables": self.layout.counts(),
            "dim": self.layout.dim,
            "eq_rows": {b.name: b.dim for b in self.eq_blocks()},
            "ineq_rows": {b.name: b.dim for b in self.ineq_blocks()},
            "nnz_declared": int(sum(len(b.rows) for b in self.blocks)),
        }


def assemble_plan_problem(model: RobotModel, grid: MeshGrid, schedule: ContactSchedule,
                          waypoints=(), objective: str = "baseline", weights=None,
                          boundary_velocity: bool = True, eps_n: float = 1.0,
                          min_support: int = 2,
                          opts: LayoutOptions | None = None) -> TranscribedProblem:
    """Feasibility/effort NLP over states, torques and stance forces."""
    schedule.validate(model, grid, min_support=min_support)
    opts = opts or LayoutOptions()
    layout = build_layout(model, grid, schedule, opts)
    blocks = [
        dynamics_defect_block(layout),
        boundary_velocity_block(layout, boundary_velocity),
        stance_foot_block(layout),
        ee_pose_block(layout, waypoints),
        swing_force_block(layout),
        friction_block(layout, eps_n),
    ]
    w = weights or {}
    if objective == "baseline":
        obj = baseline_objective(layout, w.get("tau", 1.0), w.get("lambda", 1e-2))
    elif objective == "feasibility":
        obj = feasibility_objective(layout)
    else:
        raise ValidationError(f"unknown objective '{objective}' for the planning problem")
    lb, ub = variable_bounds(layout)
    return TranscribedProblem(layout, blocks, obj, lb, ub,
                              meta={"eps_n": eps_n, "boundary_velocity": boundary_velocity,
                                    "waypoints": list(waypoints)})
