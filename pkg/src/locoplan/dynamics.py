"""Kinematics and rigid-body dynamics on the joint tree.

Conventions (fixed across the package):
  q = [r_base(3), psi_base MRP(3), q_joints(n_j)]
  v = [world-frame base linear velocity(3), body-frame base angular
       velocity(3), joint rates(n_j)]
  gravity 9.81 m/s^2 along -z.

All kernels take a leading batch axis (shape (B, ...)) and are written
dtype-generically: evaluating on complex inputs yields exact directional
derivatives via the complex-step trick, so no abs/norm/branching on
perturbed quantities is allowed here.

The inverse dynamics is a world-frame Newton-Euler sweep; the mass matrix
is assembled separately by a composite-rigid-body pass and serves as an
independent oracle (plus the v_{k+1} defect derivative), never as the
inverse-dynamics path itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RobotModel
from .spatial import Transform, mrp_rate, mrp_to_rotation, skew

GRAVITY = 9.81
_GVEC = np.array([0.0, 0.0, -GRAVITY])

KIND_FLOATING, KIND_REVOLUTE, KIND_PRISMATIC = 0, 1, 2
_KIND_CODE = {"floating": KIND_FLOATING, "revolute": KIND_REVOLUTE, "prismatic": KIND_PRISMATIC}


@dataclass
class Tree:
    """Flattened joint tree; body i is the child link of joints[i]."""

    nb: int
    parent: np.ndarray        # (nb,) body index of parent, -1 for base
    kind: np.ndarray          # (nb,) joint kind code
    axis: np.ndarray          # (nb, 3) joint-frame axis
    X_R: np.ndarray           # (nb, 3, 3) parent link -> joint frame rotation
    X_p: np.ndarray           # (nb, 3) parent link -> joint frame translation
    mass: np.ndarray          # (nb,)
    com: np.ndarray           # (nb, 3) link frame
    I_com: np.ndarray         # (nb, 3, 3) about the COM, link frame
    qi: np.ndarray            # (nb,) index into q/v for this joint's scalar (base: -1)
    path: list                # per body: ancestor body indices from base-side, excluding body 0
    link_body: dict           # link name -> body index
    contact_body: np.ndarray  # (n_c,)
    contact_offset: np.ndarray  # (n_c, 3)
    ee_body: int
    ee_offset: np.ndarray
    n_v: int
    n_j: int


def tree(model: RobotModel) -> Tree:
    cached = model.__dict__.get("_tree")
    if cached is not None:
        return cached
    joints = model.joints
    nb = len(joints)
    link_body = {j.child: i for i, j in enumerate(joints)}
    parent = np.empty(nb, dtype=int)
    kind = np.empty(nb, dtype=int)
    axis = np.zeros((nb, 3))
    X_R = np.zeros((nb, 3, 3))
    X_p = np.zeros((nb, 3))
    qi = np.full(nb, -1, dtype=int)
    a = 0
    for i, j in enumerate(joints):
        kind[i] = _KIND_CODE[j.kind]
        axis[i] = j.axis
        X_R[i] = j.origin.rotation
        X_p[i] = j.origin.translation
        parent[i] = -1 if j.kind == "floating" else link_body[j.parent]
        if j.kind != "floating":
            qi[i] = 6 + a
            a += 1
    mass = np.empty(nb)
    com = np.zeros((nb, 3))
    I_com = np.zeros((nb, 3, 3))
    for i, j in enumerate(joints):
        li = model.link(j.child).inertia
        mass[i] = li.mass
        com[i] = li.com
        I_com[i] = li.com_inertia()
    path = []
    for i in range(nb):
        chain = []
        k = i
        while k >= 0:
            chain.append(k)
            k = parent[k]
        path.append(chain[::-1])
    t = Tree(
        nb=nb, parent=parent, kind=kind, axis=axis, X_R=X_R, X_p=X_p,
        mass=mass, com=com, I_com=I_com, qi=qi, path=path, link_body=link_body,
        contact_body=np.array([link_body[c.link] for c in model.contacts], dtype=int),
        contact_offset=np.array([c.offset for c in model.contacts]).reshape(-1, 3),
        ee_body=link_body[model.end_effector.link],
        ee_offset=np.asarray(model.end_effector.offset),
        n_v=model.n_v, n_j=model.n_j,
    )
    model.__dict__["_tree"] = t
    return t


def _axis_rotation(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues formula, batched: axis (3,), angle (B,) -> (B, 3, 3)."""
    ax = skew(axis)
    ax2 = ax @ ax
    c = np.cos(angle)[..., None, None]
    s = np.sin(angle)[..., None, None]
    return np.eye(3) + s * ax + (1.0 - c) * ax2


def fk_arrays(t: Tree, q: np.ndarray):
    """World pose of every body plus world joint axes/anchors.

    q: (B, n_q).  Returns R (B,nb,3,3), p (B,nb,3), z (B,nb,3), pj (B,nb,3)
    where z/pj are the world axis and anchor of body i's joint (base entries
    are zero; the base has no scalar joint).
    """
    q = np.asarray(q)
    B = q.shape[0]
    dt = q.dtype
    R = np.zeros((B, t.nb, 3, 3), dtype=dt)
    p = np.zeros((B, t.nb, 3), dtype=dt)
    z = np.zeros((B, t.nb, 3), dtype=dt)
    pj = np.zeros((B, t.nb, 3), dtype=dt)
    R[:, 0] = mrp_to_rotation(q[:, 3:6])
    p[:, 0] = q[:, 0:3]
    for i in range(1, t.nb):
        pa = t.parent[i]
        Rj0 = R[:, pa] @ t.X_R[i]
        anchor = p[:, pa] + (R[:, pa] @ t.X_p[i])
        zi = Rj0 @ t.axis[i]
        z[:, i] = zi
        pj[:, i] = anchor
        s = q[:, t.qi[i]]
        if t.kind[i] == KIND_REVOLUTE:
            R[:, i] = Rj0 @ _axis_rotation(t.axis[i], s)
            p[:, i] = anchor
        else:  # prismatic
            R[:, i] = Rj0
            p[:, i] = anchor + zi * s[:, None]
    return R, p, z, pj


def _body_point(t: Tree, R, p, body: int, offset) -> np.ndarray:
    return p[:, body] + R[:, body] @ np.asarray(offset)


def contact_points_batch(t: Tree, R, p) -> np.ndarray:
    """(B, n_c, 3) world positions of the contact points."""
    n_c = len(t.contact_body)
    out = np.zeros((R.shape[0], n_c, 3), dtype=R.dtype)
    for c in range(n_c):
        out[:, c] = _body_point(t, R, p, t.contact_body[c], t.contact_offset[c])
    return out


def _point_jacobian_from(t: Tree, R, p, z, pj, body: int, x: np.ndarray) -> np.ndarray:
    """World linear point Jacobian (B, 3, n_v) of point x (B,3) on body."""
    B = R.shape[0]
    J = np.zeros((B, 3, t.n_v), dtype=R.dtype)
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, :, 3:6] = -skew(x - p[:, 0]) @ R[:, 0]
    for i in t.path[body][1:]:
        col = t.qi[i]
        if t.kind[i] == KIND_REVOLUTE:
            J[:, :, col] = np.cross(z[:, i], x - pj[:, i])
        else:
            J[:, :, col] = z[:, i]
    return J


def _angular_jacobian_from(t: Tree, R, z, body: int) -> np.ndarray:
    B = R.shape[0]
    J = np.zeros((B, 3, t.n_v), dtype=R.dtype)
    J[:, :, 3:6] = R[:, 0]
    for i in t.path[body][1:]:
        if t.kind[i] == KIND_REVOLUTE:
            J[:, :, t.qi[i]] = z[:, i]
    return J


def support_jacobian_batch(t: Tree, R, p, z, pj, active=None) -> np.ndarray:
    """Stacked contact-point Jacobians (B, 3*len(active), n_v), contact order."""
    if active is None:
        active = range(len(t.contact_body))
    active = list(active)
    B = R.shape[0]
    J = np.zeros((B, 3 * len(active), n_v := t.n_v), dtype=R.dtype)
    for row, c in enumerate(active):
        body = t.contact_body[c]
        x = _body_point(t, R, p, body, t.contact_offset[c])
        J[:, 3 * row:3 * row + 3] = _point_jacobian_from(t, R, p, z, pj, body, x)
    return J


def ee_jacobian_batch(t: Tree, R, p, z, pj) -> np.ndarray:
    x = _body_point(t, R, p, t.ee_body, t.ee_offset)
    return _point_jacobian_from(t, R, p, z, pj, t.ee_body, x)


def rnea_batch(t: Tree, q, v, a, lam=None, active=None, f_ext=None, gravity=True):
    """Inverse dynamics, batched: generalized force g with

        g = M(q) a + h(q, v) - J_s^T lam - J_e^T f_ext

    computed by a world-frame Newton-Euler sweep (no mass matrix formed).
    Rows 0:6 are the floating-base residual (world force; body-frame moment
    about the base origin), rows 6: the actuated joint torques.
    lam: (B, 3*len(active)) stacked contact forces, world frame.
    f_ext: (B, 3) world force applied at the end-effector.
    """
    q, v, a = np.asarray(q), np.asarray(v), np.asarray(a)
    B = q.shape[0]
    dt = np.result_type(q.dtype, v.dtype, a.dtype)
    R, p, z, pj = fk_arrays(t, q)

    om = np.zeros((B, t.nb, 3), dtype=dt)
    vel = np.zeros((B, t.nb, 3), dtype=dt)
    omd = np.zeros((B, t.nb, 3), dtype=dt)
    acc = np.zeros((B, t.nb, 3), dtype=dt)
    om[:, 0] = np.einsum("bij,bj->bi", R[:, 0], v[:, 3:6])
    vel[:, 0] = v[:, 0:3]
    omd[:, 0] = np.einsum("bij,bj->bi", R[:, 0], a[:, 3:6])
    acc[:, 0] = a[:, 0:3]
    if gravity:
        acc[:, 0] = acc[:, 0] - _GVEC
    for i in range(1, t.nb):
        pa = t.parent[i]
        d = p[:, i] - p[:, pa]
        wpa = om[:, pa]
        vel[:, i] = vel[:, pa] + np.cross(wpa, d)
        acc[:, i] = acc[:, pa] + np.cross(omd[:, pa], d) + np.cross(wpa, np.cross(wpa, d))
        s_dot = v[:, t.qi[i], None]
        s_dd = a[:, t.qi[i], None]
        if t.kind[i] == KIND_REVOLUTE:
            om[:, i] = wpa + z[:, i] * s_dot
            omd[:, i] = omd[:, pa] + z[:, i] * s_dd + np.cross(wpa, z[:, i]) * s_dot
        else:
            om[:, i] = wpa
            omd[:, i] = omd[:, pa]
            slide = z[:, i] * s_dot
            vel[:, i] = vel[:, i] + slide
            acc[:, i] = acc[:, i] + 2.0 * np.cross(wpa, slide) + z[:, i] * s_dd

    # net inertial wrench per body (force at COM, moment about COM)
    cw = np.einsum("bnij,nj->bni", R, t.com)  # COM offset, world
    a_com = acc + np.cross(omd, cw) + np.cross(om, np.cross(om, cw))
    F = t.mass[:, None] * a_com
    Iw = np.einsum("bnij,njk,bnlk->bnil", R, t.I_com, R)
    N = np.einsum("bnij,bnj->bni", Iw, omd) + np.cross(om, np.einsum("bnij,bnj->bni", Iw, om))

    f = F.copy()
    n = N + np.cross(cw, F)
    for i in range(t.nb - 1, 0, -1):
        pa = t.parent[i]
        f[:, pa] += f[:, i]
        n[:, pa] += n[:, i] + np.cross(p[:, i] - p[:, pa], f[:, i])

    g = np.zeros((B, t.n_v), dtype=dt)
    g[:, 0:3] = f[:, 0]
    g[:, 3:6] = np.einsum("bji,bj->bi", R[:, 0], n[:, 0])
    for i in range(1, t.nb):
        if t.kind[i] == KIND_REVOLUTE:
            g[:, t.qi[i]] = (z[:, i] * n[:, i]).sum(axis=-1)
        else:
            g[:, t.qi[i]] = (z[:, i] * f[:, i]).sum(axis=-1)

    if lam is not None and np.size(lam):
        Js = support_jacobian_batch(t, R, p, z, pj, active)
        g = g - np.einsum("brv,br->bv", Js, np.asarray(lam))
    if f_ext is not None:
        Je = ee_jacobian_batch(t, R, p, z, pj)
        g = g - np.einsum("brv,br->bv", Je, np.asarray(f_ext))
    return g


def mass_matrix_batch(t: Tree, q) -> np.ndarray:
    """Joint-space mass matrix by a composite-rigid-body pass.

    Spatial quantities are referenced at the world origin in (angular,
    linear) block order; composite inertias are summed up the tree and
    projected on the joint motion vectors. Independent of rnea_batch.
    """
    q = np.asarray(q)
    B = q.shape[0]
    dt = q.dtype
    R, p, z, pj = fk_arrays(t, q)

    cw = p + np.einsum("bnij,nj->bni", R, t.com)  # world COM, absolute
    Icw = np.einsum("bnij,njk,bnlk->bnil", R, t.I_com, R)
    cx = skew(cw)
    IO = np.zeros((B, t.nb, 6, 6), dtype=dt)
    IO[:, :, :3, :3] = Icw - t.mass[:, None, None] * (cx @ cx)
    IO[:, :, :3, 3:] = t.mass[:, None, None] * cx
    IO[:, :, 3:, :3] = -t.mass[:, None, None] * cx
    IO[:, :, 3:, 3:] = t.mass[None, :, None, None] * np.eye(3)

    Ic = IO.copy()
    for i in range(t.nb - 1, 0, -1):
        Ic[:, t.parent[i]] += Ic[:, i]

    # motion vectors: base 6 columns then one per scalar joint
    S = np.zeros((B, t.n_v, 6), dtype=dt)
    r = p[:, 0]
    for k in range(3):
        S[:, k, 3 + k] = 1.0  # world translation
    for k in range(3):
        axw = R[:, 0, :, k]
        S[:, 3 + k, :3] = axw
        S[:, 3 + k, 3:] = np.cross(r, axw)
    for i in range(1, t.nb):
        col = t.qi[i]
        if t.kind[i] == KIND_REVOLUTE:
            S[:, col, :3] = z[:, i]
            S[:, col, 3:] = np.cross(pj[:, i], z[:, i])
        else:
            S[:, col, 3:] = z[:, i]

    dof_bodies = [0] * 6 + [i for i in range(1, t.nb)]
    dof_index = list(range(6)) + [int(t.qi[i]) for i in range(1, t.nb)]
    body_dofs = {}
    for d, (b, col) in enumerate(zip(dof_bodies, dof_index)):
        body_dofs.setdefault(b, []).append(col)

    M = np.zeros((B, t.n_v, t.n_v), dtype=dt)
    for i in range(t.nb - 1, -1, -1):
        for ci in body_dofs.get(i, []):
            Fi = np.einsum("bxy,by->bx", Ic[:, i], S[:, ci])
            chain = t.path[i]
            for j in chain:
                for cj in body_dofs.get(j, []):
                    val = (Fi * S[:, cj]).sum(axis=-1)
                    M[:, ci, cj] = val
                    M[:, cj, ci] = val
    return M


# ---------------------------------------------------------------------------
# single-state convenience API


@dataclass
class FkResult:
    tree: Tree
    R: np.ndarray             # (nb, 3, 3)
    p: np.ndarray             # (nb, 3)
    contacts: np.ndarray      # (n_c, 3)
    ee: Transform

    def link_pose(self, name: str) -> Transform:
        b = self.tree.link_body[name]
        return Transform(self.R[b], self.p[b])


def fk(model: RobotModel, q: np.ndarray) -> FkResult:
    """World pose of every link, contact point, and the end-effector."""
    t = tree(model)
    R, p, z, pj = fk_arrays(t, np.asarray(q)[None])
    cp = contact_points_batch(t, R, p)[0]
    eb = t.ee_body
    ee_p = (p[:, eb] + R[:, eb] @ t.ee_offset)[0]
    return FkResult(t, R[0], p[0], cp, Transform(R[0, eb], ee_p))


def point_jacobian(model: RobotModel, q: np.ndarray, link: str, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(3, n_v): world linear velocity of the point = J @ v."""
    t = tree(model)
    R, p, z, pj = fk_arrays(t, np.asarray(q)[None])
    b = t.link_body[link]
    x = _body_point(t, R, p, b, np.asarray(offset, dtype=float))
    return _point_jacobian_from(t, R, p, z, pj, b, x)[0]


def frame_jacobian(model: RobotModel, q: np.ndarray, link: str, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(6, n_v): rows 0:3 world linear at the offset point, rows 3:6 world angular."""
    t = tree(model)
    R, p, z, pj = fk_arrays(t, np.asarray(q)[None])
    b = t.link_body[link]
    x = _body_point(t, R, p, b, np.asarray(offset, dtype=float))
    J = np.zeros((6, t.n_v))
    J[0:3] = _point_jacobian_from(t, R, p, z, pj, b, x)[0]
    J[3:6] = _angular_jacobian_from(t, R, z, b)[0]
    return J


def support_jacobian(model: RobotModel, q: np.ndarray, active=None) -> np.ndarray:
    """(3*n_active, n_v) stacked contact-point Jacobians (J_s)."""
    t = tree(model)
    R, p, z, pj = fk_arrays(t, np.asarray(q)[None])
    return support_jacobian_batch(t, R, p, z, pj, active)[0]


def ee_jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """(3, n_v) end-effector linear Jacobian (J_e)."""
    t = tree(model)
    R, p, z, pj = fk_arrays(t, np.asarray(q)[None])
    return ee_jacobian_batch(t, R, p, z, pj)[0]


def inverse_dynamics(model: RobotModel, q, v, vdot, lam=None, active=None, f_ext=None) -> np.ndarray:
    """Generalized-force residual g = M vdot + h - J_s^T lam - J_e^T f_ext.

    Rows 0:6: floating-base force/moment residual (must vanish on a
    physically consistent motion); rows 6:: required actuated torques.
    """
    t = tree(model)
    lam_b = None if lam is None else np.asarray(lam)[None]
    f_b = None if f_ext is None else np.asarray(f_ext)[None]
    return rnea_batch(t, np.asarray(q)[None], np.asarray(v)[None], np.asarray(vdot)[None],
                      lam_b, active, f_b)[0]


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    return mass_matrix_batch(tree(model), np.asarray(q)[None])[0]


def bias(model: RobotModel, q, v) -> np.ndarray:
    """h(q, v): Coriolis, centrifugal and gravity generalized forces."""
    t = tree(model)
    q = np.asarray(q)[None]
    return rnea_batch(t, q, np.asarray(v)[None], np.zeros_like(q))[0]


def configuration_rate(q_ref, v) -> np.ndarray:
    """q_dot for velocity v with the MRP rate map evaluated at q_ref.

    Batched: q_ref (B, n_q), v (B, n_v) -> (B, n_q).  Base position and
    joint blocks are the identity map under the package velocity
    convention.
    """
    q_ref = np.asarray(q_ref)
    v = np.asarray(v)
    out = np.array(v, dtype=np.result_type(q_ref.dtype, v.dtype), copy=True)
    out[..., 3:6] = mrp_rate(q_ref[..., 3:6], v[..., 3:6])
    return out
