"""Rotation and rigid-transform utilities.

Orientations are parameterized with modified Rodrigues parameters (MRP)
``psi = tan(phi/4) * axis``.  All functions accept arbitrary leading batch
dimensions (``psi`` of shape ``(..., 3)``) and are polynomial/rational in
their inputs so they evaluate cleanly on complex arrays, which the
derivative machinery relies on.  Do not introduce ``abs``/``norm`` calls
into these kernels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "skew",
    "mrp_to_rotation",
    "rotation_to_mrp",
    "mrp_rate",
    "mrp_angle",
    "mrp_shadow",
    "mrp_normalize",
    "rotx",
    "roty",
    "rotz",
    "rpy_to_rotation",
    "Transform",
    "compose",
    "inverse",
]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b).

    v: (..., 3) -> (..., 3, 3)
    """
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def mrp_to_rotation(psi: np.ndarray) -> np.ndarray:
    """Rotation matrix (frame-to-world, active) for an MRP vector.

        R(psi) = I + (8 [psi]x^2 + 4 (1 - psi.psi) [psi]x) / (1 + psi.psi)^2

    The sign of the linear skew term makes R the transform that takes
    body-frame components to world-frame components; psi = tan(pi/8) e_x
    maps e_y to e_z.  Rotation angle is 4 atan(|psi|).
    """
    psi = np.asarray(psi)
    s = (psi * psi).sum(axis=-1)[..., None, None]
    px = skew(psi)
    px2 = px @ px
    eye = np.zeros(px.shape, dtype=px.dtype)
    eye[..., 0, 0] = eye[..., 1, 1] = eye[..., 2, 2] = 1.0
    return eye + (8.0 * px2 + 4.0 * (1.0 - s) * px) / (1.0 + s) ** 2


def rotation_to_mrp(R: np.ndarray) -> np.ndarray:
    """MRP vector of a rotation matrix, inner set (|psi| <= 1).

    Goes through the unit quaternion q = (w, xyz), w >= 0, with
    psi = xyz / (1 + w).  Branch selection (largest quaternion component)
    uses real parts only, so the function stays smooth under small complex
    perturbations away from the 2*pi singularity.
    """
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    n = Rf.shape[0]
    q = np.zeros((n, 4), dtype=Rf.dtype)
    tr = Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]
    # Candidate squared magnitudes (up to common scale) of w, x, y, z.
    cand = np.stack(
        [
            1.0 + tr,
            1.0 + 2.0 * Rf[:, 0, 0] - tr,
            1.0 + 2.0 * Rf[:, 1, 1] - tr,
            1.0 + 2.0 * Rf[:, 2, 2] - tr,
        ],
        axis=1,
    )
    pick = np.argmax(cand.real, axis=1)
    for i in range(n):
        m = Rf[i]
        k = pick[i]
        t = np.sqrt(cand[i, k])
        if k == 0:
            w = 0.5 * t
            f = 0.25 / w
            q[i] = [w, f * (m[2, 1] - m[1, 2]), f * (m[0, 2] - m[2, 0]), f * (m[1, 0] - m[0, 1])]
        elif k == 1:
            x = 0.5 * t
            f = 0.25 / x
            q[i] = [f * (m[2, 1] - m[1, 2]), x, f * (m[0, 1] + m[1, 0]), f * (m[0, 2] + m[2, 0])]
        elif k == 2:
            y = 0.5 * t
            f = 0.25 / y
            q[i] = [f * (m[0, 2] - m[2, 0]), f * (m[0, 1] + m[1, 0]), y, f * (m[1, 2] + m[2, 1])]
        else:
            z = 0.5 * t
            f = 0.25 / z
            q[i] = [f * (m[1, 0] - m[0, 1]), f * (m[0, 2] + m[2, 0]), f * (m[1, 2] + m[2, 1]), z]
        if q[i, 0].real < 0.0:
            q[i] = -q[i]
    psi = q[:, 1:] / (1.0 + q[:, 0])[:, None]
    return psi.reshape(batch + (3,))


def mrp_rate(psi: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Kinematic differential equation of the MRP.

        psi_dot = 1/4 [ (1 - psi.psi) I + 2 [psi]x + 2 psi psi^T ] omega

    omega is the body-frame angular velocity of the frame whose attitude
    psi tracks.
    """
    psi = np.asarray(psi)
    omega = np.asarray(omega)
    s = (psi * psi).sum(axis=-1)[..., None]
    return 0.25 * (
        (1.0 - s) * omega
        + 2.0 * np.cross(psi, omega)
        + 2.0 * psi * (psi * omega).sum(axis=-1)[..., None]
    )


def mrp_rate_matrix(psi: np.ndarray) -> np.ndarray:
    """B(psi)/4 with psi_dot = B(psi)/4 @ omega (see mrp_rate)."""
    psi = np.asarray(psi)
    s = (psi * psi).sum(axis=-1)[..., None, None]
    eye = np.zeros(psi.shape[:-1] + (3, 3), dtype=psi.dtype)
    eye[..., 0, 0] = eye[..., 1, 1] = eye[..., 2, 2] = 1.0
    outer = psi[..., :, None] * psi[..., None, :]
    return 0.25 * ((1.0 - s) * eye + 2.0 * skew(psi) + 2.0 * outer)


def mrp_angle(psi: np.ndarray) -> np.ndarray:
    """Rotation angle 4 atan(|psi|) in radians."""
    psi = np.asarray(psi)
    return 4.0 * np.arctan(np.sqrt((psi * psi).sum(axis=-1)))


def mrp_shadow(psi: np.ndarray) -> np.ndarray:
    """Shadow-set counterpart -psi / (psi.psi); same physical rotation."""
    psi = np.asarray(psi)
    s = (psi * psi).sum(axis=-1)[..., None]
    return -psi / s


def mrp_normalize(psi: np.ndarray) -> np.ndarray:
    """Switch to the shadow set wherever |psi| > 1 (keeps |psi| <= 1).

    Integration utility only; never applied inside constraint residuals.
    """
    psi = np.asarray(psi)
    s = (psi * psi).sum(axis=-1)
    out = np.array(psi, copy=True)
    big = s > 1.0
    if np.any(big):
        out[big] = -psi[big] / s[big][..., None]
    return out


def rotx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def roty(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rpy_to_rotation(rpy) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw to rotation matrix: Rz(y) Ry(p) Rx(r)."""
    r, p, y = rpy
    return rotz(y) @ roty(p) @ rotx(r)


@dataclass
class Transform:
    """Rigid transform: p_world = rotation @ p_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p)
        return p @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))


def compose(a: Transform, b: Transform) -> Transform:
    """a then b applied to local coordinates: (a*b)(p) = a(b(p))."""
    return Transform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: Transform) -> Transform:
    return Transform(t.rotation.T, -t.rotation.T @ t.translation)
