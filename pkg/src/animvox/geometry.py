"""Fundamental math: rigid transforms, pinhole cameras, rays, and the real
spherical-harmonics basis.

Conventions (fixed once, used everywhere):

* Quaternions are ``(w, x, y, z)``, unit norm.
* ``Camera`` stores the **world-to-camera** transform; camera space is the
  usual pinhole frame (x right, y down, z forward into the scene).
* Continuous image coordinates ``u`` run over ``[0, W)``; pixel column ``i``
  covers ``[i, i+1)`` with its center at ``i + 0.5``. Public pixel arguments
  and results use the *index* convention, i.e. ``px = u - 0.5`` so that the
  center of pixel ``(i, j)`` is exactly ``px = (i, j)``.
* SH basis ordering is ``h = l*(l+1) + m`` with the all-positive Cartesian
  polynomial forms (the classic graphics table), degree up to 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

UNIT_TOL = 1e-6


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ContractViolation("zero quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) / n * axis])


def quat_from_euler_xyz(angles) -> np.ndarray:
    """Intrinsic rotations applied in X, then Y, then Z order: R = Rz Ry Rx."""
    rx, ry, rz = (float(a) for a in angles)
    qx = quat_from_axis_angle([1, 0, 0], rx)
    qy = quat_from_axis_angle([0, 1, 0], ry)
    qz = quat_from_axis_angle([0, 0, 1], rz)
    return quat_mul(qz, quat_mul(qy, qx))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion) followed by translation: y = R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
            raise ContractViolation(f"quaternion norm {np.linalg.norm(q):.3e} != 1")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(quat_from_matrix(m[:3, :3]), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        q = quat_normalize(quat_mul(self.rotation, other.rotation))
        t = quat_rotate(self.rotation, other.translation) + self.translation
        return RigidTransform(q, t)

    def invert(self) -> "RigidTransform":
        qi = quat_conj(self.rotation)
        return RigidTransform(qi, -quat_rotate(qi, self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ quat_to_matrix(self.rotation).T + self.translation

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_to_camera.invert().translation

    def project(self, points_world: np.ndarray):
        """Project world points to pixel-index coordinates.

        Returns ``(px, z)`` where ``px[..., 0:2] = (u - 0.5, v - 0.5)`` and
        ``z`` is the camera-space depth (positive in front of the camera).
        """
        p = self.world_to_camera.apply(np.atleast_2d(points_world))
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        px = np.stack([u - 0.5, v - 0.5], axis=-1)
        return px, z


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise ContractViolation(f"ray direction norm {np.linalg.norm(d):.3e} != 1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def ray_from_pixel(camera: Camera, px) -> Ray:
    """Back-project the center of pixel ``px = (column, row)`` to a world ray."""
    u = float(px[0]) + 0.5
    v = float(px[1]) + 0.5
    if not (0.0 <= u <= camera.width and 0.0 <= v <= camera.height):
        raise ContractViolation(f"pixel {px} outside {camera.width}x{camera.height} image")
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    cam_to_world = camera.world_to_camera.invert()
    d_world = cam_to_world.rotation_matrix() @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(cam_to_world.translation, d_world)


def rays_for_camera(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``ray_from_pixel`` over the full image.

    Returns ``(origins, directions)`` with shape (H*W, 3), row-major pixel
    order (row ``v`` then column ``u``).
    """
    u = np.arange(camera.width) + 0.5
    v = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [
            (uu - camera.cx) / camera.fx,
            (vv - camera.cy) / camera.fy,
            np.ones_like(uu),
        ],
        axis=-1,
    ).reshape(-1, 3)
    cam_to_world = camera.world_to_camera.invert()
    d_world = d_cam @ cam_to_world.rotation_matrix().T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam_to_world.translation, d_world.shape).copy()
    return origins, d_world


# ---------------------------------------------------------------------------
# real spherical harmonics, degree <= 4, ordering h = l*(l+1) + m

MAX_SH_DEGREE = 4

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
       1.0925484305920792, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 0.4570457994644658, 1.445305721320277,
       0.5900435899266435)
_C4 = (2.5033429417967046, 1.7701307697799304, 0.9461746957575601,
       0.6690465435572892, 0.10578554691520431, 0.6690465435572892,
       0.47308734787878004, 1.7701307697799304, 0.6258357354491761)


def sh_basis_count(degree: int) -> int:
    return (degree + 1) * (degree + 1)


def sh_basis(direction, degree: int) -> np.ndarray:
    """Real SH basis values for one unit direction; see module docstring."""
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
        raise ContractViolation(f"direction norm {np.linalg.norm(d):.3e} != 1")
    if not (0 <= degree <= MAX_SH_DEGREE):
        raise ContractViolation(f"SH degree {degree} outside [0, {MAX_SH_DEGREE}]")
    return sh_basis_many(d[None, :], degree)[0]


def sh_basis_many(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Vectorized SH basis: (N, 3) unit directions -> (N, (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    out = np.empty((n, sh_basis_count(degree)))
    out[:, 0] = _C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = _C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = _C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _C2[0] * x * y
        out[:, 5] = _C2[1] * y * z
        out[:, 6] = _C2[2] * (3.0 * zz - 1.0)
        out[:, 7] = _C2[3] * x * z
        out[:, 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = _C3[1] * x * y * z
        out[:, 11] = _C3[2] * y * (5.0 * zz - 1.0)
        out[:, 12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[:, 13] = _C3[4] * x * (5.0 * zz - 1.0)
        out[:, 14] = _C3[5] * z * (xx - yy)
        out[:, 15] = _C3[6] * x * (xx - 3.0 * yy)
    if degree >= 4:
        out[:, 16] = _C4[0] * x * y * (xx - yy)
        out[:, 17] = _C4[1] * y * z * (3.0 * xx - yy)
        out[:, 18] = _C4[2] * x * y * (7.0 * zz - 1.0)
        out[:, 19] = _C4[3] * y * z * (7.0 * zz - 3.0)
        out[:, 20] = _C4[4] * (zz * (35.0 * zz - 30.0) + 3.0)
        out[:, 21] = _C4[5] * x * z * (7.0 * zz - 3.0)
        out[:, 22] = _C4[6] * (xx - yy) * (7.0 * zz - 1.0)
        out[:, 23] = _C4[7] * x * z * (xx - 3.0 * yy)
        out[:, 24] = _C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))
    return out
