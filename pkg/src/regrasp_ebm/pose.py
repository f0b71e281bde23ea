"""Rigid transforms, planar perturbations of stable placements, pose encodings.

Poses are stored as a rotation matrix plus translation.  The network sees a
9-vector: translation followed by the first two rotation columns.  Batched
variants operate on stacked arrays and are what the planner uses; the scalar
functions exist for clarity and for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
ORTHO_TOL = 1e-9


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # antiparallel: rotate by pi about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via Gram-Schmidt on its first two columns."""
    c0 = r[:, 0] / np.linalg.norm(r[:, 0])
    c1 = r[:, 1] - (c0 @ r[:, 1]) * c0
    c1 /= np.linalg.norm(c1)
    return np.column_stack([c0, c1, np.cross(c0, c1)])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) >= ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform_point(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def to_row12(self) -> list[float]:
        """Row-major 3x4 ``[R | t]`` as 12 floats."""
        return [float(v) for v in np.hstack([self.rotation, self.translation[:, None]]).ravel()]

    @classmethod
    def from_row12(cls, values: Sequence[float], repair: bool = True) -> "Pose":
        arr = np.asarray(values, dtype=float)
        if arr.shape != (12,):
            raise ValueError(f"expected 12 numbers, got {arr.size}")
        m = arr.reshape(3, 4)
        r = orthonormalize(m[:, :3]) if repair else m[:, :3]
        return cls(r, m[:, 3])

    def allclose(self, other: "Pose", rtol_r: float = 1e-9, atol_t: float = 1e-9) -> bool:
        return (np.max(np.abs(self.rotation - other.rotation)) <= rtol_r
                and np.max(np.abs(self.translation - other.translation)) <= atol_t)

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 4).tolist()})"


def wrap_angle(theta: float) -> float:
    """Map an angle onto [0, 2*pi)."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    w = math.fmod(theta, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    # fmod of a tiny negative can round up to exactly 2*pi
    if w >= TWO_PI:
        w = 0.0
    return w


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    w = np.mod(theta, TWO_PI)
    w[w >= TWO_PI] = 0.0
    return w


@dataclass(frozen=True)
class PlanarParams:
    """Planar offset ``[x, y, theta]`` applied in the world frame."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "PlanarParams":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def normalized(self) -> "PlanarParams":
        return PlanarParams(self.x, self.y, wrap_angle(self.theta))

    def clamped(self, x_bounds: tuple[float, float], y_bounds: tuple[float, float]) -> "PlanarParams":
        return PlanarParams(min(max(self.x, x_bounds[0]), x_bounds[1]),
                            min(max(self.y, y_bounds[0]), y_bounds[1]),
                            self.theta)


@dataclass(frozen=True)
class StablePlacement:
    index: int  # 1-based, contiguous within a scene
    pose: Pose

    @property
    def resting_height(self) -> float:
        return float(self.pose.translation[2])


def delta_transform(xi: PlanarParams) -> Pose:
    return Pose(rot_z(xi.theta), [xi.x, xi.y, 0.0])


def compose_intermediate_pose(placement: StablePlacement, xi: PlanarParams) -> Pose:
    """Left-multiply the placement's canonical pose by the planar offset."""
    return delta_transform(xi) @ placement.pose


def encode_pose(pose: Pose) -> np.ndarray:
    r = pose.rotation
    return np.concatenate([pose.translation, r[:, 0], r[:, 1]])


def decode_pose(enc: np.ndarray) -> Pose:
    enc = np.asarray(enc, dtype=float)
    if enc.shape != (9,):
        raise ValueError("pose encoding must have 9 entries")
    return Pose(orthonormalize(np.column_stack([enc[3:6], enc[6:9], np.zeros(3)])), enc[:3])


def compose_jacobian(placement: StablePlacement, xi: PlanarParams) -> np.ndarray:
    """d encode_pose(compose_intermediate_pose(placement, xi)) / d[x, y, theta], shape (9, 3)."""
    r_s = placement.pose.rotation
    t_s = placement.pose.translation
    return planar_jacobian_batch(r_s[None], t_s[None], xi.as_array()[None])[0]


# --- batched forms -------------------------------------------------------------

def planar_encoding_batch(r_s: np.ndarray, t_s: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Encodings of ``dT(xi) @ T_s`` for stacked placements.

    ``r_s`` (..., 3, 3), ``t_s`` (..., 3), ``xi`` (..., 3) -> (..., 9)
    """
    c = np.cos(xi[..., 2])
    s = np.sin(xi[..., 2])
    out = np.empty(xi.shape[:-1] + (9,), dtype=float)
    blocks = (t_s, r_s[..., :, 0], r_s[..., :, 1])
    for b, v in enumerate(blocks):
        out[..., 3 * b] = c * v[..., 0] - s * v[..., 1]
        out[..., 3 * b + 1] = s * v[..., 0] + c * v[..., 1]
        out[..., 3 * b + 2] = v[..., 2]
    out[..., 0] += xi[..., 0]
    out[..., 1] += xi[..., 1]
    return out


def planar_jacobian_batch(r_s: np.ndarray, t_s: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`planar_encoding_batch` w.r.t. xi, shape (..., 9, 3)."""
    c = np.cos(xi[..., 2])
    s = np.sin(xi[..., 2])
    jac = np.zeros(xi.shape[:-1] + (9, 3), dtype=float)
    jac[..., 0, 0] = 1.0
    jac[..., 1, 1] = 1.0
    for b, v in enumerate((t_s, r_s[..., :, 0], r_s[..., :, 1])):
        # d/dtheta (Rz v) = e_z x (Rz v)
        rx = c * v[..., 0] - s * v[..., 1]
        ry = s * v[..., 0] + c * v[..., 1]
        jac[..., 3 * b, 2] = -ry
        jac[..., 3 * b + 1, 2] = rx
    return jac


def planar_poses_batch(r_s: np.ndarray, t_s: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotations (..., 3, 3) and translations (..., 3) of ``dT(xi) @ T_s``."""
    c = np.cos(xi[..., 2])
    s = np.sin(xi[..., 2])
    rz = np.zeros(xi.shape[:-1] + (3, 3))
    rz[..., 0, 0] = c
    rz[..., 0, 1] = -s
    rz[..., 1, 0] = s
    rz[..., 1, 1] = c
    rz[..., 2, 2] = 1.0
    rot = rz @ r_s
    trans = (rz @ t_s[..., None])[..., 0]
    trans[..., 0] += xi[..., 0]
    trans[..., 1] += xi[..., 1]
    return rot, trans


def encode_rt_batch(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    return np.concatenate([trans, rot[..., :, 0], rot[..., :, 1]], axis=-1)
