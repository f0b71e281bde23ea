"""A smooth energy built directly from the oracle's constraint margins.

Useful as a training-free stand-in for the learned model: constructed test
scenes get energies that track the ground truth closely, and it exposes the
same table interface the planner uses (``pose_energies``,
``pose_energies_jac``, ``pose_energies_vjp``).

    E(T, g) = sum_c softplus(-m_c / sigma) - offset

with margins m_c (metres) for reach, table clearance, approach cone and the
four workspace walls.  The approach margin is scaled by ``angle_scale``.
"""

from __future__ import annotations

import math

import numpy as np

from .energy import POSE_DIM
from .world import GraspSet, SyntheticScene


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class OracleEnergy:
    include_width = False

    def __init__(self, scene: SyntheticScene, sigma: float = 0.01, offset: float = 1.0, angle_scale: float = 0.1):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.scene = scene
        self.sigma = float(sigma)
        self.offset = float(offset)
        self.angle_scale = float(angle_scale)

    def _parts(self, pose_enc, grasps: GraspSet, with_grad: bool):
        enc = np.atleast_2d(np.asarray(pose_enc, dtype=float))
        if enc.shape[1] != POSE_DIM:
            raise ValueError("encoding dimension mismatch")
        t, c0, c1 = enc[:, None, 0:3], enc[:, None, 3:6], enc[:, None, 6:9]
        c2 = np.cross(c0, c1)
        p = grasps.positions[None]
        a = grasps.approaches[None]
        tcp = t + p[..., 0:1] * c0 + p[..., 1:2] * c1 + p[..., 2:3] * c2
        aw_z = a[..., 0] * c0[..., 2] + a[..., 1] * c1[..., 2] + a[..., 2] * c2[..., 2]
        sc = self.scene
        r = sc.reach_radius
        d = tcp - sc.reach_center
        m = [
            (r * r - np.sum(d * d, axis=-1)) / (2 * r),
            tcp[..., 2] - (sc.table_height + sc.clearance),
            self.angle_scale * (-aw_z - math.cos(sc.approach_half_angle)),
            tcp[..., 0] - sc.x_bounds[0],
            sc.x_bounds[1] - tcp[..., 0],
            tcp[..., 1] - sc.y_bounds[0],
            sc.y_bounds[1] - tcp[..., 1],
        ]
        s = self.sigma
        energy = sum(_softplus(-mi / s) for mi in m) - self.offset
        if not with_grad:
            return energy, None
        k = [-_sigmoid(-mi / s) / s for mi in m]  # dE/dm
        # dE/dtcp and dE/d(approach_world)_z
        v = -(k[0][..., None] * d / r)
        v[..., 2] += k[1]
        v[..., 0] += k[3] - k[4]
        v[..., 1] += k[5] - k[6]
        wz = -self.angle_scale * k[2]
        ez = np.zeros(3)
        ez[2] = 1.0
        u = wz[..., None] * ez  # gradient w.r.t. world approach vector
        g = np.empty(energy.shape + (POSE_DIM,))
        g[..., 0:3] = v
        # tcp = t + p0 c0 + p1 c1 + p2 (c0 x c1); likewise the approach with a
        g[..., 3:6] = (p[..., 0:1] * v + p[..., 2:3] * np.cross(c1, v)
                       + a[..., 0:1] * u + a[..., 2:3] * np.cross(c1, u))
        g[..., 6:9] = (p[..., 1:2] * v + p[..., 2:3] * np.cross(v, c0)
                       + a[..., 1:2] * u + a[..., 2:3] * np.cross(u, c0))
        return energy, g

    def pose_energies(self, pose_enc, grasps, dtype=np.float64, **_):
        return self._parts(pose_enc, grasps, False)[0]

    def pose_energies_jac(self, pose_enc, grasps, dtype=np.float64, **_):
        return self._parts(pose_enc, grasps, True)

    def pose_energies_vjp(self, pose_enc, grasps, weights, dtype=np.float64, **_):
        e, g = self._parts(pose_enc, grasps, True)
        return e, np.einsum("pk,pkd->pd", np.asarray(weights, dtype=float), g)
