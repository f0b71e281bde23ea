import math

import numpy as np
import pytest

from regrasp_ebm import _kernels
from regrasp_ebm.pose import Pose
from regrasp_ebm.world import Grasp, GraspSet, build_scene, load_scene, sample_grasps

CUBE_HALF = 0.03
FACE_NORMALS = {
    "-z": (0.0, 0.0, -1.0), "+z": (0.0, 0.0, 1.0),
    "-x": (-1.0, 0.0, 0.0), "+x": (1.0, 0.0, 0.0),
    "-y": (0.0, -1.0, 0.0), "+y": (0.0, 1.0, 0.0),
}


def cube_scene(half_angle_deg=50.0):
    """Cube centred in a large, fully reachable workspace.

    Only the approach cone ever binds, so a grasp approaching along ``a``
    (object frame) is feasible exactly in placements whose downward face
    normal lies within the half-angle of ``a``.
    """
    h = CUBE_HALF
    verts = np.array([[sx * h, sy * h, sz * h] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    return build_scene("cube", verts, 0.0, (-0.45, 0.45), (0.1, 0.6), (0.0, 0.35, 0.0), 10.0,
                       math.radians(half_angle_deg))


def placement_with_down_face(scene, normal):
    n = np.asarray(normal, float)
    for p in scene.placements:
        if np.allclose(p.pose.rotation @ n, [0.0, 0.0, -1.0], atol=1e-9):
            return p.index
    raise KeyError(normal)


def approach_grasp(direction, standoff=0.05, width=0.5):
    a = np.asarray(direction, float)
    a /= np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    c = np.cross(a, helper)
    c /= np.linalg.norm(c)
    return Grasp(Pose(np.column_stack([a, c, np.cross(a, c)]), -a * standoff), width)


def cube_grasps(*names):
    """Grasps approaching along one face normal ("-z") or bisecting two ("-z/-x")."""
    out = []
    for name in names:
        a = np.sum([FACE_NORMALS[k] for k in name.split("/")], axis=0)
        out.append(approach_grasp(a))
    return GraspSet(out)


def line_scene(family=100, seed=0):
    """Cube under a small reach sphere; every grasp approaches from above, so a
    grasp's feasible region along x is an interval set by its TCP offset d.

    Object at x = -0.3 (init) and x = +0.3 (goal), y on the reach centre.  A
    family of ``family`` grasps (d ~ 0.26) is feasible at init and for
    x < -0.06, a mirrored family at goal and for x > 0.06.  Two bridge grasps
    (d = +-0.15) overlap only on |x| < 0.05, the single connected band.
    """
    h = 0.03
    verts = [(sx * h, sy * h, sz * h) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    scene = build_scene("line", verts, 0.0, (-1.0, 1.0), (-1.0, 1.0), (0.0, 0.35, 0.06), 0.2, math.radians(30.0))
    m = placement_with_down_face(scene, (0, 0, -1))
    r = scene.placement(m).pose.rotation

    def grasp(d, dy=0.0):
        a, c = r.T @ np.array([0.0, 0.0, -1.0]), r.T @ np.array([0.0, 1.0, 0.0])
        return Grasp(Pose(np.column_stack([a, c, np.cross(a, c)]), r.T @ np.array([d, dy, 0.03])), 0.5)

    rng = np.random.default_rng(seed)
    jit = lambda: rng.uniform(-0.004, 0.004)
    grasps = GraspSet([grasp(0.26 + jit(), jit()) for _ in range(family)] + [grasp(0.15), grasp(-0.15)]
                      + [grasp(-0.26 + jit(), jit()) for _ in range(family)])
    return scene, m, grasps


@pytest.fixture(scope="session")
def box5():
    return load_scene("box5")


@pytest.fixture(scope="session")
def box5_grasps(box5):
    return sample_grasps(box5, 200, 0)


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    with _kernels.use_backend(request.param):
        yield request.param
