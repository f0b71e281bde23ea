"""Synthetic tabletop scenes and the analytic grasp-feasibility oracle.

A grasp is feasible under an object pose when the world-frame end effector

(a) has its TCP within ``reach_radius`` of ``reach_center``,
(b) has its TCP strictly above ``table_height + clearance``,
(c) approaches within ``approach_half_angle`` of world -z, and
(d) has its TCP (x, y) inside the workspace bounds.

Ground truth for planning comes from an exhaustive SE(2) grid over all stable
placements; minimum step counts use a breadth-first search carried out in
grasp space (a pose is adjacent to a frontier iff its feasible grasp set meets
the union of the frontier's feasible sets).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import ConvexHull

from . import _kernels
from .pose import (Pose, PlanarParams, StablePlacement, planar_poses_batch, rotation_between,
                   encode_pose, TWO_PI)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TABLE_CLEARANCE = 0.005
PRESETS = ("box5", "prism7", "peg2")


# --- geometry -----------------------------------------------------------------

def polygon_from_normals(normal_angles_deg: Sequence[float], support: Sequence[float]) -> np.ndarray:
    """Convex polygon whose i-th edge has outward normal angle ``normal_angles_deg[i]``."""
    th = np.radians(np.asarray(normal_angles_deg, dtype=float))
    n = np.stack([np.cos(th), np.sin(th)], axis=1)
    d = np.asarray(support, dtype=float)
    verts = []
    for i in range(len(th)):
        j = (i + 1) % len(th)
        verts.append(np.linalg.solve(np.stack([n[i], n[j]]), [d[i], d[j]]))
    return np.array(verts)


def slanted_prism_vertices(polygon: np.ndarray, length: float, slant_deg: float) -> np.ndarray:
    """Prism along z over ``polygon`` with both end caps cut at ``slant_deg`` about y."""
    k = math.tan(math.radians(slant_deg))
    out = []
    for sign in (-0.5, 0.5):
        for x, y in polygon:
            out.append((x, y, sign * length + k * x))
    return np.array(out)


def bifrustum_vertices(n_sides: int, r_mid: float, r_cap: float, half_height: float) -> np.ndarray:
    ang = np.arange(n_sides) * TWO_PI / n_sides
    ring = lambda r, z: np.stack([r * np.cos(ang), r * np.sin(ang), np.full(n_sides, z)], axis=1)
    return np.vstack([ring(r_cap, -half_height), ring(r_mid, 0.0), ring(r_cap, half_height)])


def solid_centroid(vertices: np.ndarray) -> np.ndarray:
    hull = ConvexHull(vertices)
    ref = vertices[hull.vertices].mean(axis=0)
    tot_v = 0.0
    acc = np.zeros(3)
    for simplex in hull.simplices:
        a, b, c = vertices[simplex]
        v = abs(np.dot(a - ref, np.cross(b - ref, c - ref))) / 6.0
        tot_v += v
        acc += v * (a + b + c + ref) / 4.0
    return acc / tot_v


@dataclass(frozen=True)
class HullFace:
    normal: np.ndarray
    offset: float  # plane: normal . x + offset = 0, interior negative
    points: np.ndarray
    area: float


def hull_faces(vertices: np.ndarray, tol: float = 1e-9) -> list[HullFace]:
    """Planar faces of the convex hull, merging coplanar triangles."""
    hull = ConvexHull(vertices)
    groups: dict[tuple, list[int]] = {}
    reps: dict[tuple, np.ndarray] = {}
    for eq, simplex in zip(hull.equations, hull.simplices):
        key = None
        for k, rep in reps.items():
            if np.max(np.abs(rep - eq)) < 1e-7:
                key = k
                break
        if key is None:
            key = (len(reps),)
            reps[key] = eq
            groups[key] = []
        groups[key].extend(int(i) for i in simplex)
    faces = []
    for key, idx in groups.items():
        eq = reps[key]
        n = eq[:3] / np.linalg.norm(eq[:3])
        off = eq[3] / np.linalg.norm(eq[:3])
        on_plane = np.abs(vertices @ n + off) < 1e-7
        pts = vertices[on_plane]
        u, v = _plane_basis(n)
        pts2 = np.stack([pts @ u, pts @ v], axis=1)
        area = ConvexHull(pts2).volume
        faces.append(HullFace(n, float(off), pts, float(area)))
    return faces


def _plane_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def stability_margin(face: HullFace, com: np.ndarray) -> float:
    """Signed distance from the projected centre of mass to the face boundary (positive inside)."""
    u, v = _plane_basis(face.normal)
    p = com - (face.normal @ com + face.offset) * face.normal
    pts2 = np.stack([face.points @ u, face.points @ v], axis=1)
    h2 = ConvexHull(pts2)
    q = np.array([p @ u, p @ v])
    return float(-np.max(h2.equations[:, :2] @ q + h2.equations[:, 2]))


def stable_placements(vertices: np.ndarray, com: np.ndarray, table_height: float,
                      min_margin: float = 1e-4) -> list[StablePlacement]:
    """Faces whose support polygon contains the centre-of-mass projection.

    The canonical pose puts the face on the table and the centre of mass at
    world (0, 0); ordering is by face area (largest first), then normal.
    """
    faces = [f for f in hull_faces(vertices) if stability_margin(f, com) > min_margin]
    faces.sort(key=lambda f: (-round(f.area, 12), tuple(np.round(f.normal, 9))))
    out = []
    for i, f in enumerate(faces, start=1):
        rot = rotation_between(f.normal, [0.0, 0.0, -1.0])
        # re-orthonormalize to keep Pose invariants tight
        u, s, vt = np.linalg.svd(rot)
        rot = u @ vt
        rv = vertices @ rot.T
        rc = rot @ com
        t = np.array([-rc[0], -rc[1], table_height - rv[:, 2].min()])
        out.append(StablePlacement(i, Pose(rot, t)))
    return out


# --- scene ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticScene:
    name: str
    vertices: np.ndarray
    com: np.ndarray
    table_height: float
    x_bounds: tuple[float, float]
    y_bounds: tuple[float, float]
    reach_center: np.ndarray
    reach_radius: float
    approach_half_angle: float
    placements: tuple[StablePlacement, ...]
    clearance: float = TABLE_CLEARANCE
    max_stroke: float = 0.1
    shell_offsets: tuple[float, ...] = (0.0, 0.015)

    def __post_init__(self):
        if not self.reach_radius > 0:
            raise ValueError("reach radius must be positive")
        if not (0.0 < self.approach_half_angle <= math.pi / 2):
            raise ValueError("approach half-angle must lie in (0, pi/2]")
        idx = [p.index for p in self.placements]
        if idx != list(range(1, len(idx) + 1)):
            raise ValueError("placement indices must be 1..S")
        for p in self.placements:
            low = (self.vertices @ p.pose.rotation.T)[:, 2].min() + p.pose.translation[2]
            if abs(low - self.table_height) > 1e-6:
                raise ValueError(f"placement {p.index} does not rest on the table")

    @property
    def num_placements(self) -> int:
        return len(self.placements)

    def placement(self, m: int) -> StablePlacement:
        if not 1 <= m <= len(self.placements):
            raise ValueError(f"placement index {m} outside 1..{len(self.placements)}")
        return self.placements[m - 1]

    @cached_property
    def placement_rotations(self) -> np.ndarray:
        return np.stack([p.pose.rotation for p in self.placements])

    @cached_property
    def placement_translations(self) -> np.ndarray:
        return np.stack([p.pose.translation for p in self.placements])

    @property
    def home_xy(self) -> tuple[float, float]:
        x = min(max(self.reach_center[0], self.x_bounds[0]), self.x_bounds[1])
        y = min(max(self.reach_center[1], self.y_bounds[0]), self.y_bounds[1])
        return float(x), float(y)

    def pose_at(self, m: int, xi: PlanarParams) -> Pose:
        from .pose import compose_intermediate_pose
        return compose_intermediate_pose(self.placement(m), xi)

    def with_effector(self, **changes) -> "SyntheticScene":
        """Copy with different oracle parameters (used for cross-effector runs)."""
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return SyntheticScene(**kw)


def build_scene(name: str, vertices, table_height: float, x_bounds, y_bounds, reach_center,
                reach_radius: float, approach_half_angle: float, com=None,
                clearance: float = TABLE_CLEARANCE, max_stroke: float = 0.1,
                shell_offsets=(0.0, 0.015)) -> SyntheticScene:
    v = np.asarray(vertices, dtype=float)
    c = solid_centroid(v) if com is None else np.asarray(com, dtype=float)
    placements = tuple(stable_placements(v, c, table_height))
    return SyntheticScene(
        name=name, vertices=v, com=c, table_height=float(table_height),
        x_bounds=tuple(map(float, x_bounds)), y_bounds=tuple(map(float, y_bounds)),
        reach_center=np.asarray(reach_center, dtype=float), reach_radius=float(reach_radius),
        approach_half_angle=float(approach_half_angle), placements=placements,
        clearance=float(clearance), max_stroke=float(max_stroke),
        shell_offsets=tuple(float(s) for s in shell_offsets))


_SCENE_KEYS = {
    "name": None,
    "object": {"vertices", "com"},
    "table": {"height", "clearance"},
    "workspace": {"x", "y"},
    "reach": {"center", "radius"},
    "effector": {"approach_half_angle_deg", "max_stroke", "shell_offsets"},
}


def scene_from_dict(d: dict) -> SyntheticScene:
    for key, val in d.items():
        if key not in _SCENE_KEYS:
            raise ValueError(f"unknown scene key {key!r}")
        allowed = _SCENE_KEYS[key]
        if allowed is not None:
            extra = set(val) - allowed
            if extra:
                raise ValueError(f"unknown keys in [{key}]: {sorted(extra)}")
    obj, table, ws = d["object"], d.get("table", {}), d["workspace"]
    reach, eff = d["reach"], d["effector"]
    return build_scene(
        name=d.get("name", "custom"), vertices=obj["vertices"], com=obj.get("com"),
        table_height=table.get("height", 0.0), clearance=table.get("clearance", TABLE_CLEARANCE),
        x_bounds=ws["x"], y_bounds=ws["y"], reach_center=reach["center"], reach_radius=reach["radius"],
        approach_half_angle=math.radians(eff["approach_half_angle_deg"]),
        max_stroke=eff.get("max_stroke", 0.1), shell_offsets=eff.get("shell_offsets", (0.0, 0.015)))


def load_scene(name_or_path: str | Path) -> SyntheticScene:
    """Load a bundled preset by name or a scene TOML file by path."""
    if str(name_or_path) in PRESETS:
        text = resources.files("regrasp_ebm").joinpath(f"presets/{name_or_path}.toml").read_text()
    else:
        text = Path(name_or_path).read_text()
    return scene_from_dict(tomllib.loads(text))


# --- grasps ---------------------------------------------------------------------

@dataclass(frozen=True)
class Grasp:
    # End effector in the object frame.  Axis convention: x is the approach
    # direction, y the finger closing direction.
    pose: Pose
    width: float

    def __post_init__(self):
        if not (0.0 <= self.width <= 1.0):
            raise ValueError(f"grasp width {self.width} outside [0, 1]")

    @property
    def approach(self) -> np.ndarray:
        return self.pose.rotation[:, 0]


class GraspSet:
    """Ordered, immutable grasp candidates with stable integer ids."""

    def __init__(self, grasps: Iterable[Grasp], ids: Sequence[int] | None = None):
        self.grasps = tuple(grasps)
        self.ids = tuple(range(len(self.grasps))) if ids is None else tuple(int(i) for i in ids)
        if len(self.ids) != len(self.grasps):
            raise ValueError("ids and grasps differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("grasp ids must be unique")
        self.positions = np.array([g.pose.translation for g in self.grasps]).reshape(-1, 3)
        self.approaches = np.array([g.approach for g in self.grasps]).reshape(-1, 3)
        self.widths = np.array([g.width for g in self.grasps], dtype=float)
        for a in (self.positions, self.approaches, self.widths):
            a.setflags(write=False)

    def __len__(self):
        return len(self.grasps)

    def __getitem__(self, i) -> Grasp:
        return self.grasps[i]

    def encodings(self, include_width: bool = True) -> np.ndarray:
        enc = np.array([encode_pose(g.pose) for g in self.grasps]).reshape(-1, 9)
        if include_width:
            enc = np.hstack([enc, self.widths[:, None]])
        return enc

    def subset(self, positions: Sequence[int]) -> "GraspSet":
        return GraspSet([self.grasps[i] for i in positions], [self.ids[i] for i in positions])

    def index_of(self, grasp_id: int) -> int:
        return self.ids.index(grasp_id)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for gid, g in zip(self.ids, self.grasps):
                fh.write(json.dumps({"id": gid, "pose": g.pose.to_row12(), "width": g.width}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "GraspSet":
        grasps, ids = [], []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                ids.append(rec["id"])
                grasps.append(Grasp(Pose.from_row12(rec["pose"]), float(rec["width"])))
        return cls(grasps, ids)


def _ray_exit_distance(vertices_hull_eq: np.ndarray, origin: np.ndarray, direction: np.ndarray) -> float:
    n = vertices_hull_eq[:, :3]
    off = vertices_hull_eq[:, 3]
    denom = n @ direction
    num = -(n @ origin + off)
    mask = denom > 1e-12
    return float(np.min(num[mask] / denom[mask]))


def sample_grasps(scene: SyntheticScene, count: int, rng_seed: int) -> GraspSet:
    """Sample ``count`` grasps on offset shells around the object surface.

    Approach directions are uniform on the sphere; the TCP sits where the ray
    against the approach direction leaves the hull, pushed out by a shell
    offset.  Candidates that are infeasible under every stable placement (placed
    at the scene's home position) are discarded and redrawn.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    hull = ConvexHull(scene.vertices)
    eq = hull.equations
    hx, hy = scene.home_xy
    xi_home = np.array([[hx, hy, 0.0]] * scene.num_placements)
    rot_h, trans_h = planar_poses_batch(scene.placement_rotations, scene.placement_translations, xi_home)
    grasps: list[Grasp] = []
    while len(grasps) < count:
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        offset = scene.shell_offsets[int(rng.integers(len(scene.shell_offsets)))]
        roll = rng.uniform(0.0, TWO_PI)
        dist = _ray_exit_distance(eq, scene.com, -a)
        tcp = scene.com - a * (dist + offset)
        u, v = _plane_basis(a)
        closing = math.cos(roll) * u + math.sin(roll) * v
        rot = np.column_stack([a, closing, np.cross(a, closing)])
        extent = float(np.ptp(scene.vertices @ closing))
        width = min(max(extent / scene.max_stroke, 0.0), 1.0)
        ok = _kernels.feasibility_matrix(
            np.ascontiguousarray(rot_h), np.ascontiguousarray(trans_h),
            tcp[None].copy(), a[None].copy(), *_oracle_params(scene))
        if ok.any():
            grasps.append(Grasp(Pose(rot, tcp), width))
    return GraspSet(grasps)


# --- oracle ---------------------------------------------------------------------

def _oracle_params(scene: SyntheticScene) -> tuple:
    return (np.ascontiguousarray(scene.reach_center, dtype=float), float(scene.reach_radius),
            float(scene.table_height + scene.clearance), float(math.cos(scene.approach_half_angle)),
            float(scene.x_bounds[0]), float(scene.x_bounds[1]),
            float(scene.y_bounds[0]), float(scene.y_bounds[1]))


def feasibility_matrix(scene: SyntheticScene, rotations: np.ndarray, translations: np.ndarray,
                       grasps: GraspSet, chunk: int = 4096) -> np.ndarray:
    """Boolean (P, K) oracle labels for stacked object poses."""
    rotations = np.ascontiguousarray(rotations, dtype=float).reshape(-1, 3, 3)
    translations = np.ascontiguousarray(translations, dtype=float).reshape(-1, 3)
    gp = np.ascontiguousarray(grasps.positions)
    ga = np.ascontiguousarray(grasps.approaches)
    params = _oracle_params(scene)
    out = np.empty((rotations.shape[0], len(grasps)), dtype=bool)
    for s in range(0, rotations.shape[0], chunk):
        out[s:s + chunk] = _kernels.feasibility_matrix(rotations[s:s + chunk], translations[s:s + chunk],
                                                      gp, ga, *params).astype(bool)
    return out


def oracle_feasible(scene: SyntheticScene, object_pose: Pose, grasp: Grasp) -> bool:
    return bool(feasibility_matrix(scene, object_pose.rotation[None], object_pose.translation[None],
                                   GraspSet([grasp]))[0, 0])


def feasible_set(scene: SyntheticScene, pose: Pose, grasps: GraspSet) -> np.ndarray:
    """Boolean mask over ``grasps`` of oracle-feasible grasps at ``pose``."""
    return feasibility_matrix(scene, pose.rotation[None], pose.translation[None], grasps)[0]


def shared_grasps_ground_truth(scene: SyntheticScene, pose_a: Pose, pose_b: Pose,
                               grasps: GraspSet) -> set[int]:
    f = feasibility_matrix(scene, np.stack([pose_a.rotation, pose_b.rotation]),
                           np.stack([pose_a.translation, pose_b.translation]), grasps)
    both = f[0] & f[1]
    return {grasps.ids[i] for i in np.flatnonzero(both)}


# --- grid ground truth ----------------------------------------------------------

def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


class GroundTruthGrid:
    """Oracle feasibility of every grid pose over placements x SE(2) workspace cells."""

    def __init__(self, scene: SyntheticScene, grasps: GraspSet, xy_step: float = 0.01,
                 theta_step: float = math.pi / 3):
        if xy_step <= 0 or theta_step <= 0:
            raise ValueError("grid steps must be positive")
        self.scene, self.grasps = scene, grasps
        self.xy_step, self.theta_step = float(xy_step), float(theta_step)
        xs = _axis(*scene.x_bounds, xy_step)
        ys = _axis(*scene.y_bounds, xy_step)
        n_th = int(math.ceil(TWO_PI / theta_step - 1e-9))
        ths = theta_step * np.arange(n_th)
        m_idx, xg, yg, tg = np.meshgrid(np.arange(1, scene.num_placements + 1), xs, ys, ths, indexing="ij")
        self.placement_index = m_idx.ravel()
        self.xi = np.stack([xg.ravel(), yg.ravel(), tg.ravel()], axis=1)
        rot, trans = planar_poses_batch(scene.placement_rotations[self.placement_index - 1],
                                        scene.placement_translations[self.placement_index - 1], self.xi)
        feas = feasibility_matrix(scene, rot, trans, grasps)
        self.packed = np.packbits(feas, axis=1)
        self.nonempty = feas.any(axis=1)

    def __len__(self):
        return self.placement_index.size

    def feasible(self, rows=None) -> np.ndarray:
        p = self.packed if rows is None else self.packed[rows]
        return np.unpackbits(p, axis=-1, count=len(self.grasps)).astype(bool)

    def _touching(self, mask: np.ndarray) -> np.ndarray:
        pm = np.packbits(mask)
        return np.any(self.packed & pm, axis=1)

    def midposes(self, pose_init: Pose, pose_goal: Pose) -> list[tuple[int, PlanarParams]]:
        f_init = feasible_set(self.scene, pose_init, self.grasps)
        f_goal = feasible_set(self.scene, pose_goal, self.grasps)
        rows = np.flatnonzero(self._touching(f_init) & self._touching(f_goal))
        return [(int(self.placement_index[r]), PlanarParams.from_array(self.xi[r])) for r in rows]

    def min_steps(self, pose_init: Pose, pose_goal: Pose, max_steps: int | None = None) -> int | None:
        """Minimum number of intermediate grid poses; ``None`` when unreachable."""
        f_init = feasible_set(self.scene, pose_init, self.grasps)
        f_goal = feasible_set(self.scene, pose_goal, self.grasps)
        if (f_init & f_goal).any():
            return 0
        union = f_init
        prev = None
        steps = 0
        while True:
            steps += 1
            if max_steps is not None and steps > max_steps:
                return None
            rows = self._touching(union)
            if not rows.any():
                return None
            union = np.unpackbits(np.bitwise_or.reduce(self.packed[rows], axis=0),
                                  count=len(self.grasps)).astype(bool)
            if (union & f_goal).any():
                return steps
            if prev is not None and np.array_equal(union, prev):
                return None
            prev = union


def grid_ground_truth_midposes(scene, pose_init, pose_goal, grasps, xy_step=0.01, theta_step=math.pi / 3):
    return GroundTruthGrid(scene, grasps, xy_step, theta_step).midposes(pose_init, pose_goal)


def min_steps_oracle(scene, pose_init, pose_goal, grasps, xy_step=0.01, theta_step=math.pi / 3,
                     max_steps=None):
    return GroundTruthGrid(scene, grasps, xy_step, theta_step).min_steps(pose_init, pose_goal, max_steps)


# --- labels ---------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityLabel:
    grasp_id: int
    pose_id: int
    feasible: bool


def write_labels(path, poses_row12: np.ndarray, grasp_ids: np.ndarray, feasible: np.ndarray) -> None:
    with open(path, "w") as fh:
        for p, g, f in zip(poses_row12, grasp_ids, feasible):
            fh.write(json.dumps({"pose": [float(v) for v in p], "grasp_id": int(g),
                                 "feasible": bool(f)}) + "\n")


def read_labels(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    poses, gids, feas = [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            poses.append(rec["pose"])
            gids.append(rec["grasp_id"])
            feas.append(rec["feasible"])
    return np.array(poses, dtype=float).reshape(-1, 12), np.array(gids, dtype=int), np.array(feas, dtype=bool)
