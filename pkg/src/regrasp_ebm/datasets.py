"""Oracle-labelled training data and held-out pose pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose import TWO_PI, planar_poses_batch
from .world import GraspSet, SyntheticScene, feasibility_matrix


def random_poses(scene: SyntheticScene, rng: np.random.Generator, count: int):
    """Uniform placements, positions over the workspace and yaw over [0, 2pi)."""
    m = rng.integers(1, scene.num_placements + 1, size=count)
    xi = np.column_stack([rng.uniform(*scene.x_bounds, size=count),
                          rng.uniform(*scene.y_bounds, size=count),
                          rng.uniform(0.0, TWO_PI, size=count)])
    rot, trans = planar_poses_batch(scene.placement_rotations[m - 1], scene.placement_translations[m - 1], xi)
    return m, xi, rot, trans


def _row12(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    return np.concatenate([rot, trans[..., None]], axis=-1).reshape(-1, 12)


@dataclass
class LabelSet:
    poses: np.ndarray     # (n, 12) row-major 3x4
    grasp_ids: np.ndarray
    feasible: np.ndarray

    def __len__(self):
        return self.feasible.size


def generate_labels(scene: SyntheticScene, grasps: GraspSet, n_positive: int, negative_ratio: float,
                    rng: np.random.Generator, chunk: int = 512) -> LabelSet:
    """``n_positive`` feasible pairs plus ``round(ratio * n_positive)`` infeasible ones.

    Positives are every feasible grasp at uniformly drawn poses (the last pose is
    truncated to hit the count).  Negatives are uniform (pose, grasp) draws that
    the oracle rejects.
    """
    ids = np.asarray(grasps.ids)
    pos_rows, pos_ids = [], []
    got = 0
    while got < n_positive:
        _, _, rot, trans = random_poses(scene, rng, chunk)
        feas = feasibility_matrix(scene, rot, trans, grasps)
        pi, gi = np.nonzero(feas)
        take = min(pi.size, n_positive - got)
        pos_rows.append(_row12(rot[pi[:take]], trans[pi[:take]]))
        pos_ids.append(ids[gi[:take]])
        got += take
    n_neg = int(round(negative_ratio * n_positive))
    neg_rows, neg_ids = [], []
    got = 0
    while got < n_neg:
        _, _, rot, trans = random_poses(scene, rng, chunk)
        gi = rng.integers(0, len(grasps), size=chunk)
        ok = ~feasibility_matrix(scene, rot, trans, grasps)[np.arange(chunk), gi]
        sel = np.flatnonzero(ok)[: n_neg - got]
        neg_rows.append(_row12(rot[sel], trans[sel]))
        neg_ids.append(ids[gi[sel]])
        got += sel.size
    poses = np.concatenate(pos_rows + neg_rows) if n_neg else np.concatenate(pos_rows)
    gids = np.concatenate(pos_ids + neg_ids) if n_neg else np.concatenate(pos_ids)
    feas = np.concatenate([np.ones(n_positive, bool), np.zeros(n_neg, bool)])
    return LabelSet(poses, gids, feas)

