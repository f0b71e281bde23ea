import math

import numpy as np
import pytest

from regrasp_ebm import _kernels
from regrasp_ebm.datasets import random_poses
from regrasp_ebm.pose import PlanarParams, Pose
from regrasp_ebm.world import (
    PRESETS, Grasp, GraspSet, GroundTruthGrid, feasibility_matrix, feasible_set,
    grid_ground_truth_midposes, load_scene, min_steps_oracle, oracle_feasible, read_labels,
    sample_grasps, scene_from_dict, shared_grasps_ground_truth, write_labels,
)

from conftest import cube_grasps, cube_scene, placement_with_down_face


def reference_feasible(scene, rot, trans, grasp):
    """Condition-by-condition re-check written straight from the definitions."""
    tcp = rot @ grasp.pose.translation + trans
    approach = rot @ grasp.pose.rotation[:, 0]
    reach = np.linalg.norm(tcp - scene.reach_center) <= scene.reach_radius
    above = tcp[2] > scene.table_height + scene.clearance
    cos_angle = -approach[2] / np.linalg.norm(approach)
    cone = math.acos(min(1.0, max(-1.0, cos_angle))) <= scene.approach_half_angle
    inside = scene.x_bounds[0] <= tcp[0] <= scene.x_bounds[1] and scene.y_bounds[0] <= tcp[1] <= scene.y_bounds[1]
    return bool(reach and above and cone and inside)


@pytest.mark.parametrize("name, count", [("box5", 5), ("prism7", 7), ("peg2", 2)])
def test_presets_have_expected_placements(name, count):
    scene = load_scene(name)
    assert scene.num_placements == count
    for p in scene.placements:
        low = (scene.vertices @ p.pose.rotation.T)[:, 2].min() + p.pose.translation[2]
        assert abs(low - scene.table_height) < 1e-6
    assert PRESETS == ("box5", "prism7", "peg2")


def test_scene_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        scene_from_dict({"name": "x", "bogus": 1})
    with pytest.raises(ValueError, match="unknown"):
        scene_from_dict({"object": {"vertices": [], "mass": 1}})


def test_scene_invariants(box5):
    with pytest.raises(ValueError):
        box5.with_effector(reach_radius=0.0)
    with pytest.raises(ValueError):
        box5.with_effector(approach_half_angle=0.0)
    with pytest.raises(ValueError):
        box5.placement(0)


def test_oracle_trivial_cases():
    scene = load_scene("box5")
    # effector pose placed directly: TCP at the reach centre pointing down
    rot = np.column_stack([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    g = Grasp(Pose(rot, scene.reach_center), 0.5)
    assert oracle_feasible(scene, Pose.identity(), g)
    below = Grasp(Pose(rot, [scene.reach_center[0], scene.reach_center[1], -0.01]), 0.5)
    assert not oracle_feasible(scene, Pose.identity(), below)


@pytest.mark.parametrize("name", PRESETS)
def test_oracle_matches_reference(name, backend):
    scene = load_scene(name)
    grasps = sample_grasps(scene, 40, 1)
    rng = np.random.default_rng(2)
    _, _, rot, trans = random_poses(scene, rng, 25)
    f = feasibility_matrix(scene, rot, trans, grasps)
    assert f.shape == (25, 40)
    want = np.array([[reference_feasible(scene, rot[i], trans[i], g) for g in grasps] for i in range(25)])
    assert np.array_equal(f, want)


def test_oracle_backends_agree(box5, box5_grasps):
    if "cython" not in _kernels.available_backends():
        pytest.skip("compiled kernels not built")
    _, _, rot, trans = random_poses(box5, np.random.default_rng(3), 500)
    out = {}
    for b in ("python", "cython"):
        with _kernels.use_backend(b):
            out[b] = feasibility_matrix(box5, rot, trans, box5_grasps)
    assert np.array_equal(out["python"], out["cython"])


def test_sample_grasps_contract(box5):
    a = sample_grasps(box5, 200, 7)
    b = sample_grasps(box5, 200, 7)
    assert a.ids == tuple(range(200))
    assert np.array_equal(a.encodings(), b.encodings())
    assert np.all((a.widths >= 0) & (a.widths <= 1))
    # every grasp works in at least one placement at the home position
    hx, hy = box5.home_xy
    poses = [box5.pose_at(m, PlanarParams(hx, hy, 0.0)) for m in range(1, box5.num_placements + 1)]
    ok = np.zeros(200, bool)
    for p in poses:
        ok |= feasible_set(box5, p, a)
    assert ok.all()
    with pytest.raises(ValueError):
        sample_grasps(box5, 0, 0)


def test_grasp_width_range():
    with pytest.raises(ValueError):
        Grasp(Pose.identity(), 1.5)


def test_grasp_set_ids_and_io(tmp_path, box5_grasps):
    with pytest.raises(ValueError):
        GraspSet(list(box5_grasps)[:2], [3, 3])
    sub = box5_grasps.subset([5, 1, 9])
    assert sub.ids == (5, 1, 9)
    assert sub.index_of(9) == 2
    path = tmp_path / "g.jsonl"
    box5_grasps.to_jsonl(path)
    back = GraspSet.from_jsonl(path)
    assert back.ids == box5_grasps.ids
    assert np.allclose(back.encodings(), box5_grasps.encodings(), atol=1e-15)


def test_shared_grasps(box5, box5_grasps):
    rng = np.random.default_rng(4)
    for _ in range(20):
        _, _, rot, trans = random_poses(box5, rng, 2)
        a, b = Pose(rot[0], trans[0]), Pose(rot[1], trans[1])
        fa = {i for i, g in zip(box5_grasps.ids, box5_grasps) if oracle_feasible(box5, a, g)}
        fb = {i for i, g in zip(box5_grasps.ids, box5_grasps) if oracle_feasible(box5, b, g)}
        assert shared_grasps_ground_truth(box5, a, b, box5_grasps) == fa & fb
        assert shared_grasps_ground_truth(box5, a, a, box5_grasps) == fa


def test_cube_placements_follow_cone():
    scene = cube_scene()
    assert scene.num_placements == 6
    grasps = cube_grasps("-z", "-x", "-z/-x")
    m_z = placement_with_down_face(scene, (0, 0, -1))
    m_x = placement_with_down_face(scene, (-1, 0, 0))
    m_y = placement_with_down_face(scene, (0, -1, 0))
    at = lambda m: scene.pose_at(m, PlanarParams(0.0, 0.35, 0.7))
    assert feasible_set(scene, at(m_z), grasps).tolist() == [True, False, True]
    assert feasible_set(scene, at(m_x), grasps).tolist() == [False, True, True]
    assert feasible_set(scene, at(m_y), grasps).tolist() == [False, False, False]


def test_min_steps_constructed_scenes():
    scene = cube_scene()
    m_z = placement_with_down_face(scene, (0, 0, -1))
    m_x = placement_with_down_face(scene, (-1, 0, 0))
    m_y = placement_with_down_face(scene, (0, -1, 0))
    a = scene.pose_at(m_z, PlanarParams(-0.2, 0.3, 0.0))
    b = scene.pose_at(m_y, PlanarParams(0.25, 0.45, 2.0))

    two_hop = cube_grasps("-z", "-y", "-z/-x", "-x/-y")
    assert min_steps_oracle(scene, a, b, two_hop, xy_step=0.1) == 1
    mids = grid_ground_truth_midposes(scene, a, b, two_hop, xy_step=0.1)
    assert mids and all(m == m_x for m, _ in mids)

    direct = cube_grasps("-z", "-y", "-z/-y")
    assert min_steps_oracle(scene, a, b, direct, xy_step=0.1) == 0

    three = cube_grasps("-z", "-y", "-z/-x", "-x/+z")
    # -x/+z leads on to the +z placement, never to -y
    assert min_steps_oracle(scene, a, b, three, xy_step=0.1) is None

    disconnected = cube_grasps("-z", "-x", "-y")
    assert min_steps_oracle(scene, a, b, disconnected, xy_step=0.1) is None
    assert grid_ground_truth_midposes(scene, a, b, disconnected, xy_step=0.1) == []


def test_min_steps_chain_of_two():
    scene = cube_scene()
    m_z = placement_with_down_face(scene, (0, 0, -1))
    m_px = placement_with_down_face(scene, (1, 0, 0))
    a = scene.pose_at(m_z, PlanarParams(0.0, 0.3, 0.0))
    b = scene.pose_at(m_px, PlanarParams(0.1, 0.4, 1.0))
    grasps = cube_grasps("-z", "+x", "-z/-y", "-y/+z", "+z/+x")
    # -z -> -y -> +z -> +x
    assert min_steps_oracle(scene, a, b, grasps, xy_step=0.1) == 2
    assert min_steps_oracle(scene, a, b, grasps, xy_step=0.1, max_steps=1) is None


def test_grid_midposes_sound(box5, box5_grasps):
    grid = GroundTruthGrid(box5, box5_grasps, xy_step=0.05)
    rng = np.random.default_rng(5)
    _, _, rot, trans = random_poses(box5, rng, 2)
    a, b = Pose(rot[0], trans[0]), Pose(rot[1], trans[1])
    mids = grid.midposes(a, b)
    for m, xi in mids[:: max(1, len(mids) // 40)]:
        t = box5.pose_at(m, xi)
        assert shared_grasps_ground_truth(box5, a, t, box5_grasps)
        assert shared_grasps_ground_truth(box5, t, b, box5_grasps)


def test_grid_refinement_never_increases_steps(box5, box5_grasps):
    coarse = GroundTruthGrid(box5, box5_grasps, xy_step=0.1, theta_step=math.pi / 2)
    fine = GroundTruthGrid(box5, box5_grasps, xy_step=0.05, theta_step=math.pi / 4)
    rng = np.random.default_rng(6)
    for _ in range(15):
        _, _, rot, trans = random_poses(box5, rng, 2)
        a, b = Pose(rot[0], trans[0]), Pose(rot[1], trans[1])
        c, f = coarse.min_steps(a, b), fine.min_steps(a, b)
        if c is not None:
            assert f is not None and f <= c


def test_grid_axis_covers_bounds(box5, box5_grasps):
    grid = GroundTruthGrid(box5, box5_grasps, xy_step=0.05, theta_step=math.pi / 3)
    xs = np.unique(grid.xi[:, 0])
    assert xs[0] == box5.x_bounds[0] and xs[-1] == pytest.approx(box5.x_bounds[1])
    assert np.unique(grid.xi[:, 2]).size == 6
    assert len(grid) == box5.num_placements * xs.size * np.unique(grid.xi[:, 1]).size * 6


def test_labels_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    poses = rng.normal(size=(5, 12))
    gids = rng.integers(0, 200, 5)
    feas = rng.random(5) < 0.5
    write_labels(tmp_path / "l.jsonl", poses, gids, feas)
    p, g, f = read_labels(tmp_path / "l.jsonl")
    assert np.array_equal(p, poses) and np.array_equal(g, gids) and np.array_equal(f, feas)
