import csv
import json
import math

import numpy as np
import pytest

from regrasp_ebm import cli
from regrasp_ebm import evaluation as ev
from regrasp_ebm.energy import load_checkpoint
from regrasp_ebm.planner import calibrate_h
from regrasp_ebm.pose import PlanarParams, Pose
from regrasp_ebm.world import GraspSet, feasible_set, load_scene, oracle_feasible, read_labels

SMALL = """
seed = 3
[scene]
grasp_count = 60
[data]
n_positive = 1500
cal_pairs = 40
test_pairs = 40
[model]
hidden = [24, 24]
[train]
epochs = 15
[planner]
batch_size = 60
n_max = 2
[eval]
onestep_pairs = 2
onestep_batch = 40
ktop_grid = [40, 10]
episodes = 3
episode_min_steps = [1, 2]
multistep_batch = 60
multistep_ktop = [10]
sweep_subsets = [30, 60]
"""


def run_cli(*argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    for cmd in ("gen-data", "train", "calibrate"):
        assert run_cli("--config", cfg, "--out", root / "a", cmd) == 0
    return root, cfg


def conf(pipeline, sub="a", **kw):
    root, cfg = pipeline
    return ev.load_config(cfg, out=str(root / sub), **kw)


# --- configuration ---------------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    c = ev.load_config()
    assert c.data.n_positive == 20000 and c.scene.preset == "box5"
    assert c.planner.n_max == 5 and c.planner.batch_size == 200 and c.planner.k_top == 10
    assert c.langevin.eta == 0.3 and c.langevin.tau == 0.1 and c.langevin.k_opt == 20
    assert c.connectivity.alpha == 1.0 and c.connectivity.lambda_reg == 0.5
    assert c.eval.ktop_grid == (200, 100, 50, 10) and c.eval.multistep_ktop == (10, 50)
    assert c.eval.multistep_batch == 1000 and c.eval.sweep_steps == 40
    p = tmp_path / "c.toml"
    p.write_text("seed = 4\n[langevin]\neta = 0.1\n[model]\ninclude_width = false\n")
    c = ev.load_config(p, seed=9, out="x")
    assert (c.seed, c.out, c.langevin.eta) == (9, "x", 0.1)
    assert c.train.include_width is False


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "[data]\nn_postive = 10\n",
    "[langevin]\nseed = 3\n",
    "[planner]\nk_top = 0\n",
    "[planner]\nverify_h = -3.0\n",
    "[planner]\nverify_threshold = \"tight\"\n",
    "[mystery]\nx = 1\n",
])
def test_config_rejects_unknown_or_invalid(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    with pytest.raises(ValueError):
        ev.load_config(p)


def test_cli_config_errors_exit_1(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[data]\ntypo = 1\n")
    assert run_cli("--config", p, "gen-data") == 1
    assert "typo" in capsys.readouterr().err
    assert run_cli("--config", tmp_path / "absent.toml", "gen-data") == 1


def test_derive_seed():
    assert ev.derive_seed(1, 2) == ev.derive_seed(1, 2)
    assert len({ev.derive_seed(s, w) for s in range(5) for w in range(5)}) == 25
    assert 0 <= ev.derive_seed(2 ** 64 - 1, 7) < 2 ** 63


# --- data generation, training, calibration -----------------------------------------------------

def test_gen_data_contents(pipeline):
    c = conf(pipeline)
    paths = c.paths
    man = json.loads(paths.manifest.read_text())
    assert man["seed"] == 3 and man["n_positive"] == 1500 and man["n_negative"] == 1500
    assert man["derived_seeds"]["grasps"] == ev.derive_seed(3, 1)
    scene = load_scene("box5")
    grasps = GraspSet.from_jsonl(paths.grasps)
    assert len(grasps) == 60
    n_pos = 0
    for f in (paths.labels_train, paths.labels_val):
        poses, gids, feas = read_labels(f)
        for row, g, ok in zip(poses, gids, feas):
            assert oracle_feasible(scene, Pose.from_row12(row), grasps[grasps.index_of(g)]) == ok
            n_pos += ok
    assert n_pos == 1500
    a, b, shared = ev.read_pairs(paths.pairs_val)
    assert len(shared) == 40
    for ra, rb, ids in zip(a, b, shared):
        fa = feasible_set(scene, Pose.from_row12(ra), grasps)
        fb = feasible_set(scene, Pose.from_row12(rb), grasps)
        assert fa.any() and fb.any()
        assert ids == [grasps.ids[i] for i in np.flatnonzero(fa & fb)]


def test_gen_data_same_seed_same_bytes(pipeline):
    root, cfg = pipeline
    assert run_cli("--config", cfg, "--out", root / "b", "gen-data") == 0
    for name in ("grasps", "labels_train", "labels_val", "pairs_val", "pairs_test", "manifest"):
        assert getattr(conf(pipeline, "a").paths, name).read_bytes() == getattr(conf(pipeline, "b").paths, name).read_bytes()
    assert run_cli("--config", cfg, "--out", root / "c", "--seed", "4", "gen-data") == 0
    assert conf(pipeline, "c").paths.grasps.read_bytes() != conf(pipeline, "a").paths.grasps.read_bytes()


def test_calibration_report(pipeline):
    c = conf(pipeline)
    rep = json.loads(c.paths.calibration.read_text())
    grasps = GraspSet.from_jsonl(c.paths.grasps)
    model = load_checkpoint(c.paths.checkpoint)
    sums, labels = ev.pair_sums(model, grasps, *ev.read_pairs(c.paths.pairs_val))
    best = max(ev.f1_at(sums, labels, h)[0] for h in np.unique(sums))
    assert rep["f1"] == pytest.approx(best, abs=1e-12)
    assert rep["h"] == calibrate_h(sums, labels).h
    with open(c.paths.pr_curve) as fh:
        rows = list(csv.DictReader(fh))
    assert max(float(r["f1"]) for r in rows) == pytest.approx(rep["f1"], abs=1e-12)
    # strict threshold: the largest one accepting no validation pair without a shared grasp
    s2, y2 = ev.pair_sums(model, grasps, *ev.read_pairs(c.paths.pairs_val), flat=False)
    mins, shared = s2.min(axis=1), y2.any(axis=1)
    hv = rep["h_verify"]
    assert hv <= rep["h"] and not np.any((mins <= hv) & ~shared)
    assert hv == rep["h"] or np.any((mins <= np.nextafter(hv, np.inf)) & ~shared)
    assert rep["test_pairs_at_h_verify"]["pair_fp_rate"] <= rep["test_pairs_at_h"]["pair_fp_rate"]
    before = c.paths.calibration.read_bytes()
    ev.cmd_calibrate(c)
    assert c.paths.calibration.read_bytes() == before


def test_train_requires_dataset(tmp_path, capsys):
    assert run_cli("--out", tmp_path, "train") == 1
    assert "grasps.jsonl" in capsys.readouterr().err


def test_training_divergence_is_reported(pipeline):
    root, cfg = pipeline
    c = ev.load_config(cfg, out=str(root / "a"))
    bad = ev.dataclasses.replace(c, train=ev.dataclasses.replace(c.train, learning_rate=1e8))
    with pytest.raises(ev.RunError, match="epoch"):
        ev.cmd_train(bad)


# --- planning ------------------------------------------------------------------------------------

def test_parse_pose():
    scene = load_scene("box5")
    p = ev.parse_pose("2,0.1,0.3,1.0", scene)
    assert p.allclose(scene.pose_at(2, PlanarParams(0.1, 0.3, 1.0)))
    assert ev.parse_pose(" ".join(map(str, p.to_row12())), scene).allclose(p)
    assert ev.parse_pose(["2", "0.1", "0.3", "1.0"], scene).allclose(p)
    for bad in ("1,2,3", "9,0,0.3,0", "a,b,c,d", "1.5,0,0.3,0"):
        with pytest.raises(ev.RunError):
            ev.parse_pose(bad, scene)


def test_plan_direct_pair(pipeline, capsys):
    root, cfg = pipeline
    code = run_cli("--config", cfg, "--out", root / "a", "plan", "--init", "1,0,0.35,0", "--goal", "1,0.01,0.35,0",
                   "--hard-check")
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["n"] == 0 and out["status"] == "success"
    assert out["hard_check"]["pass"] and out["diagnostics"]["iterations"] == 0
    assert json.loads((root / "a" / "plan.json").read_text()) == out


def test_plan_failure_exit_code(pipeline, tmp_path, capsys):
    root, _ = pipeline
    cfg = tmp_path / "strict.toml"
    cfg.write_text(SMALL.replace("[planner]", "[connectivity]\nh = -1000.0\n[planner]"))
    code = run_cli("--config", cfg, "--out", root / "a", "plan", "--init", "1,0.44,0.59,0",
                   "--goal", "3,-0.44,0.11,2", "--nmax", "1", "--batch", "8", "--ktop", "2")
    out = json.loads(capsys.readouterr().out)
    assert code == 2 and out["status"] == "failure" and out["n"] is None
    assert run_cli("--out", tmp_path / "empty", "plan", "--init", "1,0,0.3,0", "--goal", "1,0,0.3,0") == 1


def test_plan_zero_fp_threshold_from_calibration(pipeline, tmp_path, capsys):
    root, _ = pipeline
    cfg = tmp_path / "zfp.toml"
    cfg.write_text(SMALL.replace("[planner]", "[planner]\nverify_threshold = \"zero_fp\""))
    c = ev.load_config(cfg, out=str(root / "a"))
    rep = json.loads(c.paths.calibration.read_text())
    assert ev.planner_config(c).verify_h == rep["h_verify"]
    run_cli("--config", cfg, "--out", root / "a", "plan", "--init", "1,0,0.35,0", "--goal", "1,0.01,0.35,0")
    out = json.loads(capsys.readouterr().out)
    assert out["h"] == min(rep["h_verify"], rep["h"]) and out["diagnostics"]["h_cost"] == rep["h"]


def test_plan_flags_reach_planner(pipeline, capsys):
    root, cfg = pipeline
    run_cli("--config", cfg, "--out", root / "a", "plan", "--init", "1,-0.2,0.3,0", "--goal", "3,0.25,0.45,2",
            "--cost", "jplus", "--ktop", "3", "--batch", "12", "--nmax", "1")
    d = json.loads(capsys.readouterr().out)["diagnostics"]
    assert (d["cost"], d["k_top"], d["batch_size"]) == ("jplus", 3, 12)
    assert len(d["per_n"]) <= 2


# --- evaluation protocols --------------------------------------------------------------------------

def test_sample_episodes_and_budget():
    scene = load_scene("box5")
    from regrasp_ebm.world import sample_grasps
    grasps = sample_grasps(scene, 40, 0)
    grid = ev.GroundTruthGrid(scene, grasps, 0.02, math.pi / 3)
    eps = ev.sample_episodes(scene, grid, 4, [1, 2], np.random.default_rng(0), 10000)
    assert [e.min_steps for e in eps] == [1, 1, 2, 2]
    for e in eps:
        assert grid.min_steps(*e.poses(scene)) == e.min_steps
    with pytest.raises(ev.RunError, match="budget of 3 draws"):
        ev.sample_episodes(scene, grid, 50, [2], np.random.default_rng(0), 3)


def test_interpolation_shortest_arc():
    a, b = PlanarParams(0.0, 0.2, 6.0), PlanarParams(0.3, 0.5, 0.5)
    path = ev.interpolate_xi(a, b, 5)
    assert path[0].x == 0.0 and path[-1].y == pytest.approx(0.5)
    assert path[-1].theta == pytest.approx(0.5)
    steps = [(p.theta - q.theta) % (2 * math.pi) for q, p in zip(path[:-1], path[1:])]
    assert np.allclose(steps, (0.5 + 2 * math.pi - 6.0) / 4)


def test_eval_onestep_report(pipeline):
    rep = ev.cmd_eval_onestep(conf(pipeline))
    assert rep["k_top_grid"] == [40, 10] and "oracle" in rep
    assert rep["sv"]["grid"] == {"40": 1.0, "10": 1.0}
    for v in ("jseq", "jplus", "jtrunc"):
        assert all(0.0 <= x <= 1.0 for x in rep["sv"][v].values())
    assert all(p["min_steps"] == 1 for p in rep["pairs"])


def test_eval_multistep_consistency(pipeline):
    c = conf(pipeline)
    rep = ev.cmd_eval_multistep(c)
    rows = [json.loads(line) for line in c.paths.episodes.read_text().splitlines()]
    summary = rep["by_k_top"]["10"]
    assert summary == ev.summarize(rows)
    scene = load_scene("box5")
    grasps = GraspSet.from_jsonl(c.paths.grasps)
    assert ev.recheck_rows(scene, grasps, rows) == [r["hard_pass"] for r in rows]
    assert summary["S.H."] <= summary["S.T."] <= 1.0
    succ = [r for r in rows if r["status"] == "success"]
    if succ and all(r["n"] >= r["min_steps"] for r in succ):
        assert summary["E.L."] >= summary["oracle_mean_min_steps"]
    threaded = ev.cmd_eval_multistep(ev.dataclasses.replace(c, threads=2))
    strip = [{k: v for k, v in r.items() if k != "plan_time_s"} for r in rows]
    rows2 = [json.loads(line) for line in c.paths.episodes.read_text().splitlines()]
    assert strip == [{k: v for k, v in r.items() if k != "plan_time_s"} for r in rows2]
    assert threaded["episodes"] == rep["episodes"]


def test_summarize_rules():
    rows = [
        {"status": "success", "n": 1, "hard_pass": True, "plan_time_s": 1.0, "min_steps": 1},
        {"status": "success", "n": 3, "hard_pass": False, "plan_time_s": 3.0, "min_steps": 2},
        {"status": "failure", "n": None, "hard_pass": None, "plan_time_s": 50.0, "min_steps": 2},
        {"status": "failure", "n": None, "hard_pass": None, "plan_time_s": 50.0, "min_steps": 1},
    ]
    s = ev.summarize(rows)
    assert (s["S.T."], s["S.H."], s["E.L."], s["E.T."]) == (0.5, 0.25, 2.0, 2.0)


def test_ablate_sweep_files(pipeline):
    c = conf(pipeline)
    meta = ev.cmd_ablate(c)
    assert meta["files"] == {"30": "sweep_k30.csv", "60": "sweep_k60.csv"}
    scene = load_scene("box5")
    grasps = GraspSet.from_jsonl(c.paths.grasps)
    init = scene.pose_at(meta["episode"]["init"][0], PlanarParams(*meta["episode"]["init"][1:]))
    goal = scene.pose_at(meta["episode"]["goal"][0], PlanarParams(*meta["episode"]["goal"][1:]))
    for k in (30, 60):
        with open(c.paths.sweep_csv(k)) as fh:
            reader = csv.DictReader(fh)
            assert reader.fieldnames == ev.SWEEP_COLUMNS
            rows = list(reader)
        for v in ("jseq", "jplus", "jtrunc"):
            assert len([r for r in rows if r["cost_variant"] == v]) == 40
        sub = grasps.subset(range(k))
        first = rows[0]
        # step 0 puts T_mid on T_goal
        assert int(first["gt_shared_count_pair_b"]) == int(feasible_set(scene, goal, sub).sum())
        assert int(first["gt_shared_count_pair_a"]) == int((feasible_set(scene, init, sub)
                                                            & feasible_set(scene, goal, sub)).sum()) == 0
        for r in rows:
            assert int(r["gt_shared_count_chain"]) == min(int(r["gt_shared_count_pair_a"]),
                                                          int(r["gt_shared_count_pair_b"]))


def test_cross_effector_verification_scene():
    c = ev.config_from_dict({"eval": {"verify_half_angle_deg": 30.0, "verify_reach_radius": 0.25}})
    scene = load_scene("box5")
    v = c.verify_scene(scene)
    assert v.approach_half_angle == pytest.approx(math.radians(30.0)) and v.reach_radius == 0.25
    assert ev.load_config().verify_scene(scene) is scene
