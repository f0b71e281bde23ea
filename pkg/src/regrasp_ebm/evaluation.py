"""Run configuration, on-disk artifacts and the evaluation protocols behind the CLI.

Every "hard" number (S.V., S.H., ground-truth shared counts) is computed with
the analytic oracle in ``world``; the learned threshold is only used where the
planner itself uses it (S.T.).  Reports say so in their header.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .connectivity import COST_VARIANTS, ConnectivityConfig, SequenceCandidate, evaluate_chain
from .datasets import generate_labels, random_poses
from .energy import (EnergyModel, LabeledDataset, TrainConfig, TrainingDiverged, load_checkpoint,
                     save_checkpoint, train)
from .planner import (LangevinConfig, PlannerConfig, PlanResult, calibrate_h, f1_at, zero_fp_threshold,
                      optimize_batch, plan)
from .pose import PlanarParams, Pose, encode_rt_batch, wrap_angle
from .world import (GraspSet, GroundTruthGrid, SyntheticScene, feasibility_matrix, feasible_set, load_scene,
                    read_labels, sample_grasps, shared_grasps_ground_truth, write_labels)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ORACLE_NOTE = ("feasibility = analytic synthetic oracle (reach sphere, table clearance, approach cone, "
               "workspace walls); not a robot IK/collision stack")

# seed-sequence words, one per consumer of randomness
_W_GRASPS, _W_LABELS, _W_SPLIT, _W_CAL, _W_TEST, _W_INIT, _W_TRAIN, _W_EPISODES, _W_PLAN = range(1, 10)


class RunError(RuntimeError):
    """A user-facing failure (missing artifact, bad input, exhausted budget)."""


def derive_seed(seed: int, *words: int) -> int:
    """Independent 63-bit seed for one consumer of randomness."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(words)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --- configuration --------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    preset: str = "box5"
    grasp_count: int = 200


@dataclass(frozen=True)
class DataConfig:
    n_positive: int = 20000
    negative_ratio: float = 1.0
    val_fraction: float = 0.1
    # held-out F1 over 300 pairs has a standard deviation near 0.012; 2000 brings it to about 0.005
    cal_pairs: int = 2000
    test_pairs: int = 2000

    def __post_init__(self):
        if self.n_positive < 1 or self.negative_ratio <= 0:
            raise ValueError("need positive labels and a positive negative ratio")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (128, 128, 128)
    include_width: bool = True


@dataclass(frozen=True)
class EvalConfig:
    onestep_pairs: int = 10
    onestep_batch: int = 200
    ktop_grid: tuple[int, ...] = (200, 100, 50, 10)
    episodes: int = 50
    episode_min_steps: tuple[int, ...] = (1, 2, 3, 4, 5)
    multistep_batch: int = 1000
    multistep_ktop: tuple[int, ...] = (10, 50)
    sample_budget: int = 10000
    grid_xy: float = 0.01
    grid_theta_deg: float = 60.0
    sweep_steps: int = 40
    sweep_subsets: tuple[int, ...] = (50, 100, 150, 200)
    # oracle used for hard checks; defaults to the training scene (cross-effector runs override)
    verify_half_angle_deg: float | None = None
    verify_reach_radius: float | None = None

    def __post_init__(self):
        if self.sample_budget < 1 or self.sweep_steps < 2:
            raise ValueError("sample_budget must be >= 1 and sweep_steps >= 2")
        if max(self.ktop_grid) > self.onestep_batch:
            raise ValueError("ktop_grid entries cannot exceed onestep_batch")


_PLANNER_LANGEVIN = LangevinConfig(length_scale=0.03)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "run"
    threads: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    connectivity: ConnectivityConfig = field(default_factory=ConnectivityConfig)
    langevin: LangevinConfig = _PLANNER_LANGEVIN
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def paths(self) -> "RunPaths":
        return RunPaths(Path(self.out))

    def load_scene(self) -> SyntheticScene:
        return load_scene(self.scene.preset)

    def verify_scene(self, scene: SyntheticScene) -> SyntheticScene:
        changes = {}
        if self.eval.verify_half_angle_deg is not None:
            changes["approach_half_angle"] = math.radians(self.eval.verify_half_angle_deg)
        if self.eval.verify_reach_radius is not None:
            changes["reach_radius"] = self.eval.verify_reach_radius
        return scene.with_effector(**changes) if changes else scene

    def langevin_for(self, word: int) -> LangevinConfig:
        return dataclasses.replace(self.langevin, seed=derive_seed(self.seed, _W_PLAN, word))


_SECTIONS = {
    "scene": SceneConfig, "data": DataConfig, "model": ModelConfig, "train": TrainConfig,
    "connectivity": ConnectivityConfig, "langevin": LangevinConfig, "planner": PlannerConfig, "eval": EvalConfig,
}
# seeds are derived from the single global seed; width is a model property
_DERIVED = {"train": {"seed", "include_width", "negative_ratio"}, "langevin": {"seed"}, "planner": {"verify_h"}}


def config_from_dict(d: dict, **overrides) -> RunConfig:
    """Build a RunConfig from parsed TOML, rejecting unknown keys."""
    kw = {}
    for key, val in d.items():
        if key in ("seed", "out", "threads"):
            kw[key] = val
            continue
        if key not in _SECTIONS:
            raise ValueError(f"unknown config key {key!r}")
        if not isinstance(val, dict):
            raise ValueError(f"[{key}] must be a table")
        cls = _SECTIONS[key]
        allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(key, set())
        extra = sorted(set(val) - allowed)
        if extra:
            raise ValueError(f"unknown keys in [{key}]: {extra}")
        base = getattr(RunConfig(), key)
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in val.items()}
        kw[key] = dataclasses.replace(base, **vals)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "model" in kw or "train" in kw:
        width = kw.get("model", ModelConfig()).include_width
        kw["train"] = dataclasses.replace(kw.get("train", TrainConfig()), include_width=width)
    return RunConfig(**kw)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    if path is None:
        return config_from_dict({}, **overrides)
    p = Path(path)
    if not p.is_file():
        raise RunError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        return config_from_dict(tomllib.load(fh), **overrides)


# --- artifacts ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RunPaths:
    root: Path

    def __getattr__(self, name):
        names = {
            "grasps": "grasps.jsonl", "labels_train": "labels_train.jsonl", "labels_val": "labels_val.jsonl",
            "pairs_val": "pairs_val.jsonl", "pairs_test": "pairs_test.jsonl", "manifest": "manifest.json",
            "checkpoint": "checkpoint.ebm", "train_report": "train_report.json",
            "calibration": "calibration.json", "pr_curve": "pr_curve.csv", "plan": "plan.json",
            "onestep_csv": "onestep_pairs.csv", "onestep_report": "onestep_metrics.json",
            "episodes": "multistep_episodes.jsonl", "multistep_csv": "multistep_episodes.csv",
            "multistep_report": "multistep_metrics.json", "sweep_meta": "sweep_meta.json",
        }
        if name not in names:
            raise AttributeError(name)
        return self.root / names[name]

    def sweep_csv(self, subset: int) -> Path:
        return self.root / f"sweep_k{subset}.csv"


def require(path: Path) -> Path:
    if not path.is_file():
        raise RunError(f"missing artifact: {path}")
    return path


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    return json.loads(require(path).read_text())


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_pairs(path: Path, pairs) -> None:
    with open(path, "w") as fh:
        for a, b, shared in pairs:
            fh.write(json.dumps({"pose_a": [float(v) for v in a], "pose_b": [float(v) for v in b],
                                 "shared": [int(i) for i in shared]}) + "\n")


def read_pairs(path: Path) -> tuple[np.ndarray, np.ndarray, list[list[int]]]:
    a, b, shared = [], [], []
    for line in require(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            a.append(rec["pose_a"])
            b.append(rec["pose_b"])
            shared.append(rec["shared"])
    return np.array(a, float).reshape(-1, 12), np.array(b, float).reshape(-1, 12), shared


def _row12(rot, trans) -> np.ndarray:
    return np.concatenate([rot, trans[..., None]], axis=-1).reshape(-1, 12)


def sample_calibration_pairs(scene: SyntheticScene, grasps: GraspSet, count: int, rng: np.random.Generator):
    """Random pose pairs whose poses each admit at least one feasible grasp."""
    out = []
    ids = np.asarray(grasps.ids)
    while len(out) < count:
        _, _, rot, trans = random_poses(scene, rng, 2 * count)
        feas = feasibility_matrix(scene, rot, trans, grasps)
        ok = np.flatnonzero(feas.any(axis=1))
        rows = _row12(rot, trans)
        for i, j in zip(ok[0::2], ok[1::2]):
            out.append((rows[i], rows[j], ids[feas[i] & feas[j]]))
    return out[:count]


def pair_sums(model, grasps: GraspSet, a_rows: np.ndarray, b_rows: np.ndarray, shared,
              flat: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """E_a + E_b over (pair, grasp) with shared-feasibility labels, flattened unless ``flat=False``."""
    def enc(rows):
        r = rows.reshape(-1, 3, 4)
        return encode_rt_batch(r[:, :, :3], r[:, :, 3])
    s = model.pose_energies(enc(a_rows), grasps) + model.pose_energies(enc(b_rows), grasps)
    labels = np.zeros(s.shape, bool)
    for i, ids in enumerate(shared):
        labels[i, [grasps.index_of(g) for g in ids]] = True
    return (s.ravel(), labels.ravel()) if flat else (s, labels)


def _pair_rates(s: np.ndarray, labels: np.ndarray, h: float) -> dict:
    # pair-level: accepted when any grasp has E_a + E_b <= h
    acc, shared = s.min(axis=1) <= h, labels.any(axis=1)
    return {"pair_fp_rate": float(acc[~shared].mean()) if (~shared).any() else 0.0,
            "pair_tp_rate": float(acc[shared].mean()) if shared.any() else 0.0}


# --- commands -----------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> dict:
    paths = cfg.paths
    paths.root.mkdir(parents=True, exist_ok=True)
    scene = cfg.load_scene()
    seeds = {name: derive_seed(cfg.seed, w) for name, w in
             (("grasps", _W_GRASPS), ("labels", _W_LABELS), ("split", _W_SPLIT), ("cal_pairs", _W_CAL),
              ("test_pairs", _W_TEST))}
    grasps = sample_grasps(scene, cfg.scene.grasp_count, seeds["grasps"])
    grasps.to_jsonl(paths.grasps)
    labels = generate_labels(scene, grasps, cfg.data.n_positive, cfg.data.negative_ratio,
                             np.random.default_rng(seeds["labels"]))
    is_val = np.random.default_rng(seeds["split"]).random(len(labels)) < cfg.data.val_fraction
    for path, mask in ((paths.labels_train, ~is_val), (paths.labels_val, is_val)):
        write_labels(path, labels.poses[mask], labels.grasp_ids[mask], labels.feasible[mask])
    _write_pairs(paths.pairs_val, sample_calibration_pairs(scene, grasps, cfg.data.cal_pairs,
                                                           np.random.default_rng(seeds["cal_pairs"])))
    _write_pairs(paths.pairs_test, sample_calibration_pairs(scene, grasps, cfg.data.test_pairs,
                                                            np.random.default_rng(seeds["test_pairs"])))
    files = ("grasps", "labels_train", "labels_val", "pairs_val", "pairs_test")
    manifest = {
        "seed": cfg.seed, "derived_seeds": seeds, "scene": scene.name, "grasp_count": len(grasps),
        "n_positive": int(labels.feasible.sum()), "n_negative": int((~labels.feasible).sum()),
        "n_train": int((~is_val).sum()), "n_val": int(is_val.sum()),
        "cal_pairs": cfg.data.cal_pairs, "test_pairs": cfg.data.test_pairs,
        "sha256": {f: sha256(getattr(paths, f)) for f in files},
        "oracle": ORACLE_NOTE,
    }
    write_json(paths.manifest, manifest)
    return manifest


def load_dataset(paths: RunPaths, grasps: GraspSet, include_width: bool) -> LabeledDataset:
    parts = [read_labels(require(paths.labels_train)), read_labels(require(paths.labels_val))]
    genc_all = grasps.encodings(include_width)
    pose_enc, grasp_enc, feas, is_val = [], [], [], []
    for k, (poses, gids, f) in enumerate(parts):
        rows = poses.reshape(-1, 3, 4)
        pose_enc.append(encode_rt_batch(rows[:, :, :3], rows[:, :, 3]))
        grasp_enc.append(genc_all[[grasps.index_of(g) for g in gids]])
        feas.append(f)
        is_val.append(np.full(f.size, k == 1))
    return LabeledDataset(np.vstack(pose_enc), np.vstack(grasp_enc), np.concatenate(feas), np.concatenate(is_val))


def cmd_train(cfg: RunConfig) -> dict:
    paths = cfg.paths
    grasps = GraspSet.from_jsonl(require(paths.grasps))
    ds = load_dataset(paths, grasps, cfg.model.include_width)
    model = EnergyModel.create(cfg.model.hidden, cfg.model.include_width, seed=derive_seed(cfg.seed, _W_INIT))
    tcfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, _W_TRAIN),
                               include_width=cfg.model.include_width)
    try:
        model = train(model, ds, tcfg)
    except TrainingDiverged as exc:
        raise RunError(f"{exc} (learning_rate={tcfg.learning_rate}, batch_size={tcfg.batch_size}); "
                       "lower [train].learning_rate") from exc
    save_checkpoint(model, paths.checkpoint)
    val = ds.split(True)
    e = model.forward(val.pose_enc, val.grasp_enc)
    report = {
        "seed": cfg.seed, "init_seed": model.seed, "train_seed": tcfg.seed,
        "n_train": int((~ds.is_val).sum()), "n_val": int(ds.is_val.sum()),
        "val_mean_energy_pos": float(e[val.feasible].mean()), "val_mean_energy_neg": float(e[~val.feasible].mean()),
        "train_config": dataclasses.asdict(tcfg), "checkpoint_sha256": sha256(paths.checkpoint),
    }
    write_json(paths.train_report, report)
    return report


def cmd_calibrate(cfg: RunConfig) -> dict:
    paths = cfg.paths
    grasps = GraspSet.from_jsonl(require(paths.grasps))
    model = load_checkpoint(require(paths.checkpoint))
    val_s, val_y = pair_sums(model, grasps, *read_pairs(paths.pairs_val), flat=False)
    cal = calibrate_h(val_s, val_y)
    h_verify = zero_fp_threshold(val_s.min(axis=1), val_y.any(axis=1), cal.h)
    test_s, test_y = pair_sums(model, grasps, *read_pairs(paths.pairs_test), flat=False)
    f1, prec, rec = f1_at(test_s, test_y, cal.h)
    report = {"h": cal.h, "f1": cal.f1, "precision": cal.precision, "recall": cal.recall,
              "test_f1": f1, "test_precision": prec, "test_recall": rec,
              "h_verify": h_verify,
              "test_pairs_at_h": _pair_rates(test_s, test_y, cal.h),
              "test_pairs_at_h_verify": _pair_rates(test_s, test_y, h_verify),
              "checkpoint_sha256": sha256(paths.checkpoint)}
    write_json(paths.calibration, report)
    with open(paths.pr_curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "f1"])
        for row in zip(cal.thresholds, cal.curve_precision, cal.curve_recall, cal.curve_f1):
            w.writerow([repr(float(v)) for v in row])
    return report


def load_planning_inputs(cfg: RunConfig):
    """Scene, grasps, model and the connectivity config with the calibrated threshold."""
    paths = cfg.paths
    scene = cfg.load_scene()
    grasps = GraspSet.from_jsonl(require(paths.grasps))
    model = load_checkpoint(require(paths.checkpoint))
    ccfg = cfg.connectivity
    if not math.isfinite(ccfg.h):
        ccfg = dataclasses.replace(ccfg, h=float(read_json(paths.calibration)["h"]))
    return scene, grasps, model, ccfg


def planner_config(cfg: RunConfig) -> PlannerConfig:
    """The run's planner config with the strict verification threshold filled in when selected."""
    pcfg = cfg.planner
    if pcfg.verify_threshold == "zero_fp":
        rep = read_json(cfg.paths.calibration)
        if "h_verify" not in rep:
            raise RunError(f"{cfg.paths.calibration} has no h_verify; rerun calibrate")
        pcfg = dataclasses.replace(pcfg, verify_h=float(rep["h_verify"]))
    return pcfg


def parse_pose(text: str | Sequence, scene: SyntheticScene) -> Pose:
    """12 numbers (row-major 3x4) or ``m,x,y,theta``."""
    if isinstance(text, str):
        parts = [p for p in text.replace(",", " ").split()]
    else:
        parts = [p for t in text for p in str(t).replace(",", " ").split()]
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise RunError(f"cannot parse pose {text!r}") from exc
    if len(vals) == 12:
        try:
            return Pose.from_row12(vals)
        except ValueError as exc:
            raise RunError(f"invalid pose: {exc}") from exc
    if len(vals) == 4 and vals[0] == int(vals[0]):
        try:
            return scene.pose_at(int(vals[0]), PlanarParams(*vals[1:]))
        except ValueError as exc:
            raise RunError(str(exc)) from exc
    raise RunError(f"a pose needs 12 numbers or m,x,y,theta; got {len(vals)} values")


def hard_check(scene: SyntheticScene, poses: Sequence[Pose], grasps: GraspSet) -> list[dict]:
    """Oracle shared grasps for every adjacent pair."""
    out = []
    for i, (a, b) in enumerate(zip(poses[:-1], poses[1:])):
        ids = sorted(shared_grasps_ground_truth(scene, a, b, grasps))
        out.append({"pair": i, "pass": bool(ids), "shared_ids": ids})
    return out


def cmd_plan(cfg: RunConfig, init: Pose, goal: Pose, with_hard_check: bool = False) -> tuple[PlanResult, dict]:
    scene, grasps, model, ccfg = load_planning_inputs(cfg)
    result = plan(scene, init, goal, model, grasps, planner_config(cfg), cfg.langevin_for(0), ccfg)
    out = result.to_dict()
    if with_hard_check and result.success:
        pairs = hard_check(cfg.verify_scene(scene), result.poses(scene), grasps)
        out["hard_check"] = {"pass": all(p["pass"] for p in pairs), "pairs": pairs, "oracle": ORACLE_NOTE}
    write_json(cfg.paths.plan, out)
    return result, out


# --- episodes -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    id: int
    init_m: int
    init_xi: PlanarParams
    goal_m: int
    goal_xi: PlanarParams
    min_steps: int | None

    def poses(self, scene: SyntheticScene) -> tuple[Pose, Pose]:
        return scene.pose_at(self.init_m, self.init_xi), scene.pose_at(self.goal_m, self.goal_xi)

    def to_dict(self) -> dict:
        return {"id": self.id, "init": [self.init_m, *self.init_xi.as_array().tolist()],
                "goal": [self.goal_m, *self.goal_xi.as_array().tolist()], "min_steps": self.min_steps}


def make_grid(cfg: RunConfig, scene: SyntheticScene, grasps: GraspSet) -> GroundTruthGrid:
    return GroundTruthGrid(scene, grasps, cfg.eval.grid_xy, math.radians(cfg.eval.grid_theta_deg))


def sample_episodes(scene: SyntheticScene, grid: GroundTruthGrid, count: int, accept: Sequence[int | None],
                    rng: np.random.Generator, budget: int = 10000) -> list[Episode]:
    """Rejection-sample endpoint pairs whose oracle minimum step count is in ``accept``.

    Accepted classes are filled round-robin so every requested class is
    represented; raises ``RunError`` with a budget report when ``budget``
    draws are not enough.
    """
    accept = list(accept)
    want = {k: count // len(accept) + (1 if i < count % len(accept) else 0) for i, k in enumerate(accept)}
    got: dict = {k: [] for k in accept}
    seen: dict = {}
    cap = None if None in accept else max(accept)
    for _ in range(budget):
        m, xi, _, _ = random_poses(scene, rng, 2)
        a, b = scene.pose_at(int(m[0]), PlanarParams.from_array(xi[0])), scene.pose_at(int(m[1]), PlanarParams.from_array(xi[1]))
        steps = grid.min_steps(a, b, max_steps=cap)
        seen[steps] = seen.get(steps, 0) + 1
        if steps in got and len(got[steps]) < want[steps]:
            got[steps].append((int(m[0]), PlanarParams.from_array(xi[0]), int(m[1]), PlanarParams.from_array(xi[1]), steps))
            if all(len(got[k]) >= want[k] for k in accept):
                break
    else:
        report = ", ".join(f"{k}: {len(got[k])}/{want[k]}" for k in accept)
        drawn = ", ".join(f"{k}: {v}" for k, v in sorted(seen.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)))
        raise RunError(f"episode sampling exhausted its budget of {budget} draws (found {report}; "
                       f"oracle minimum steps drawn: {drawn})")
    return [Episode(i, *e) for i, e in enumerate(e for k in accept for e in got[k])]


# --- one-step verification success ---------------------------------------------------------------

def connects(scene: SyntheticScene, grasps: GraspSet, init: Pose, mid: Pose, goal: Pose) -> bool:
    f_mid = feasible_set(scene, mid, grasps)
    return bool((feasible_set(scene, init, grasps) & f_mid).any() and (f_mid & feasible_set(scene, goal, grasps)).any())


def onestep_sv(scene, verify, grasps, model, ep: Episode, variant: str, ccfg, lcfg, batch: int,
               ktops: Sequence[int], precision: str = "float32") -> dict[int, float]:
    """S.V. of the top-K_top optimised single intermediate poses for each K_top."""
    init, goal = ep.poses(scene)
    opt = optimize_batch(scene, init, goal, 1, model, grasps, lcfg, ccfg, variant, batch, precision)
    order = np.argsort(opt.costs, kind="stable")
    ok = np.array([connects(verify, grasps, init, opt.batch.candidate(int(b)).poses()[1], goal) for b in order])
    return {k: float(ok[:k].mean()) for k in ktops}


def cmd_eval_onestep(cfg: RunConfig) -> dict:
    scene, grasps, model, ccfg = load_planning_inputs(cfg)
    verify = cfg.verify_scene(scene)
    grid = make_grid(cfg, verify, grasps)
    rng = np.random.default_rng(derive_seed(cfg.seed, _W_EPISODES, 1))
    eps = sample_episodes(verify, grid, cfg.eval.onestep_pairs, [1], rng, cfg.eval.sample_budget)
    ktops = cfg.eval.ktop_grid

    def run(ep):
        rows = []
        init, goal = ep.poses(scene)
        mids = grid.midposes(init, goal)
        pick = mids[:max(ktops)]
        ok = [connects(verify, grasps, init, scene.pose_at(m, xi), goal) for m, xi in pick]
        for k in ktops:
            rows.append((ep.id, "grid", k, float(np.mean(ok[:k]))))
        for v in COST_VARIANTS:
            sv = onestep_sv(scene, verify, grasps, model, ep, v, ccfg, cfg.langevin_for(1000 + ep.id),
                            cfg.eval.onestep_batch, ktops, cfg.planner.precision)
            rows.extend((ep.id, v, k, sv[k]) for k in ktops)
        return rows

    rows = [r for chunk in _map(run, eps, cfg.threads) for r in chunk]
    with open(cfg.paths.onestep_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "cost_variant", "k_top", "sv"])
        w.writerows(rows)
    table = {v: {str(k): float(np.mean([r[3] for r in rows if r[1] == v and r[2] == k])) for k in ktops}
             for v in ("grid", *COST_VARIANTS)}
    report = {"oracle": ORACLE_NOTE, "k_top_grid": list(ktops), "pairs": [e.to_dict() for e in eps],
              "sv": table, "h": ccfg.h, "seed": cfg.seed}
    write_json(cfg.paths.onestep_report, report)
    return report


# --- multi-step episodes ---------------------------------------------------------------------------

def episode_row(scene, verify, grasps, model, ep: Episode, pcfg: PlannerConfig, lcfg, ccfg) -> dict:
    init, goal = ep.poses(scene)
    res = plan(scene, init, goal, model, grasps, pcfg, lcfg, ccfg)
    hard = None
    if res.success:
        hard = all(p["pass"] for p in hard_check(verify, res.poses(scene), grasps))
    return {"episode": ep.id, "k_top": pcfg.k_top, "seed": lcfg.seed, "min_steps": ep.min_steps,
            "status": res.status, "n": res.n, "hard_pass": hard,
            "plan_time_s": res.diagnostics["wall_time_s"], "plan": res.to_dict()}


def summarize(rows: Sequence[dict]) -> dict:
    """S.T., S.H., E.L., E.T. from per-episode rows; E.* over successes only."""
    n = len(rows)
    succ = [r for r in rows if r["status"] == "success"]
    return {
        "episodes": n,
        "S.T.": len(succ) / n if n else 0.0,
        "S.H.": sum(1 for r in succ if r["hard_pass"]) / n if n else 0.0,
        "E.L.": float(np.mean([r["n"] for r in succ])) if succ else None,
        "E.T.": float(np.mean([r["plan_time_s"] for r in succ])) if succ else None,
        "oracle_mean_min_steps": float(np.mean([r["min_steps"] for r in succ])) if succ else None,
    }


def recheck_rows(scene: SyntheticScene, grasps: GraspSet, rows: Sequence[dict]) -> list[bool | None]:
    """Hard-check flags recomputed from the stored plans alone."""
    out = []
    for r in rows:
        if r["status"] != "success":
            out.append(None)
            continue
        res = PlanResult.from_dict(r["plan"])
        out.append(all(p["pass"] for p in hard_check(scene, res.poses(scene), grasps)))
    return out


def cmd_eval_multistep(cfg: RunConfig) -> dict:
    scene, grasps, model, ccfg = load_planning_inputs(cfg)
    verify = cfg.verify_scene(scene)
    grid = make_grid(cfg, verify, grasps)
    rng = np.random.default_rng(derive_seed(cfg.seed, _W_EPISODES, 2))
    accept = [k for k in cfg.eval.episode_min_steps if k <= cfg.planner.n_max] or [1]
    eps = sample_episodes(verify, grid, cfg.eval.episodes, accept, rng, cfg.eval.sample_budget)
    rows = []
    for k in cfg.eval.multistep_ktop:
        pcfg = dataclasses.replace(planner_config(cfg), batch_size=cfg.eval.multistep_batch, k_top=k)
        rows.extend(_map(lambda ep: episode_row(scene, verify, grasps, model, ep, pcfg,
                                                cfg.langevin_for(2000 + ep.id), ccfg), eps, cfg.threads))
    with open(cfg.paths.episodes, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    cols = ["episode", "k_top", "seed", "min_steps", "status", "n", "hard_pass", "plan_time_s"]
    with open(cfg.paths.multistep_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerows([[r[c] for c in cols] for r in rows])
    report = {"oracle": ORACLE_NOTE, "batch_size": cfg.eval.multistep_batch, "n_max": cfg.planner.n_max,
              "h": ccfg.h, "seed": cfg.seed, "episodes": [e.to_dict() for e in eps],
              "by_k_top": {str(k): summarize([r for r in rows if r["k_top"] == k]) for k in cfg.eval.multistep_ktop}}
    write_json(cfg.paths.multistep_report, report)
    return report


# --- interpolation sweep ------------------------------------------------------------------------------

SWEEP_COLUMNS = ["step", "cost_variant", "value", "grad_norm", "gt_shared_count_pair_a",
                 "gt_shared_count_pair_b", "gt_shared_count_chain"]


def interpolate_xi(start: PlanarParams, end: PlanarParams, steps: int) -> list[PlanarParams]:
    """Linear in x, y and along the shortest arc in theta, endpoints included."""
    dth = wrap_angle(end.theta - start.theta)
    if dth > math.pi:
        dth -= 2 * math.pi
    out = []
    for i in range(steps):
        t = i / (steps - 1)
        out.append(PlanarParams(start.x + t * (end.x - start.x), start.y + t * (end.y - start.y),
                                start.theta + t * dth).normalized())
    return out


def sweep_rows(scene: SyntheticScene, init: Pose, goal: Pose, mid_placement: int, start: PlanarParams,
               end: PlanarParams, model, grasps: GraspSet, ccfg: ConnectivityConfig, steps: int = 40,
               variants: Sequence[str] = COST_VARIANTS, truth: SyntheticScene | None = None) -> list[dict]:
    """Cost value and gradient norm for each variant as T_mid moves from ``start`` to ``end``.

    Ground-truth counts come from ``truth`` (default ``scene``): pair_a is
    init-mid, pair_b is mid-goal and chain is the smaller of the two, so it
    is zero exactly when the chain is broken.
    """
    truth = scene if truth is None else truth
    placement = scene.placement(mid_placement)
    f_init, f_goal = feasible_set(truth, init, grasps), feasible_set(truth, goal, grasps)
    rows = []
    for i, xi in enumerate(interpolate_xi(start, end, steps)):
        chain = SequenceCandidate(init, goal, ((placement, xi),))
        f_mid = feasible_set(truth, chain.poses()[1], grasps)
        a, b = int((f_init & f_mid).sum()), int((f_mid & f_goal).sum())
        for v in variants:
            value, grad = evaluate_chain(chain, model, grasps, ccfg, v, with_grad=True)
            rows.append({"step": i, "cost_variant": v, "value": float(value),
                         "grad_norm": float(np.linalg.norm(grad)), "gt_shared_count_pair_a": a,
                         "gt_shared_count_pair_b": b, "gt_shared_count_chain": min(a, b)})
    return rows


def write_sweep_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_ablate(cfg: RunConfig) -> dict:
    """Sweep T_mid from T_goal to T_init (in the goal's placement) on a one-step episode."""
    scene, grasps, model, ccfg = load_planning_inputs(cfg)
    verify = cfg.verify_scene(scene)
    grid = make_grid(cfg, verify, grasps)
    rng = np.random.default_rng(derive_seed(cfg.seed, _W_EPISODES, 3))
    ep = sample_episodes(verify, grid, 1, [1], rng, cfg.eval.sample_budget)[0]
    init, goal = ep.poses(scene)
    files = {}
    for k in cfg.eval.sweep_subsets:
        sub = grasps.subset(range(min(k, len(grasps))))
        rows = sweep_rows(scene, init, goal, ep.goal_m, ep.goal_xi, ep.init_xi, model, sub, ccfg,
                          cfg.eval.sweep_steps, truth=verify)
        path = cfg.paths.sweep_csv(k)
        write_sweep_csv(path, rows)
        files[str(k)] = path.name
    meta = {"oracle": ORACLE_NOTE, "episode": ep.to_dict(), "mid_placement": ep.goal_m, "h": ccfg.h,
            "steps": cfg.eval.sweep_steps, "files": files, "seed": cfg.seed}
    write_json(cfg.paths.sweep_meta, meta)
    return meta


def _map(fn, items, threads: int) -> list:
    """Order-stable map, threaded when ``threads`` > 1."""
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
