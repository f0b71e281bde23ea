"""Batched Langevin optimisation and iterative-deepening regrasp planning.

``plan`` first checks whether the endpoints already share a grasp (N = 0).
Otherwise, for N = 1, 2, ..., N_max, it initialises B random chains of N
intermediate poses, runs K_opt noisy gradient steps on the chosen sequence
cost, and verifies candidates with the threshold test E_a + E_b <= h.  The
first N with a verified chain wins.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .connectivity import (COST_VARIANTS, ConnectivityConfig, SequenceCandidate, batch_cost_and_grad)
from .pose import Pose, PlanarParams, TWO_PI, encode_pose, planar_encoding_batch, planar_jacobian_batch
from .world import SyntheticScene

CHECK_MODES = ("sequential", "batch")
VERIFY_THRESHOLDS = ("f1", "zero_fp")
PRECISIONS = {"float32": np.float32, "float64": np.float64}
_INIT_STREAM = 2 ** 32 - 1  # seed-sequence word reserved for initialisation draws


@dataclass(frozen=True)
class LangevinConfig:
    eta: float = 0.3
    tau: float = 0.1
    k_opt: int = 20
    seed: int = 0
    clamp_to_workspace: bool = True
    length_scale: float = 1.0

    def __post_init__(self):
        # eta = 0 is accepted so a run can be pinned to its initialisation
        if not (self.eta >= 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be finite and non-negative")
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be finite and non-negative")
        if self.k_opt < 1:
            raise ValueError("k_opt must be >= 1")
        if not (self.length_scale > 0 and math.isfinite(self.length_scale)):
            raise ValueError("length_scale must be positive")

    @property
    def coordinate_scale(self) -> np.ndarray:
        """Metres (or radians) per unit of the variables the update acts on."""
        return np.array([self.length_scale, self.length_scale, 1.0])


@dataclass(frozen=True)
class PlannerConfig:
    n_max: int = 5
    batch_size: int = 200
    k_top: int = 10
    cost: str = "jseq"
    check: str = "batch"
    include_direct_check: bool = True
    precision: str = "float32"
    # "f1": verify pairs at the calibrated h.  "zero_fp": verify at verify_h, the
    # strict threshold from calibration (see zero_fp_threshold); costs keep h.
    verify_threshold: str = "f1"
    verify_h: float | None = None

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 1 <= self.k_top <= self.batch_size:
            raise ValueError("k_top must lie in [1, batch_size]")
        if self.cost not in COST_VARIANTS:
            raise ValueError(f"cost must be one of {COST_VARIANTS}")
        if self.check not in CHECK_MODES:
            raise ValueError(f"check must be one of {CHECK_MODES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.verify_threshold not in VERIFY_THRESHOLDS:
            raise ValueError(f"verify_threshold must be one of {VERIFY_THRESHOLDS}")
        if self.verify_h is not None and math.isnan(self.verify_h):
            raise ValueError("verify_h must not be NaN")


# --- threshold sets and calibration -------------------------------------------------

def shared_mask_from_energies(e_a: np.ndarray, e_b: np.ndarray, h: float) -> np.ndarray:
    return (np.asarray(e_a) + np.asarray(e_b)) <= h


def shared_grasp_set(model, pose_a: Pose, pose_b: Pose, grasps, h: float) -> set[int]:
    """Ids of grasps with E(T_a, g) + E(T_b, g) <= h."""
    e = model.pose_energies(np.stack([encode_pose(pose_a), encode_pose(pose_b)]), grasps)
    return {grasps.ids[i] for i in np.flatnonzero(shared_mask_from_energies(e[0], e[1], h))}


@dataclass(frozen=True)
class Calibration:
    h: float
    f1: float
    precision: float
    recall: float
    thresholds: np.ndarray = field(repr=False)
    curve_precision: np.ndarray = field(repr=False)
    curve_recall: np.ndarray = field(repr=False)
    curve_f1: np.ndarray = field(repr=False)


def calibrate_h(sums, labels) -> Calibration:
    """Threshold maximising F1 of the classifier ``sum <= h``.

    Every distinct observed sum is tried, so every reachable confusion matrix
    is visited; ties go to the smallest threshold.
    """
    s = np.asarray(sums, dtype=float).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    if s.size != y.size:
        raise ValueError("sums and labels differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("energy sums must be finite")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("calibration needs both shared and non-shared examples")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    pred = np.arange(1, s.size + 1)
    last = np.append(s[1:] != s[:-1], True)  # end of each run of equal sums
    thr, tp, pred = s[last], tp[last], pred[last]
    f1 = 2.0 * tp / (pred + n_pos)
    prec = tp / pred
    rec = tp / n_pos
    best = int(np.argmax(f1))  # first maximum = smallest threshold
    return Calibration(float(thr[best]), float(f1[best]), float(prec[best]), float(rec[best]),
                       thr, prec, rec, f1)


def f1_at(sums, labels, h: float) -> tuple[float, float, float]:
    s = np.asarray(sums, dtype=float).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    pred = s <= h
    tp = float(np.sum(pred & y))
    npred, npos = float(pred.sum()), float(y.sum())
    f1 = 2 * tp / (npred + npos) if npred + npos else 0.0
    return f1, (tp / npred if npred else 0.0), (tp / npos if npos else 0.0)


def zero_fp_threshold(pair_min_sums, pair_shared, h: float) -> float:
    """Largest threshold <= h that accepts no calibration pair lacking a shared grasp.

    A pair is accepted when its smallest E_a + E_b is <= the threshold, so the
    answer sits just below the smallest such sum over the non-shared pairs.
    """
    m = np.asarray(pair_min_sums, dtype=float).ravel()
    y = np.asarray(pair_shared, dtype=bool).ravel()
    if m.size != y.size:
        raise ValueError("pair sums and labels differ in length")
    neg = m[~y]
    if neg.size == 0:
        return float(h)
    return float(min(h, np.nextafter(neg.min(), -np.inf)))


# --- candidate batches ------------------------------------------------------------

@dataclass
class CandidateBatch:
    """B chains of N intermediate poses sharing the same endpoints."""

    scene: SyntheticScene
    init: Pose
    goal: Pose
    placements: np.ndarray          # (B, N) ints in 1..S
    xi: np.ndarray                  # (B, N, 3), theta unwrapped
    frozen: np.ndarray | None = None  # (B,) candidates excluded from further updates

    def __post_init__(self):
        self.placements = np.asarray(self.placements, dtype=np.int64)
        self.xi = np.asarray(self.xi, dtype=float)
        if self.placements.ndim != 2 or self.xi.shape != self.placements.shape + (3,):
            raise ValueError("placements must be (B, N) and xi (B, N, 3)")
        if self.placements.size and (self.placements.min() < 1 or self.placements.max() > self.scene.num_placements):
            raise ValueError("placement index out of range")
        if self.frozen is None:
            self.frozen = np.zeros(self.placements.shape[0], dtype=bool)

    @property
    def size(self) -> int:
        return self.placements.shape[0]

    @property
    def n(self) -> int:
        return self.placements.shape[1]

    def copy(self) -> "CandidateBatch":
        return CandidateBatch(self.scene, self.init, self.goal, self.placements.copy(), self.xi.copy(),
                              self.frozen.copy())

    def _rt(self):
        idx = self.placements - 1
        return self.scene.placement_rotations[idx], self.scene.placement_translations[idx]

    def encodings(self) -> np.ndarray:
        r, t = self._rt()
        return planar_encoding_batch(r, t, self.xi)

    def jacobians(self) -> np.ndarray:
        r, t = self._rt()
        return planar_jacobian_batch(r, t, self.xi)

    def candidate(self, b: int) -> SequenceCandidate:
        steps = tuple((self.scene.placement(int(m)), PlanarParams.from_array(x))
                      for m, x in zip(self.placements[b], self.xi[b]))
        return SequenceCandidate(self.init, self.goal, steps)


def _stream(seed: int, n: int, word: int) -> np.random.Generator:
    # counter-style stream keyed by (seed, N, iteration): the draw for a given
    # candidate does not depend on how the batch is scheduled
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2 ** 63 - 1), n, word])))


def initialize_batch(scene: SyntheticScene, init: Pose, goal: Pose, n: int, batch_size: int,
                     seed: int) -> CandidateBatch:
    """Random placement sequences with planar offsets uniform over the workspace and [0, 2pi)."""
    rng = _stream(seed, n, _INIT_STREAM)
    m = rng.integers(1, scene.num_placements + 1, size=(batch_size, n))
    xi = np.stack([rng.uniform(*scene.x_bounds, size=(batch_size, n)),
                   rng.uniform(*scene.y_bounds, size=(batch_size, n)),
                   rng.uniform(0.0, TWO_PI, size=(batch_size, n))], axis=-1)
    return CandidateBatch(scene, init, goal, m, xi)


def langevin_step(batch: CandidateBatch, grads: np.ndarray, cfg: LangevinConfig, step: int) -> CandidateBatch:
    """One update ``xi <- xi - eta * grad + sqrt(2 eta tau) * z`` on every unfrozen candidate.

    The update acts on ``(x / l, y / l, theta)`` with ``l = cfg.length_scale``;
    ``grads`` are d cost / d(x, y, theta) in metres and radians.  With ``l = 1``
    this is the plain update on metric coordinates.  Candidates whose gradient
    is non-finite are frozen for the rest of the run.  Placement indices never
    change.
    """
    grads = np.asarray(grads, dtype=float)
    if grads.shape != batch.xi.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match batch {batch.xi.shape}")
    out = batch.copy()
    bad = ~np.all(np.isfinite(grads.reshape(batch.size, -1)), axis=1)
    out.frozen |= bad
    live = ~out.frozen
    scale = cfg.coordinate_scale
    upd = out.xi[live] - cfg.eta * (scale * scale) * grads[live]
    if cfg.tau > 0:
        z = _stream(cfg.seed, batch.n, step).standard_normal(batch.xi.shape)
        upd = upd + math.sqrt(2.0 * cfg.eta * cfg.tau) * scale * z[live]
    if cfg.clamp_to_workspace:
        sc = batch.scene
        upd[..., 0] = np.clip(upd[..., 0], *sc.x_bounds)
        upd[..., 1] = np.clip(upd[..., 1], *sc.y_bounds)
    out.xi[live] = upd
    return out


@dataclass
class OptimizedBatch:
    batch: CandidateBatch
    costs: np.ndarray
    initial_costs: np.ndarray
    iterations: int


class _EndpointCache:
    def __init__(self, model, grasps, init: Pose, goal: Pose, dtype):
        e = model.pose_energies(np.stack([encode_pose(init), encode_pose(goal)]), grasps, dtype=dtype)
        self.e_init, self.e_goal = e[0], e[1]


def optimize_batch(scene: SyntheticScene, init: Pose, goal: Pose, n: int, model, grasps,
                   lcfg: LangevinConfig, ccfg: ConnectivityConfig, variant: str = "jseq",
                   batch_size: int = 200, precision: str = "float32", endpoints=None) -> OptimizedBatch:
    """Initialise ``batch_size`` chains of ``n`` poses and run ``k_opt`` Langevin steps."""
    if n < 1:
        raise ValueError("optimize_batch needs n >= 1")
    dtype = PRECISIONS[precision]
    ends = endpoints or _EndpointCache(model, grasps, init, goal, dtype)
    batch = initialize_batch(scene, init, goal, n, batch_size, lcfg.seed)
    initial = None
    for k in range(lcfg.k_opt):
        cost, grad, _ = batch_cost_and_grad(model, grasps, ends.e_init, ends.e_goal, batch.encodings(),
                                            batch.jacobians(), ccfg, variant, dtype=dtype)
        if initial is None:
            initial = cost
        batch = langevin_step(batch, grad, lcfg, k)
    final, _, _ = batch_cost_and_grad(model, grasps, ends.e_init, ends.e_goal, batch.encodings(),
                                      batch.jacobians(), ccfg, variant, dtype=dtype, need_grad=False)
    final = np.where(np.isfinite(final), final, np.inf)
    return OptimizedBatch(batch, final, initial, lcfg.k_opt)


# --- verification -------------------------------------------------------------------

def verify_sequential(chain: SequenceCandidate, model, grasps, h: float, trace: list | None = None) -> bool:
    """Scan pairs 0..N and stop at the first one whose threshold set is empty."""
    enc = chain.encodings()
    prev = model.pose_energies(enc[:1], grasps)[0]
    for i in range(chain.n + 1):
        cur = model.pose_energies(enc[i + 1:i + 2], grasps)[0]
        if trace is not None:
            trace.append(i)
        if not shared_mask_from_energies(prev, cur, h).any():
            return False
        prev = cur
    return True


def verify_batch(batch: CandidateBatch, costs: np.ndarray, model, grasps, h: float, k_top: int,
                 trace: list | None = None) -> int | None:
    """Index of the cheapest candidate among the ``k_top`` cheapest that passes every pair check.

    Pairs are processed in order; after each, candidates whose threshold set
    is empty are dropped.  Returns ``None`` as soon as the pool empties.
    """
    costs = np.asarray(costs, dtype=float)
    if not 1 <= k_top <= batch.size:
        raise ValueError("k_top must lie in [1, batch size]")
    pool = np.argsort(costs, kind="stable")[:k_top]
    enc = batch.encodings()
    e_init = model.pose_energies(encode_pose(batch.init)[None], grasps)[0]
    e_goal = model.pose_energies(encode_pose(batch.goal)[None], grasps)[0]
    n = batch.n
    prev = np.broadcast_to(e_init, (pool.size, e_init.size))
    for i in range(n + 1):
        cur = (np.broadcast_to(e_goal, prev.shape) if i == n
               else model.pose_energies(enc[pool, i], grasps))
        if trace is not None:
            trace.append((i, int(pool.size)))
        keep = shared_mask_from_energies(prev, cur, h).any(axis=1)
        pool, prev = pool[keep], cur[keep]
        if pool.size == 0:
            return None
    # pool is still in cost order, so the first survivor is the argmin
    return int(pool[0])


# --- planning -----------------------------------------------------------------------

@dataclass
class PlanResult:
    status: str
    n: int | None
    init: Pose
    goal: Pose
    steps: list[tuple[int, PlanarParams]]
    shared_ids: list[list[int]]
    h: float
    diagnostics: dict

    @property
    def success(self) -> bool:
        return self.status == "success"

    def poses(self, scene: SyntheticScene) -> list[Pose]:
        return [self.init] + [scene.pose_at(m, xi) for m, xi in self.steps] + [self.goal]

    def to_dict(self, include_timing: bool = False) -> dict:
        diag = dict(self.diagnostics)
        if not include_timing:
            diag.pop("wall_time_s", None)
        return {
            "status": self.status,
            "n": self.n,
            "h": self.h,
            "init": [v + 0.0 for v in self.init.to_row12()],  # drop signed zeros
            "goal": [v + 0.0 for v in self.goal.to_row12()],
            "poses": [{"m": int(m), "x": xi.x, "y": xi.y, "theta": xi.normalized().theta}
                      for m, xi in self.steps],
            "shared_ids": [sorted(int(i) for i in ids) for ids in self.shared_ids],
            "diagnostics": diag,
        }

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PlanResult":
        steps = [(int(p["m"]), PlanarParams(float(p["x"]), float(p["y"]), float(p["theta"]))) for p in d["poses"]]
        return cls(d["status"], d["n"], Pose.from_row12(d["init"]), Pose.from_row12(d["goal"]), steps,
                   [list(ids) for ids in d["shared_ids"]], float(d["h"]), dict(d["diagnostics"]))


def _shared_ids_along(model, grasps, poses: Sequence[Pose], h: float) -> list[list[int]]:
    e = model.pose_energies(np.stack([encode_pose(p) for p in poses]), grasps)
    ids = np.asarray(grasps.ids)
    return [ids[shared_mask_from_energies(e[i], e[i + 1], h)].tolist() for i in range(len(poses) - 1)]


def plan(scene: SyntheticScene, init: Pose, goal: Pose, model, grasps, pcfg: PlannerConfig,
         lcfg: LangevinConfig, ccfg: ConnectivityConfig) -> PlanResult:
    """Adaptive iterative deepening over the number of intermediate poses."""
    t0 = time.perf_counter()
    h = ccfg.h
    if pcfg.verify_threshold == "zero_fp":
        if pcfg.verify_h is None:
            raise ValueError("zero_fp verification needs verify_h from calibration")
        h = min(pcfg.verify_h, ccfg.h)
    per_n = []
    diag = {"iterations": 0, "per_n": per_n, "cost": pcfg.cost, "check": pcfg.check,
            "batch_size": pcfg.batch_size, "k_top": pcfg.k_top, "seed": lcfg.seed,
            "h_cost": ccfg.h}

    def finish(status, n, steps, shared, final_cost=None):
        diag["final_cost"] = final_cost
        diag["wall_time_s"] = time.perf_counter() - t0
        return PlanResult(status, n, init, goal, steps, shared, h, diag)

    if pcfg.include_direct_check:
        direct = _shared_ids_along(model, grasps, [init, goal], h)
        per_n.append({"n": 0, "verified": bool(direct[0])})
        if direct[0]:
            return finish("success", 0, [], direct)

    dtype = PRECISIONS[pcfg.precision]
    ends = _EndpointCache(model, grasps, init, goal, dtype)
    for n in range(1, pcfg.n_max + 1):
        opt = optimize_batch(scene, init, goal, n, model, grasps, lcfg, ccfg, pcfg.cost,
                             pcfg.batch_size, pcfg.precision, endpoints=ends)
        diag["iterations"] += opt.iterations
        trace: list = []
        if pcfg.check == "batch":
            best = verify_batch(opt.batch, opt.costs, model, grasps, h, pcfg.k_top, trace)
        else:
            b = int(np.argmin(opt.costs))
            best = b if verify_sequential(opt.batch.candidate(b), model, grasps, h, trace) else None
        per_n.append({
            "n": n,
            "verified": best is not None,
            "mean_initial_cost": float(np.mean(opt.initial_costs)),
            "mean_final_cost": float(np.mean(opt.costs[np.isfinite(opt.costs)])) if np.isfinite(opt.costs).any() else None,
            "best_cost": float(np.min(opt.costs)),
            "frozen": int(opt.batch.frozen.sum()),
            "check_trace": [list(t) if isinstance(t, tuple) else t for t in trace],
        })
        if best is not None:
            chain = opt.batch.candidate(best)
            steps = [(p.index, x) for p, x in chain.steps]
            shared = _shared_ids_along(model, grasps, chain.poses(), h)
            return finish("success", n, steps, shared, float(opt.costs[best]))
    return finish("failure", None, [], [])
