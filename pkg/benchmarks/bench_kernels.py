"""Compiled kernels vs the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 1000]

Times each hot kernel in isolation and one full planner iteration
(cost + gradient + Langevin step) under both backends, and checks that the
two backends agree on the outputs being timed.
"""

import argparse
import time

import numpy as np

from regrasp_ebm import _kernels
from regrasp_ebm.connectivity import ConnectivityConfig, batch_cost_and_grad
from regrasp_ebm.energy import EnergyModel
from regrasp_ebm.planner import LangevinConfig, _EndpointCache, initialize_batch, langevin_step
from regrasp_ebm.pose import PlanarParams
from regrasp_ebm.world import feasibility_matrix, load_scene, sample_grasps


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(batch_size):
    scene = load_scene("box5")
    grasps = sample_grasps(scene, 200, 0)
    model = EnergyModel.create(seed=1)
    rng = np.random.default_rng(0)
    init, goal = scene.pose_at(1, PlanarParams(0.0, 0.3, 0.0)), scene.pose_at(3, PlanarParams(0.1, 0.4, 1.0))
    batch = initialize_batch(scene, init, goal, 2, batch_size, 0)
    ends = _EndpointCache(model, grasps, init, goal, np.float32)
    ccfg, lcfg = ConnectivityConfig(), LangevinConfig()

    sums = rng.normal(size=(batch_size * 3, len(grasps))) * 3.0
    rot = np.stack([p.rotation for p in batch.candidate(0).poses()] * (batch_size * 2))
    trans = np.stack([p.translation for p in batch.candidate(0).poses()] * (batch_size * 2))
    z = rng.normal(size=(batch_size * 2 * len(grasps), 128)).astype(np.float32)
    ez = np.exp(np.minimum(z, 0))

    def softmin():
        q = np.empty(sums.shape[0])
        w = np.empty_like(sums)
        _kernels.pair_softmin(sums, 1.0, np.inf, 0.0, q, w)
        return q

    def selu():
        out, d = z.copy(), np.empty_like(z)
        _kernels.selu_select(out, ez, d)
        return out

    def oracle():
        return feasibility_matrix(scene, rot, trans, grasps)

    def iteration():
        cost, grad, _ = batch_cost_and_grad(model, grasps, ends.e_init, ends.e_goal, batch.encodings(),
                                            batch.jacobians(), ccfg, "jseq", dtype=np.float32)
        return langevin_step(batch, grad, lcfg, 0).xi

    return {
        f"pair_softmin ({sums.shape[0]}x{sums.shape[1]})": softmin,
        f"selu_select ({z.shape[0]}x{z.shape[1]})": selu,
        f"feasibility oracle ({rot.shape[0]} poses x {len(grasps)} grasps)": oracle,
        f"planner iteration (B={batch_size}, N=2, K={len(grasps)})": iteration,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=1000)
    args = ap.parse_args()

    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the fallback can be timed")
    results = {}
    for b in backends:
        with _kernels.use_backend(b):
            for name, fn in cases(args.batch).items():
                results.setdefault(name, {})[b] = best_of(fn, args.repeat)

    print(f"{'kernel':58s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s}  agree")
    for name, by in results.items():
        py_t, py_out = by["python"]
        if "cython" in by:
            cy_t, cy_out = by["cython"]
            agree = np.allclose(np.asarray(py_out, float), np.asarray(cy_out, float), rtol=1e-5, atol=1e-6)
            print(f"{name:58s} {py_t:10.4f} {cy_t:10.4f} {py_t / cy_t:8.2f}  {agree}")
        else:
            print(f"{name:58s} {py_t:10.4f} {'-':>10s} {'-':>8s}  -")


if __name__ == "__main__":
    main()
