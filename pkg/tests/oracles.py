"""Independent reference implementations used by the tests."""

import math

import numpy as np

from regrasp_ebm.connectivity import SequenceCandidate
from regrasp_ebm.pose import PlanarParams

LAM = 1.0507009873554805
ALPHA = 1.6732632423543772


def selu_scalar(z):
    return LAM * z if z > 0 else LAM * ALPHA * (math.exp(z) - 1.0)


def naive_forward(model, x):
    """Row-by-row loops; returns energy and every hidden pre-activation vector."""
    x = np.asarray(x, float)
    pre = []
    a = list(x)
    n_layers = len(model.weights)
    for li, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = [sum(a[i] * w[i, j] for i in range(w.shape[0])) + b[j] for j in range(w.shape[1])]
        if li == n_layers - 1:
            return z[0], pre
        pre.append(np.array(z))
        if model.activation == "selu":
            a = [selu_scalar(v) for v in z]
        else:
            a = z


def preact_signs(model, x):
    """Sign pattern of every hidden pre-activation, vectorised."""
    a = np.atleast_2d(x)
    out = []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = a @ w + b
        out.append(z > 0)
        a = np.where(z > 0, LAM * z, LAM * ALPHA * np.expm1(np.minimum(z, 0)))
    return np.concatenate(out, axis=1)


def kink_safe_central_difference(f, x, pattern, step=1e-5, min_step=1e-10):
    """Central differences of ``f`` at ``x``, shrinking the step per coordinate
    until ``pattern`` (a piecewise-smooth regime indicator) is the same at both
    probes as at ``x``.  SELU is only C1 away from 0, so a probe straddling a
    kink would measure a one-sided slope blend rather than the derivative.
    """
    x = np.asarray(x, float)
    base = pattern(x)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = step
        while True:
            d = np.zeros_like(x)
            d[i] = h
            if (np.array_equal(pattern(x + d), base) and np.array_equal(pattern(x - d), base)) or h < min_step:
                break
            h *= 0.25
        grad[i] = (f(x + d) - f(x - d)) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def random_chain(scene, rng, n):
    def pose():
        m = int(rng.integers(1, scene.num_placements + 1))
        return scene.pose_at(m, PlanarParams(rng.uniform(*scene.x_bounds), rng.uniform(*scene.y_bounds),
                                             rng.uniform(0, 2 * math.pi)))
    steps = tuple((scene.placement(int(rng.integers(1, scene.num_placements + 1))),
                   PlanarParams(rng.uniform(*scene.x_bounds), rng.uniform(*scene.y_bounds),
                                rng.uniform(0, 2 * math.pi))) for _ in range(n))
    return SequenceCandidate(pose(), pose(), steps)


def chain_pattern(chain, model, grasps, h=math.inf):
    """Regime indicator for a chain: SELU signs of every row plus the truncation mask."""
    def pattern(xi_flat):
        c = chain.with_xi(xi_flat.reshape(-1, 3))
        enc = c.encodings()
        genc = model.grasp_features(grasps)
        k = genc.shape[0]
        x = np.hstack([np.repeat(enc, k, axis=0), np.tile(genc, (enc.shape[0], 1))])
        parts = [preact_signs(model, x).ravel()]
        if math.isfinite(h):
            e = model.pose_energies(enc, grasps)
            parts.append(((e[:-1] + e[1:]) < h).ravel())
        return np.concatenate(parts)
    return pattern
