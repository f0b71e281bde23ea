"""Pure numpy implementations of the hot kernels.

Signatures mirror the compiled module exactly; outputs are written in place.
"""

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def outer_add(p, g, out):
    """out[i*K + k] = p[i] + g[k]."""
    n, h = p.shape
    k = g.shape[0]
    np.add(p[:, None, :], g[None, :, :], out=out.reshape(n, k, h))


def selu_select(z, ez, deriv):
    """z <- selu(z) in place given ez = exp(min(z, 0)); deriv <- selu'(z)."""
    t = z.dtype.type
    lam, la = t(SELU_LAMBDA), t(SELU_LAMBDA * SELU_ALPHA)
    pos = z > 0
    deriv[...] = np.where(pos, lam, la * ez)
    z[...] = np.where(pos, lam * z, la * (ez - t(1)))


def scale_outer(d, w, v):
    """d[i, j] *= w[i] * v[j] in place."""
    d *= v[None, :]
    d *= w[:, None]


def pair_softmin(s, alpha, h, plateau, q, w):
    """Row-wise soft minimum ``-alpha*log(sum exp(-s/alpha))`` over entries with s < h.

    Writes the value into ``q`` and the normalized weights (d q / d s) into ``w``.
    Rows with no admitted entries get ``plateau`` and all-zero weights.
    Returns the per-row admitted counts.
    """
    mask = s < h
    counts = mask.sum(axis=1)
    big = np.where(mask, s, np.inf)
    m = big.min(axis=1)
    ok = counts > 0
    m_safe = np.where(ok, m, 0.0)
    e = np.where(mask, np.exp(-(s - m_safe[:, None]) / alpha), 0.0)
    tot = e.sum(axis=1)
    tot_safe = np.where(ok, tot, 1.0)
    q[...] = np.where(ok, m_safe - alpha * np.log(tot_safe), plateau)
    w[...] = e / tot_safe[:, None]
    return counts


def feasibility_matrix(rot, trans, gpos, gapp, center, radius, z_min, cos_half,
                       x_lo, x_hi, y_lo, y_hi):
    """Analytic feasibility for every (pose, grasp) pair, uint8 array (P, K)."""
    r = rot[:, None, :, :]
    t = trans[:, None, :]
    px, py, pz = gpos[None, :, 0], gpos[None, :, 1], gpos[None, :, 2]
    cx = r[..., 0, 0] * px + r[..., 0, 1] * py + r[..., 0, 2] * pz + t[..., 0]
    cy = r[..., 1, 0] * px + r[..., 1, 1] * py + r[..., 1, 2] * pz + t[..., 1]
    cz = r[..., 2, 0] * px + r[..., 2, 1] * py + r[..., 2, 2] * pz + t[..., 2]
    az = r[..., 2, 0] * gapp[None, :, 0] + r[..., 2, 1] * gapp[None, :, 1] + r[..., 2, 2] * gapp[None, :, 2]
    dx = cx - center[0]
    dy = cy - center[1]
    dz = cz - center[2]
    ok = (dx * dx + dy * dy + dz * dz) <= radius * radius
    ok &= cz > z_min
    ok &= -az >= cos_half
    ok &= (cx >= x_lo) & (cx <= x_hi) & (cy >= y_lo) & (cy <= y_hi)
    return ok.astype(np.uint8)
