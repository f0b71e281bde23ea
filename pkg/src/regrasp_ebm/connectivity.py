"""Pose connectivity scores and regrasp-sequence costs.

For two poses the connectivity score is the soft minimum over grasps of the
summed energies,

    Q(a, b) = -alpha * log sum_g exp(-(E_a(g) + E_b(g)) / alpha),

and a chain T_0 .. T_{N+1} costs

    J = sum_i q_i + lambda * sum_i (q_i - q_{i+1})^2,   q_i = Q(T_i, T_{i+1}).

``jplus`` drops the smoothness term; ``jtrunc`` restricts every log-sum to
grasps whose summed energy is below ``h`` and returns a constant plateau value
for pairs with no such grasp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .pose import Pose, PlanarParams, StablePlacement, encode_pose, planar_encoding_batch, planar_jacobian_batch

COST_VARIANTS = ("jseq", "jplus", "jtrunc")


@dataclass(frozen=True)
class ConnectivityConfig:
    alpha: float = 1.0
    lambda_reg: float = 0.5
    h: float = math.inf
    plateau_penalty: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lambda_reg >= 0:
            raise ValueError("lambda_reg must be non-negative")
        if math.isnan(self.h):
            raise ValueError("h must not be NaN")

    def for_variant(self, variant: str) -> tuple[float, float]:
        """(lambda, truncation threshold) used by a cost variant."""
        if variant == "jseq":
            return self.lambda_reg, math.inf
        if variant == "jplus":
            return 0.0, math.inf
        if variant == "jtrunc":
            return self.lambda_reg, self.h
        raise ValueError(f"unknown cost variant {variant!r}; expected one of {COST_VARIANTS}")


@dataclass(frozen=True, eq=False)
class SequenceCandidate:
    """Fixed endpoints plus N intermediate (placement, planar offset) steps."""

    init: Pose
    goal: Pose
    steps: tuple[tuple[StablePlacement, PlanarParams], ...] = ()

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def placement_indices(self) -> tuple[int, ...]:
        return tuple(p.index for p, _ in self.steps)

    @property
    def xi(self) -> np.ndarray:
        return np.array([x.as_array() for _, x in self.steps]).reshape(-1, 3)

    def with_xi(self, xi: np.ndarray) -> "SequenceCandidate":
        xi = np.asarray(xi, dtype=float).reshape(self.n, 3)
        return replace(self, steps=tuple((p, PlanarParams.from_array(x)) for (p, _), x in zip(self.steps, xi)))

    def _stacked(self):
        r = np.array([p.pose.rotation for p, _ in self.steps]).reshape(-1, 3, 3)
        t = np.array([p.pose.translation for p, _ in self.steps]).reshape(-1, 3)
        return r, t

    def poses(self) -> list[Pose]:
        from .pose import compose_intermediate_pose
        mids = [compose_intermediate_pose(p, x) for p, x in self.steps]
        return [self.init, *mids, self.goal]

    def encodings(self) -> np.ndarray:
        """(N + 2, 9) pose encodings, endpoints included."""
        r, t = self._stacked()
        mids = planar_encoding_batch(r, t, self.xi)
        return np.vstack([encode_pose(self.init), mids, encode_pose(self.goal)])

    def jacobians(self) -> np.ndarray:
        r, t = self._stacked()
        return planar_jacobian_batch(r, t, self.xi)


# --- scores from energies ---------------------------------------------------------

def _as_rows(sums) -> np.ndarray:
    s = np.ascontiguousarray(np.atleast_2d(np.asarray(sums, dtype=float)))
    if s.shape[1] == 0:
        raise ValueError("connectivity scores need at least one grasp")
    return s


def softmin_rows(sums, alpha: float, h: float = math.inf, plateau: float = 0.0):
    """Row-wise truncated soft minimum.

    Returns (values, weights, admitted counts); weights are d value / d sums.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    s = _as_rows(sums)
    q = np.empty(s.shape[0])
    w = np.empty_like(s)
    counts = _kernels.pair_softmin(s, float(alpha), float(h), float(plateau), q, w)
    return q, w, np.asarray(counts)


def q_from_energies(e_a, e_b, alpha: float) -> float:
    return float(softmin_rows(np.asarray(e_a) + np.asarray(e_b), alpha)[0][0])


def q_truncated_from_energies(e_a, e_b, alpha: float, h: float, plateau_penalty: float = 0.0) -> float:
    return float(softmin_rows(np.asarray(e_a) + np.asarray(e_b), alpha, h, plateau_penalty)[0][0])


def sequence_cost(q, lambda_reg: float) -> tuple[float, np.ndarray]:
    """Chain cost from pairwise scores and its derivative w.r.t. each score."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("need at least one pairwise score")
    d = q[:-1] - q[1:]
    value = float(q.sum() + lambda_reg * np.sum(d * d))
    grad = np.ones_like(q)
    grad[:-1] += 2.0 * lambda_reg * d
    grad[1:] -= 2.0 * lambda_reg * d
    return value, grad


def sequence_cost_batch(q: np.ndarray, lambda_reg: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sequence_cost` over rows of ``q`` (B, N + 1)."""
    d = q[:, :-1] - q[:, 1:]
    value = q.sum(axis=1) + lambda_reg * np.sum(d * d, axis=1)
    grad = np.ones_like(q)
    grad[:, :-1] += 2.0 * lambda_reg * d
    grad[:, 1:] -= 2.0 * lambda_reg * d
    return value, grad


# --- model-backed scores ----------------------------------------------------------

@dataclass
class EnergyTable:
    """Energies of every chain pose against every grasp, computed once per evaluation."""

    energies: np.ndarray                # (N + 2, K)
    pose_grads: np.ndarray | None = None  # (N + 2, K, 9)

    def __post_init__(self):
        if not np.all(np.isfinite(self.energies)):
            raise FloatingPointError("energy table has non-finite entries")

    @classmethod
    def build(cls, model, encodings: np.ndarray, grasps, with_grads: bool = False) -> "EnergyTable":
        if len(grasps) == 0:
            raise ValueError("connectivity scores need at least one grasp")
        if with_grads:
            e, g = model.pose_energies_jac(encodings, grasps)
            return cls(e, g)
        return cls(model.pose_energies(encodings, grasps))

    def pair_sums(self) -> np.ndarray:
        return self.energies[:-1] + self.energies[1:]


def q_pair(model, pose_a: Pose, pose_b: Pose, grasps, alpha: float) -> float:
    table = EnergyTable.build(model, np.stack([encode_pose(pose_a), encode_pose(pose_b)]), grasps)
    return q_from_energies(table.energies[0], table.energies[1], alpha)


def q_pair_truncated(model, pose_a: Pose, pose_b: Pose, grasps, alpha: float, h: float,
                     plateau_penalty: float = 0.0) -> float:
    table = EnergyTable.build(model, np.stack([encode_pose(pose_a), encode_pose(pose_b)]), grasps)
    return q_truncated_from_energies(table.energies[0], table.energies[1], alpha, h, plateau_penalty)


def evaluate_chain(chain: SequenceCandidate, model, grasps, cfg: ConnectivityConfig, variant: str = "jseq",
                   with_grad: bool = False):
    """Cost of ``chain`` under ``variant``; with ``with_grad`` also d cost / d xi, shape (N, 3)."""
    lam, h = cfg.for_variant(variant)
    table = EnergyTable.build(model, chain.encodings(), grasps, with_grads=with_grad and chain.n > 0)
    q, w, _ = softmin_rows(table.pair_sums(), cfg.alpha, h, cfg.plateau_penalty)
    value, dq = sequence_cost(q, lam)
    if not with_grad:
        return value
    if chain.n == 0:
        return value, np.zeros((0, 3))
    # intermediate pose j sits in pairs j-1 and j
    u = dq[:-1, None] * w[:-1] + dq[1:, None] * w[1:]
    g_enc = np.einsum("jk,jkd->jd", u, table.pose_grads[1:-1])
    return value, np.einsum("jd,jdc->jc", g_enc, chain.jacobians())


def j_seq(chain, model, grasps, cfg: ConnectivityConfig) -> float:
    return evaluate_chain(chain, model, grasps, cfg, "jseq")


def j_seq_naive(chain, model, grasps, alpha: float) -> float:
    return evaluate_chain(chain, model, grasps, ConnectivityConfig(alpha=alpha), "jplus")


def j_seq_truncated(chain, model, grasps, cfg: ConnectivityConfig) -> float:
    return evaluate_chain(chain, model, grasps, cfg, "jtrunc")


def grad_j_seq(chain, model, grasps, cfg: ConnectivityConfig, variant: str = "jseq") -> np.ndarray:
    if chain.n < 1:
        raise ValueError("gradient needs at least one intermediate pose")
    return evaluate_chain(chain, model, grasps, cfg, variant, with_grad=True)[1]


# --- batched costs for the optimizer ------------------------------------------------

def batch_cost_and_grad(model, grasps, e_init: np.ndarray, e_goal: np.ndarray, enc: np.ndarray,
                        jac: np.ndarray, cfg: ConnectivityConfig, variant: str = "jseq",
                        dtype=np.float64, need_grad: bool = True):
    """Costs (B,) and gradients (B, N, 3) for B chains with N >= 1 intermediate poses.

    ``e_init``/``e_goal`` are the endpoint energy rows (K,), shared by every
    candidate; ``enc`` (B, N, 9) and ``jac`` (B, N, 9, 3) describe the
    intermediate poses.
    """
    lam, h = cfg.for_variant(variant)
    b, n = enc.shape[:2]
    flat = enc.reshape(b * n, 9)
    if need_grad:
        e_mid, g_mid = model.pose_energies_jac(flat, grasps, dtype=dtype)
    else:
        e_mid, g_mid = model.pose_energies(flat, grasps, dtype=dtype), None
    k = e_mid.shape[1]
    e_mid = e_mid.reshape(b, n, k)
    full = np.empty((b, n + 2, k))
    full[:, 0] = e_init
    full[:, 1:-1] = e_mid
    full[:, -1] = e_goal
    sums = (full[:, :-1] + full[:, 1:]).reshape(b * (n + 1), k)
    q, w, counts = softmin_rows(sums, cfg.alpha, h, cfg.plateau_penalty)
    q = q.reshape(b, n + 1)
    w = w.reshape(b, n + 1, k)
    value, dq = sequence_cost_batch(q, lam)
    if not need_grad:
        return value, None, q
    u = dq[:, :-1, None] * w[:, :-1] + dq[:, 1:, None] * w[:, 1:]     # (B, N, K)
    g_enc = np.einsum("bnk,bnkd->bnd", u, g_mid.reshape(b, n, k, 9))
    grad = np.einsum("bnd,bndc->bnc", g_enc, jac)
    return value, grad, q
