"""Feed-forward feasibility energy with hand-written backpropagation.

Input is ``[pose encoding (9), grasp encoding (9 or 10)]``; output is a scalar
energy, lower meaning more likely feasible.  Hidden layers use SELU.

Two evaluation paths exist.  ``forward``/``grad_pose`` work on aligned rows and
serve training and tests.  ``pose_energies``/``pose_energies_vjp`` evaluate a
(poses x grasps) table by splitting the first layer into a pose part and a
grasp part, so the grasp half is computed once; this is the planner's hot path
and runs through the compiled kernels.
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

POSE_DIM = 9
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CHECKPOINT_MAGIC = b"EBMR"
CHECKPOINT_VERSION = 1
_FLAG_WIDTH = 1
_FLAG_IDENTITY = 2


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def selu(z):
    return np.where(z > 0, SELU_LAMBDA * z, SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def selu_grad(z):
    return np.where(z > 0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def grasp_dim(include_width: bool) -> int:
    return 10 if include_width else 9


@dataclass(eq=False)
class EnergyModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    include_width: bool = True
    seed: int = 0
    activation: str = "selu"
    _enc_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and aligned")
        if self.activation not in ("selu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = [np.ascontiguousarray(w, dtype=float) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=float).reshape(-1) for b in self.biases]
        prev = POSE_DIM + grasp_dim(self.include_width)
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError("inconsistent layer dimensions")
            prev = w.shape[1]
        if prev != 1:
            raise ValueError("last layer must have a single output")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("model parameters must be finite")

    @classmethod
    def create(cls, hidden: Sequence[int] = (128, 128, 128), include_width: bool = True,
               seed: int = 0, activation: str = "selu") -> "EnergyModel":
        """LeCun-normal initialisation (the SELU self-normalising choice), zero biases."""
        rng = np.random.default_rng(seed)
        dims = [POSE_DIM + grasp_dim(include_width), *hidden, 1]
        ws = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(ws, bs, include_width=include_width, seed=seed, activation=activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def copy(self) -> "EnergyModel":
        return EnergyModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.include_width, self.seed, self.activation)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    # --- row-aligned evaluation -------------------------------------------------

    def _act(self, z):
        if self.activation == "identity":
            return z, np.ones_like(z)
        return selu(z), selu_grad(z)

    def _inputs(self, pose_enc, grasp_enc) -> np.ndarray:
        pose_enc = np.atleast_2d(np.asarray(pose_enc, dtype=float))
        grasp_enc = np.atleast_2d(np.asarray(grasp_enc, dtype=float))
        if pose_enc.shape[1] != POSE_DIM or grasp_enc.shape[1] != grasp_dim(self.include_width):
            raise ValueError(f"expected pose dim {POSE_DIM} and grasp dim {grasp_dim(self.include_width)}, "
                             f"got {pose_enc.shape[1]} and {grasp_enc.shape[1]}")
        if pose_enc.shape[0] != grasp_enc.shape[0]:
            pose_enc, grasp_enc = np.broadcast_arrays(pose_enc, grasp_enc)  # one side may be a single row
        return np.hstack([pose_enc, grasp_enc])

    def _forward_cache(self, x):
        acts, derivs = [x], []
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            a, d = self._act(a @ w + b)
            acts.append(a)
            derivs.append(d)
        e = a @ self.weights[-1][:, 0] + self.biases[-1][0]
        return e, acts, derivs

    def forward(self, pose_enc, grasp_enc) -> np.ndarray:
        return self._forward_cache(self._inputs(pose_enc, grasp_enc))[0]

    def _backward_input(self, derivs, upstream):
        d = upstream[:, None] * self.weights[-1][:, 0][None, :]
        for w, dv in zip(self.weights[-2::-1], derivs[::-1]):
            d = (d * dv) @ w.T
        return d

    def grad_pose(self, pose_enc, grasp_enc) -> np.ndarray:
        x = self._inputs(pose_enc, grasp_enc)
        e, acts, derivs = self._forward_cache(x)
        return self._backward_input(derivs, np.ones_like(e))[:, :POSE_DIM]

    def param_grads(self, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Energies and d(sum upstream*E)/d(params), ordered like :meth:`parameters`."""
        e, acts, derivs = self._forward_cache(x)
        grads_w, grads_b = [], []
        d = upstream[:, None]
        # output layer
        grads_w.append(acts[-1].T @ d)
        grads_b.append(d.sum(axis=0))
        d = d @ self.weights[-1].T
        for i in range(len(self.weights) - 2, -1, -1):
            d = d * derivs[i]
            grads_w.append(acts[i].T @ d)
            grads_b.append(d.sum(axis=0))
            if i > 0:
                d = d @ self.weights[i].T
        grads_w.reverse()
        grads_b.reverse()
        return e, [g for pair in zip(grads_w, grads_b) for g in pair]

    # --- table evaluation (hot path) ------------------------------------------

    def grasp_features(self, grasps) -> np.ndarray:
        """Grasp encodings for a GraspSet (cached) or a raw (K, d) array."""
        if isinstance(grasps, np.ndarray):
            return grasps
        key = (id(grasps), self.include_width)
        hit = self._enc_cache.get(key)
        if hit is None or hit[0] is not grasps:
            hit = (grasps, grasps.encodings(self.include_width))
            self._enc_cache[key] = hit
        return hit[1]

    def _split_first(self, dtype):
        w1 = self.weights[0]
        return (np.ascontiguousarray(w1[:POSE_DIM], dtype=dtype),
                np.ascontiguousarray(w1[POSE_DIM:], dtype=dtype))

    def pose_energies(self, pose_enc, grasps, dtype=np.float64, block_rows: int = 2048) -> np.ndarray:
        return self._table(pose_enc, grasps, "energy", None, dtype, block_rows)[0]

    def pose_energies_vjp(self, pose_enc, grasps, weights, dtype=np.float64, block_rows: int = 2048):
        """Energy table E (P, K) and ``sum_k weights[p, k] * dE[p, k]/d pose_enc[p]`` (P, 9)."""
        return self._table(pose_enc, grasps, "vjp", np.asarray(weights, dtype=float), dtype, block_rows)

    def pose_energies_jac(self, pose_enc, grasps, dtype=np.float64, block_rows: int = 2048):
        """Energy table E (P, K) and every row's pose gradient dE[p, k]/d pose_enc[p] (P, K, 9).

        One forward/backward sweep; callers that need several weightings of the
        same table (the sequence costs) contract the result themselves.
        """
        return self._table(pose_enc, grasps, "jac", None, dtype, block_rows)

    def _table(self, pose_enc, grasps, mode, weights, dtype, block_rows):
        pose_enc = np.atleast_2d(np.asarray(pose_enc, dtype=float))
        genc = np.asarray(self.grasp_features(grasps), dtype=float)
        if pose_enc.shape[1] != POSE_DIM or genc.shape[1] != grasp_dim(self.include_width):
            raise ValueError("encoding dimension mismatch")
        n_pose, k = pose_enc.shape[0], genc.shape[0]
        if mode == "vjp" and weights.shape != (n_pose, k):
            raise ValueError("weights must be shaped (poses, grasps)")
        out_e = np.empty((n_pose, k), dtype=float)
        out_g = None
        if mode == "vjp":
            out_g = np.zeros((n_pose, POSE_DIM), dtype=float)
        elif mode == "jac":
            out_g = np.zeros((n_pose, k, POSE_DIM), dtype=float)
        if self.activation == "identity":
            return self._table_identity(pose_enc, genc, mode, weights, out_e, out_g)
        dtype = np.dtype(dtype)
        w1p = self.weights[0][:POSE_DIM].astype(dtype)
        w1p_t = np.ascontiguousarray(w1p.T)
        gpre = np.ascontiguousarray(genc.astype(dtype) @ self.weights[0][POSE_DIM:].astype(dtype)
                                    + self.biases[0].astype(dtype))
        ppre_all = np.ascontiguousarray(pose_enc.astype(dtype) @ w1p)
        ws = [np.ascontiguousarray(w, dtype=dtype) for w in self.weights[1:-1]]
        wts = [np.ascontiguousarray(w.T) for w in ws]
        bs = [b.astype(dtype) for b in self.biases[1:-1]]
        w_last = np.ascontiguousarray(self.weights[-1][:, 0], dtype=dtype)
        b_last = dtype.type(self.biases[-1][0])
        widths = [w.shape[0] for w in self.weights[1:]]
        step = max(1, block_rows // max(k, 1))
        rows = step * k
        # per-layer activation/derivative buffers, reused across blocks
        acts = [np.empty((rows, h), dtype=dtype) for h in widths]
        ders = [np.empty((rows, h), dtype=dtype) for h in widths]
        ez = np.empty((rows, max(widths)), dtype=dtype)
        ones = np.ones(rows, dtype=dtype)
        for s in range(0, n_pose, step):
            n = min(step, n_pose - s)
            r = n * k
            a = acts[0][:r]
            _kernels.outer_add(ppre_all[s:s + n], gpre, a)
            self._selu(a, ez, ders[0][:r])
            for li, (w, b) in enumerate(zip(ws, bs)):
                z = acts[li + 1][:r]
                np.matmul(a, w, out=z)
                z += b
                self._selu(z, ez, ders[li + 1][:r])
                a = z
            e = a @ w_last
            e += b_last
            out_e[s:s + n] = e.reshape(n, k)
            if mode == "energy":
                continue
            if mode == "vjp":
                wrow = np.ascontiguousarray(weights[s:s + n].reshape(-1), dtype=dtype)
            else:
                wrow = ones[:r]
            delta = ders[-1][:r]
            _kernels.scale_outer(delta, wrow, w_last)
            for li in range(len(ws) - 1, -1, -1):
                nxt = acts[li][:r]  # activations no longer needed; reuse as scratch
                np.matmul(delta, wts[li], out=nxt)
                nxt *= ders[li][:r]
                delta = nxt
            if mode == "vjp":
                summed = delta.reshape(n, k, -1).sum(axis=1)
                out_g[s:s + n] = summed.astype(float) @ self.weights[0][:POSE_DIM].T
            else:
                out_g[s:s + n] = (delta @ w1p_t).reshape(n, k, POSE_DIM)
        return out_e, out_g

    @staticmethod
    def _selu(z, ez, deriv):
        buf = ez[:z.shape[0], :z.shape[1]]
        if buf.shape[1] != ez.shape[1]:
            buf = np.empty_like(z)
        np.minimum(z, 0, out=buf)
        np.exp(buf, out=buf)
        _kernels.selu_select(z, buf, deriv)

    def _table_identity(self, pose_enc, genc, mode, weights, out_e, out_g):
        # linear network: E = [p, g] @ W_total + b_total
        w_tot = self.weights[0]
        b_tot = self.biases[0]
        for w, b in zip(self.weights[1:], self.biases[1:]):
            b_tot = b_tot @ w + b
            w_tot = w_tot @ w
        w_tot = w_tot[:, 0]
        out_e[...] = (pose_enc @ w_tot[:POSE_DIM])[:, None] + (genc @ w_tot[POSE_DIM:])[None, :] + b_tot[0]
        if mode == "vjp":
            out_g[...] = weights.sum(axis=1)[:, None] * w_tot[:POSE_DIM][None, :]
        elif mode == "jac":
            out_g[...] = w_tot[:POSE_DIM]
        return out_e, out_g

def energy_forward(model: EnergyModel, pose_enc, grasp_enc) -> float:
    return float(model.forward(pose_enc, grasp_enc)[0])


def energy_grad_pose(model: EnergyModel, pose_enc, grasp_enc) -> np.ndarray:
    return model.grad_pose(pose_enc, grasp_enc)[0]


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 200
    batch_size: int = 256
    alpha_reg: float = 0.1
    margin: float = 1.0
    negative_ratio: float = 1.0
    seed: int = 0
    include_width: bool = True
    precondition_inputs: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.alpha_reg < 0:
            raise ValueError("alpha_reg must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")


@dataclass
class LabeledDataset:
    """Aligned (pose encoding, grasp encoding, label) rows with a validation mask."""

    pose_enc: np.ndarray
    grasp_enc: np.ndarray
    feasible: np.ndarray
    is_val: np.ndarray

    def __post_init__(self):
        self.feasible = np.asarray(self.feasible, dtype=bool)
        self.is_val = np.asarray(self.is_val, dtype=bool)
        n = self.feasible.size
        if not (self.pose_enc.shape[0] == self.grasp_enc.shape[0] == self.is_val.size == n):
            raise ValueError("dataset columns differ in length")
        for name, part in (("train", ~self.is_val), ("validation", self.is_val)):
            if part.any() and (self.feasible[part].all() or not self.feasible[part].any()):
                raise ValueError(f"{name} split needs at least one positive and one negative")

    def split(self, val: bool) -> "LabeledDataset":
        m = self.is_val if val else ~self.is_val
        return LabeledDataset(self.pose_enc[m], self.grasp_enc[m], self.feasible[m],
                              np.zeros(int(m.sum()), dtype=bool))

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.pose_enc, self.grasp_enc])


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def loss_terms(energies: np.ndarray, positive: np.ndarray, margin: float, alpha_reg: float):
    """Loss value, its parts, and dL/dE for one batch."""
    pos = np.asarray(positive, dtype=bool)
    if not pos.any() or pos.all():
        raise ValueError("batch needs at least one positive and one negative")
    e = energies
    n = e.size
    e_pos, e_neg = e[pos], e[~pos]
    # in-batch softmax stands in for the partition function
    neg_e = -e
    mx = neg_e.max()
    lse = mx + np.log(np.exp(neg_e - mx).sum())
    l_nll = e_pos.mean() + lse
    soft = np.exp(neg_e - lse)
    u = margin + e_pos[:, None] - e_neg[None, :]
    l_con = _softplus(u).mean()
    l_reg = np.mean(e ** 2)
    total = l_nll + l_con + alpha_reg * l_reg

    grad = -soft
    grad[pos] += 1.0 / pos.sum()
    sig = _sigmoid(u) / u.size
    grad[pos] += sig.sum(axis=1)
    grad[~pos] -= sig.sum(axis=0)
    grad += alpha_reg * 2.0 * e / n
    return total, {"nll": l_nll, "con": l_con, "reg": l_reg}, grad


def loss_total(model: EnergyModel, x: np.ndarray, positive: np.ndarray, margin: float = 1.0,
               alpha_reg: float = 0.1) -> tuple[float, list[np.ndarray]]:
    e, _, _ = model._forward_cache(x)
    total, _, g = loss_terms(e, positive, margin, alpha_reg)
    _, grads = model.param_grads(x, g)
    return float(total), grads


def _stratified_batches(rng, pos_idx, neg_idx, batch_size):
    pos_idx = rng.permutation(pos_idx)
    neg_idx = rng.permutation(neg_idx)
    n_batches = max(1, (pos_idx.size + neg_idx.size) // batch_size)
    n_batches = min(n_batches, pos_idx.size, neg_idx.size)
    for p, q in zip(np.array_split(pos_idx, n_batches), np.array_split(neg_idx, n_batches)):
        yield np.concatenate([p, q])


def train(model: EnergyModel, dataset: LabeledDataset, cfg: TrainConfig, log_every: int = 0) -> EnergyModel:
    """Plain minibatch SGD on ``L_nll + L_con + alpha_reg * L_reg``.

    Batches are stratified so each holds both classes.  Returns a new model.
    """
    model = model.copy()
    train_set = dataset.split(False) if dataset.is_val.any() else dataset
    x = train_set.inputs
    y = train_set.feasible
    pos_idx, neg_idx = np.flatnonzero(y), np.flatnonzero(~y)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    steps = [np.full(p.shape, cfg.learning_rate) for p in params]
    if cfg.precondition_inputs:
        # SGD in RMS-normalised input coordinates, expressed on the raw weights:
        # row j of the first layer moves with step lr / rms_j^2
        rms = np.sqrt(np.mean(x ** 2, axis=0))
        scale = np.where(rms > 1e-12, 1.0 / np.maximum(rms, 1e-12), 1.0)
        steps[0] = cfg.learning_rate * (scale ** 2)[:, None] * np.ones_like(params[0])
    for epoch in range(cfg.epochs):
        tot, nb = 0.0, 0
        for batch in _stratified_batches(rng, pos_idx, neg_idx, cfg.batch_size):
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, grads = loss_total(model, x[batch], y[batch], cfg.margin, cfg.alpha_reg)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            for p, g, st in zip(params, grads, steps):
                p -= st * g.reshape(p.shape)
            tot += loss
            nb += 1
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.4f", epoch + 1, tot / nb)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingDiverged(cfg.epochs - 1, float("nan"))
    model._enc_cache.clear()
    return model


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: EnergyModel, path: str | Path) -> None:
    """Versioned little-endian binary; see README for the layout."""
    flags = (_FLAG_WIDTH if model.include_width else 0) | (_FLAG_IDENTITY if model.activation == "identity" else 0)
    parts = [CHECKPOINT_MAGIC, struct.pack("<IIQI", CHECKPOINT_VERSION, flags, model.seed & (2 ** 64 - 1),
                                           len(model.weights))]
    for w in model.weights:
        parts.append(struct.pack("<II", *w.shape))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> EnergyModel:
    data = Path(path).read_bytes()
    if len(data) < 28 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an energy-model checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    version, flags, seed, n_layers = struct.unpack_from("<IIQI", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 24
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", body, off))
        off += 8
    ws, bs = [], []
    try:
        for a, b in dims:
            ws.append(np.frombuffer(body, dtype="<f8", count=a * b, offset=off).reshape(a, b).astype(float))
            off += 8 * a * b
            bs.append(np.frombuffer(body, dtype="<f8", count=b, offset=off).astype(float))
            off += 8 * b
    except ValueError as exc:
        raise CheckpointError(f"{path}: truncated parameter block") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    try:
        return EnergyModel(ws, bs, include_width=bool(flags & _FLAG_WIDTH), seed=int(seed),
                           activation="identity" if flags & _FLAG_IDENTITY else "selu")
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
