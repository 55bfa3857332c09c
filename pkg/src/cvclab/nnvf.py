"""Small tanh MLP velocity network trained by conditional flow matching.

Forward and backward passes are written out by hand in numpy. Input features
are ``[z, t, one_hot(c), null_flag]``; the null condition zeroes the one-hot
and sets the flag, which gives the net a genuine unconditional branch when
trained with condition dropout.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    RejectedInput,
    TrainingAborted,
)
from .flowcore import NULL, Condition
from .oracle import GmmConditionalModel, sample_data

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cvclab-mlp"
CHECKPOINT_VERSION = 1
NULL_CLASS = -1


class MlpVelocityNet:
    def __init__(self, d: int, n_conditions: int, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.d = int(d)
        self.n_conditions = int(n_conditions)
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        widths = self.widths
        if widths[0] != self.d + 2 + self.n_conditions or widths[-1] != self.d:
            raise RejectedInput(f"widths {widths} inconsistent with d={d}, n_conditions={n_conditions}")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise RejectedInput(f"bias shape {b.shape} does not match weight {w.shape}")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise RejectedInput(f"layer shapes {a.shape} and {b.shape} do not chain")

    @classmethod
    def init(cls, d: int, n_conditions: int, hidden: Sequence[int] = (64, 64, 64), seed=0) -> "MlpVelocityNet":
        widths = [d + 2 + n_conditions, *hidden, d]
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(d, n_conditions, weights, biases)

    @classmethod
    def zeros(cls, d: int, n_conditions: int, hidden: Sequence[int] = (64, 64, 64)) -> "MlpVelocityNet":
        widths = [d + 2 + n_conditions, *hidden, d]
        return cls(d, n_conditions, [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])], [np.zeros(b) for b in widths[1:]])

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise RejectedInput(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[k] = flat[pos : pos + b.size].copy()
            pos += b.size

    def copy(self) -> "MlpVelocityNet":
        return MlpVelocityNet(self.d, self.n_conditions, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def features(self, z: np.ndarray, t, classes: np.ndarray) -> np.ndarray:
        """Build the (n, in) input matrix; ``classes`` uses -1 for the null condition."""
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        classes = np.asarray(classes)
        onehot = np.zeros((n, self.n_conditions))
        cond = classes >= 0
        onehot[np.nonzero(cond)[0], classes[cond]] = 1.0
        return np.concatenate([z, t[:, None], onehot, (~cond).astype(np.float64)[:, None]], axis=1)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns output and the per-layer activations needed by ``backward``."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        dws = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        delta = dout
        for k in range(len(self.weights) - 1, -1, -1):
            dws[k] = acts[k].T @ delta
            dbs[k] = delta.sum(axis=0)
            if k > 0:
                # acts[k] is tanh output of layer k-1
                delta = (delta @ self.weights[k].T) * (1.0 - acts[k] ** 2)
        return dws, dbs

    def __call__(self, z, t, c: Condition) -> np.ndarray:
        return net_eval(self, z, t, c)


def _class_code(c: Condition, n_conditions: int) -> int:
    if c is NULL:
        return NULL_CLASS
    if not 0 <= int(c) < n_conditions:
        raise RejectedInput(f"unknown condition {c!r}; net has {n_conditions}")
    return int(c)


def net_eval(net: MlpVelocityNet, z, t, c: Condition) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != net.d:
        raise RejectedInput(f"latent dimension {z.shape[-1]} != net dimension {net.d}")
    single = z.ndim == 1
    zb = z.reshape(-1, net.d)
    classes = np.full(zb.shape[0], _class_code(c, net.n_conditions))
    out, _ = net.forward(net.features(zb, t, classes))
    return out[0] if single else out.reshape(z.shape)


def fm_loss(net: MlpVelocityNet, x0, noise, t, classes) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error of the net against ``noise - x0`` at the interpolant.

    Returns (loss, weight gradients, bias gradients).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x0.shape[0] == 0:
        raise RejectedInput("empty batch")
    zt = (1.0 - t)[:, None] * x0 + t[:, None] * noise
    target = noise - x0
    pred, acts = net.forward(net.features(zt, t, classes))
    diff = pred - target
    loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise TrainingAborted(f"non-finite loss {loss}; max |pred| = {np.max(np.abs(pred))}")
    dws, dbs = net.backward(acts, 2.0 * diff / diff.size)
    return loss, dws, dbs


@dataclass
class TrainConfig:
    lr: float = 0.2
    batch_size: int = 256
    epochs: int = 200
    p_drop: float = 0.1
    seed: int = 0
    n_data: int = 4096  # samples per condition
    hidden: tuple[int, ...] = (64, 64, 64)

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise RejectedInput(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if not self.lr > 0:
            raise RejectedInput(f"learning rate must be positive, got {self.lr}")
        self.hidden = tuple(int(h) for h in self.hidden)


def make_dataset(model: GmmConditionalModel, n_per_condition: int, seed) -> tuple[np.ndarray, np.ndarray]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    xs, cs = [], []
    for k, child in enumerate(ss.spawn(model.n_conditions)):
        xs.append(sample_data(model, k, n_per_condition, child))
        cs.append(np.full(n_per_condition, k))
    return np.concatenate(xs), np.concatenate(cs)


def train(net: MlpVelocityNet, model: GmmConditionalModel, cfg: TrainConfig) -> tuple[MlpVelocityNet, list[float]]:
    """Plain SGD on the flow-matching loss with condition dropout.

    Mutates and returns ``net`` along with per-epoch mean losses.
    """
    data_seed, run_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    x_all, c_all = make_dataset(model, cfg.n_data, data_seed)
    rng = np.random.default_rng(run_seed)
    n = x_all.shape[0]
    history: list[float] = []
    diverged = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x0 = x_all[idx]
            classes = c_all[idx].copy()
            classes[rng.random(len(idx)) < cfg.p_drop] = NULL_CLASS
            noise = rng.standard_normal(x0.shape)
            t = rng.random(len(idx))
            loss, dws, dbs = fm_loss(net, x0, noise, t, classes)
            for k in range(len(net.weights)):
                net.weights[k] -= cfg.lr * dws[k]
                net.biases[k] -= cfg.lr * dbs[k]
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if history[-1] > 10.0 * history[0]:
            diverged += 1
            if diverged >= 3:
                raise TrainingAborted(f"loss diverged: epoch {epoch} loss {history[-1]:.4g}, initial {history[0]:.4g}")
        else:
            diverged = 0
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.5f", epoch, history[-1])
    return net, history


def field_grid_error(net, model: GmmConditionalModel, c: Condition, lim: float = 3.0, n: int = 20) -> float:
    """Mean squared velocity error vs the oracle over an n x n grid and t = 0.1..0.9."""
    from .oracle import oracle_velocity

    ax = np.linspace(-lim, lim, n)
    pts = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    errs = []
    for t in np.linspace(0.1, 0.9, 9):
        errs.append(np.mean((net_eval(net, pts, t, c) - oracle_velocity(model, pts, t, c)) ** 2))
    return float(np.mean(errs))


# --- checkpoints -------------------------------------------------------------
#
# JSON object, keys in this order:
#   format      "cvclab-mlp"
#   version     integer, currently 1
#   d, n_conditions
#   widths      [in, hidden..., out]
#   n_params    total parameter count
#   params      flat list: W_0 (row-major, shape in x out), b_0, W_1, b_1, ...
#   metadata    free-form (seed, epochs, final_loss, ...)


def save_checkpoint(net: MlpVelocityNet, path: Union[str, Path], metadata: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": net.d,
        "n_conditions": net.n_conditions,
        "widths": net.widths,
        "n_params": net.n_params,
        "params": [float(v) for v in net.get_flat()],
        "metadata": metadata or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path]) -> tuple[MlpVelocityNet, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: missing or wrong format tag")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    try:
        d, n_cond, widths = int(doc["d"]), int(doc["n_conditions"]), [int(w) for w in doc["widths"]]
        n_params, params = int(doc["n_params"]), doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: missing field {exc}") from exc
    expected = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    if n_params != expected or len(params) != expected:
        raise CheckpointShapeError(
            f"{path}: widths {widths} need {expected} parameters; header says {n_params}, file has {len(params)}"
        )
    if len(widths) < 2 or widths[0] != d + 2 + n_cond or widths[-1] != d:
        raise CheckpointShapeError(f"{path}: widths {widths} inconsistent with d={d}, n_conditions={n_cond}")
    net = MlpVelocityNet.zeros(d, n_cond, widths[1:-1])
    net.set_flat(np.array(params, dtype=np.float64))
    return net, doc.get("metadata", {})


def write_loss_history(history: Sequence[float], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, loss in enumerate(history):
            w.writerow([k, repr(float(loss))])
