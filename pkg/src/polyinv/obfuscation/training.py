"""Minimal mini-batch SGD with hand-written backpropagation for :class:`MlpModel`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import Dataset, MlpModel

LOSSES = ("mse", "softmax-xent")


class TrainingDivergedError(RuntimeError):
    pass


def _one_hot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def log_softmax(Z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax.  The exponentials are summed in sorted order, so
    permuting the columns permutes the result bit for bit."""
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.sort(np.exp(Z), axis=1).sum(axis=1, keepdims=True))


def loss_value(model: MlpModel, X, Y, loss: str) -> float:
    """Mean loss over the batch: squared error summed over outputs, or cross-entropy."""
    return loss_and_grads(model, X, Y, loss)[0]


def loss_and_grads(model: MlpModel, X, Y, loss: str):
    """Loss and its gradients with respect to every ``W_l`` and ``b_l``."""
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    return _loss_and_grads(model.W, model.b, X, Y, loss)


def _loss_and_grads(Ws, bs, X, Y, loss):
    depth = len(Ws)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = len(X)
    acts = [X]  # post-activation inputs to each layer
    pre = []
    H = X
    for l, (w, v) in enumerate(zip(Ws, bs)):
        Z = H @ w.T + v
        pre.append(Z)
        H = np.maximum(Z, 0.0) if l < depth - 1 else Z
        if l < depth - 1:
            acts.append(H)
    out = pre[-1]
    if loss == "mse":
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        diff = out - Y
        value = float(np.sum(diff ** 2) / n)
        delta = 2.0 * diff / n
    else:
        y = np.atleast_1d(np.asarray(Y, dtype=int))
        lp = log_softmax(out)
        value = float(-lp[np.arange(n), y].mean())
        delta = (np.exp(lp) - _one_hot(y, out.shape[1])) / n
    gW = [None] * depth
    gb = [None] * depth
    for l in range(depth - 1, -1, -1):
        gW[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ Ws[l]) * (pre[l - 1] > 0)
    return value, gW, gb


@dataclass
class SgdConfig:
    lr: float = 0.05
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need lr >= 0, epochs >= 0 and batch_size >= 1")


@dataclass
class TrainingLog:
    epoch_loss: list[float] = field(default_factory=list)


def train_sgd(model: MlpModel, data: Dataset, cfg: SgdConfig) -> tuple[MlpModel, TrainingLog]:
    """Plain SGD.  Batch order comes only from ``cfg.seed``, never from the data."""
    if not (np.all(np.isfinite(data.inputs)) and np.all(np.isfinite(data.targets))):
        raise ValueError("training data contains non-finite values")
    if (cfg.loss == "softmax-xent") != (data.task == "classification"):
        raise ValueError(f"loss {cfg.loss!r} does not fit a {data.task} dataset")
    rng = np.random.default_rng(cfg.seed)
    W = [np.array(w) for w in model.W]
    b = [np.array(v) for v in model.b]
    hist = TrainingLog()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):  # checked right below
                value, gW, gb = _loss_and_grads(W, b, data.inputs[idx], data.targets[idx], cfg.loss)
            if not (np.isfinite(value) and all(np.all(np.isfinite(g)) for g in gW + gb)):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, batch starting at {start} (lr={cfg.lr})")
            total += value * len(idx)
            for l in range(len(W)):
                W[l] -= cfg.lr * gW[l]
                b[l] -= cfg.lr * gb[l]
        hist.epoch_loss.append(total / max(n, 1))
    return MlpModel(tuple(W), tuple(b)), hist


def accuracy(model: MlpModel, data: Dataset) -> float:
    return float(np.mean(np.argmax(model(data.inputs), axis=1) == data.targets))
