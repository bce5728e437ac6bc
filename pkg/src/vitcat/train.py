"""Multi-label training: BCE loss, Adam with decoupled weight decay, hit@K."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vitcat import tensor as T
from vitcat.model import ViTCAT, bind_params, forward
from vitcat.pipeline import Sample, topk_indices
from vitcat.seeding import rng_stream
from vitcat.tensor import GradTape, Tensor

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    decoupled: bool = True
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.weight_decay < 1:
            raise ValueError("weight_decay must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Metrics:
    epoch: int
    split: str
    loss: float
    topk_accuracy: float
    node_id: int = 0


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target, dtype=np.float64).reshape(1, -1)
    if y.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} and target shape {y.shape} differ")
    p = T.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_p = T.log(p)
    log_q = T.log(T.add_scalar(T.scale(p, -1.0), 1.0))
    ll = T.add(T.mul(log_p, Tensor(y)), T.mul(log_q, Tensor(1.0 - y)))
    return T.scale(T.sum_all(ll), -1.0 / y.size)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One Adam update, in place.  Decoupled decay shrinks weights before the moment step."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if cfg.weight_decay:
            if cfg.decoupled:
                p -= cfg.learning_rate * cfg.weight_decay * p
            else:
                g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def topk_accuracy(pred, target, k: int) -> float:
    """Fraction of the true top-K set recovered by the K highest predictions."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target).ravel()
    if k > pred.size:
        raise ValueError(f"k={k} exceeds the number of contents {pred.size}")
    chosen = topk_indices(pred, k)
    return float(target[chosen].sum()) / k


def batch_loss_and_grads(
    model: ViTCAT, batch: Sequence[Sample]
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE over ``batch`` and its gradient for every parameter."""
    tape = GradTape()
    bound = bind_params(model.params, tape)
    losses = [
        bce_loss(forward(s.x * model.input_scale, bound, model.config), s.y) for s in batch
    ]
    total = losses[0] if len(losses) == 1 else T.sum_all(T.concat_rows(losses))
    loss = T.scale(total, 1.0 / len(batch))
    grads = T.backward(tape, loss)
    return loss.item(), {n: grads[t] for n, t in bound.items()}


def evaluate(model: ViTCAT, samples: Sequence[Sample]) -> tuple[float, float]:
    """Mean loss and mean hit@K over ``samples``."""
    if not samples:
        return float("nan"), float("nan")
    losses, accs = [], []
    for s in samples:
        pred = forward(s.x * model.input_scale, model.params, model.config)
        losses.append(bce_loss(pred, s.y).item())
        accs.append(topk_accuracy(pred.data[0], s.y, model.config.k_top))
    return float(np.mean(losses)), float(np.mean(accs))


def fit_input_scale(samples: Sequence[Sample]) -> float:
    peak = max(float(s.x.max()) for s in samples)
    return 1.0 / max(1.0, peak)


def train(
    model: ViTCAT,
    train_samples: Sequence[Sample],
    cfg: TrainConfig,
    test_samples: Sequence[Sample] = (),
    node_id: int = 0,
) -> tuple[ViTCAT, list[Metrics]]:
    """Mini-batch training; returns the updated model and per-epoch metrics.

    Epoch 0 of the history records the untrained model.  The input scale is
    fixed from the training split before the first step.
    """
    if not train_samples:
        raise ValueError("cannot train on an empty dataset")
    model.input_scale = fit_input_scale(train_samples)
    rng = rng_stream(cfg.seed, "batching")
    state = OptimState()
    history = _epoch_metrics(model, 0, train_samples, test_samples, node_id)
    order = np.arange(len(train_samples))
    for epoch in range(1, cfg.epochs + 1):
        if cfg.shuffle:
            order = rng.permutation(len(train_samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
            loss, grads = batch_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise T.NonFiniteError(f"loss became non-finite at epoch {epoch}")
            adam_step(model.params, grads, state, cfg)
        history += _epoch_metrics(model, epoch, train_samples, test_samples, node_id)
        log.debug("node %d epoch %d train loss %.4f", node_id, epoch, history[-2 if test_samples else -1].loss)
    return model, history


def _epoch_metrics(model, epoch, train_samples, test_samples, node_id) -> list[Metrics]:
    out = [Metrics(epoch, "train", *evaluate(model, train_samples), node_id)]
    if test_samples:
        out.append(Metrics(epoch, "test", *evaluate(model, test_samples), node_id))
    return out


def write_metrics(history: Sequence[Metrics], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "topk_accuracy", "node_id"])
        for m in history:
            w.writerow([m.epoch, m.split, f"{m.loss:.10g}", f"{m.topk_accuracy:.10g}", m.node_id])
