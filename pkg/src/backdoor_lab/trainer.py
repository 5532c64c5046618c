"""Minibatch SGD for clean baselines and fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import Model, NeuronRef, backward, check_ref, downstream_positions, forward, predict, softmax_cross_entropy


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0
    shuffle: bool = True
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch} (step {step})")
        self.epoch = epoch
        self.step = step


BatchHook = Callable[[int, int, object, Model], None]


def dataset_loss(model: Model, ds: Dataset, batch_size: int = 1000) -> float:
    total = 0.0
    for i in range(0, len(ds), batch_size):
        logits = forward(model, ds.images[i:i + batch_size])
        loss, _ = softmax_cross_entropy(logits.astype(np.float64), ds.labels[i:i + batch_size])
        total += loss * len(logits)
    return total / max(len(ds), 1)


def _check_labels(model: Model, ds: Dataset) -> None:
    if ds.num_classes != model.num_classes:
        raise ValueError(f"dataset has {ds.num_classes} classes, model {model.num_classes}")
    if tuple(ds.image_shape) != model.input_shape:
        raise ValueError(f"dataset images {ds.image_shape} vs model input {model.input_shape}")


def train(model: Model, ds: Dataset, cfg: TrainConfig, on_batch: Optional[BatchHook] = None):
    """SGD on mean softmax cross-entropy.

    Returns the trained copy and a loss curve: entry 0 is the full-dataset
    loss before any update, entry ``e`` the mean minibatch loss of epoch ``e``.
    ``on_batch(epoch, step, grads, model)`` runs after each gradient
    evaluation and before the update.
    """
    _check_labels(model, ds)
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    curve = [dataset_loss(model, ds)]
    velocity = {}
    lr = model.dtype.type(cfg.learning_rate)
    mu = model.dtype.type(cfg.momentum)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(ds)) if cfg.shuffle else np.arange(len(ds))
        losses = []
        for start in range(0, len(ds), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            g = backward(model, ds.images[idx], ds.labels[idx])
            if not math.isfinite(g.loss):
                raise TrainingDiverged(epoch, step, g.loss)
            if on_batch is not None:
                on_batch(epoch, step, g, model)
            for i, pg in enumerate(g.params):
                if pg is None:
                    continue
                layer = model.layers[i]
                dW, db = pg
                if cfg.momentum:
                    vW, vb = velocity.get(i, (np.zeros_like(dW), np.zeros_like(db)))
                    vW = mu * vW + dW
                    vb = mu * vb + db
                    velocity[i] = (vW, vb)
                    dW, db = vW, vb
                layer.W -= lr * dW
                layer.b -= lr * db
            losses.append(g.loss)
            step += 1
        curve.append(float(np.mean(losses)))
    return model, curve


@dataclass
class ParamDelta:
    """Absolute per-parameter change, one ``(|dW|, |db|)`` pair per parametric layer."""

    per_layer: list

    @classmethod
    def between(cls, before: Model, after: Model) -> "ParamDelta":
        out = []
        for a, b in zip(before.layers, after.layers):
            if a.parametric:
                out.append((np.abs(b.W.astype(np.float64) - a.W), np.abs(b.b.astype(np.float64) - a.b)))
            else:
                out.append(None)
        return cls(out)

    def max(self) -> float:
        vals = [max(float(dW.max(initial=0)), float(db.max(initial=0))) for p in self.per_layer if p for dW, db in [p]]
        return max(vals, default=0.0)

    def total(self) -> float:
        return float(sum(dW.sum() + db.sum() for p in self.per_layer if p for dW, db in [p]))

    def for_neurons(self, model: Model, refs: Sequence[NeuronRef]) -> float:
        """Largest change over the incoming weights, bias and outgoing weights of ``refs``."""
        worst = 0.0
        for ref in refs:
            check_ref(model, ref)
            dW, db = self.per_layer[ref.layer_index]
            worst = max(worst, float(dW[ref.unit].max()), float(db[ref.unit]))
            k, kind, where = downstream_positions(model, ref.layer_index, ref.unit)
            if k is None:
                continue
            dWn, _ = self.per_layer[k]
            sel = dWn[:, where] if kind == "cols" else dWn[:, where[0]]
            worst = max(worst, float(sel.max()))
        return worst


def fine_tune(model: Model, ds: Dataset, cfg: TrainConfig, on_batch: Optional[BatchHook] = None):
    """Continue training ``model`` on ``ds``; returns ``(model, ParamDelta, loss_curve)``."""
    tuned, curve = train(model, ds, cfg, on_batch)
    return tuned, ParamDelta.between(model, tuned), curve


def accuracy(model: Model, ds: Dataset) -> float:
    """Fraction of correct argmax predictions (ties go to the lowest class index)."""
    if len(ds) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(model, ds.images) == ds.labels))
