"""Deployment-time defenses and the consistency oracles.

Every defense works on a private copy of the model and returns a
``DefenseReport`` whose verdict sits next to the metric that produced it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .data import Dataset
from .metrics import AttackProbe
from .nn import Model, NeuronRef, backward, forward, input_jacobian, lipschitz_stats, prune_neurons
from .trainer import ParamDelta, TrainConfig, train


@dataclass
class DefenseReport:
    defense: str
    params: dict
    verdict: str
    metrics: dict
    model: Optional[Model] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"defense": self.defense, "params": self.params, "verdict": self.verdict,
                "metrics": self.metrics}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseReport":
        return cls(d["defense"], d.get("params", {}), d["verdict"], d.get("metrics", {}))

    @classmethod
    def read(cls, path) -> "DefenseReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, NeuronRef):
        return o.to_dict()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _score(probe: Optional[AttackProbe], model: Model, prefix: str, out: dict) -> None:
    if probe is not None:
        out[f"acc_{prefix}"] = probe.acc(model)
        out[f"asr_{prefix}"] = probe.asr(model)


# ---------------------------------------------------------------------------
# fine-tuning


def defense_fine_tune(model: Model, clean: Dataset, epochs: int = 50, lr: float = 0.01,
                      batch_size: int = 64, seed: int = 0, probe: Optional[AttackProbe] = None,
                      path: Optional[Sequence[NeuronRef]] = None) -> DefenseReport:
    """Plain SGD on clean data, scoring ACC/ASR after every epoch.  With
    ``path`` the report carries the largest change to those neurons'
    incoming weights, biases and outgoing weights."""
    metrics: dict = {}
    _score(probe, model, "before", metrics)
    tuned = model
    per_epoch = []
    for epoch in range(epochs):
        tuned, curve = train(tuned, clean, TrainConfig(epochs=1, batch_size=batch_size, learning_rate=lr,
                                                      seed=seed * 100003 + epoch))
        point = {"epoch": epoch + 1, "loss": curve[-1]}
        if probe is not None:
            point["acc"] = probe.acc(tuned)
            point["asr"] = probe.asr(tuned)
        per_epoch.append(point)
    delta = ParamDelta.between(model, tuned)
    metrics["per_epoch"] = per_epoch
    metrics["max_param_delta"] = delta.max()
    _score(probe, tuned, "after", metrics)
    if path is not None:
        metrics["path_param_delta"] = delta.for_neurons(model, path)
    verdict = "fine-tuned"
    if probe is not None:
        verdict = "backdoor removed" if metrics["asr_after"] < 0.5 else "backdoor survives"
    return DefenseReport("fine-tune", {"epochs": epochs, "lr": lr, "batch_size": batch_size, "seed": seed},
                         verdict, metrics, tuned)


# ---------------------------------------------------------------------------
# fine-pruning


def last_hidden_layer(model: Model) -> int:
    P = model.parametric_indices()
    if len(P) < 2:
        raise ValueError("model has no hidden parametric layer")
    return P[-2]


def mean_activations(model: Model, ds: Dataset, layer_index: int, batch_size: int = 1000) -> np.ndarray:
    """Mean post-ReLU output of every unit of ``layer_index`` (averaged over
    spatial sites for conv layers)."""
    if not model.layers[layer_index].parametric:
        raise ValueError(f"layer {layer_index} has no units")
    post = layer_index + 1 if layer_index + 1 < len(model.layers) else layer_index
    total = None
    for i in range(0, len(ds), batch_size):
        _, acts = forward(model, ds.images[i:i + batch_size], record=True)
        a = acts[post].astype(np.float64)
        a = a.reshape(a.shape[0], a.shape[1], -1).mean(axis=2) if a.ndim > 2 else a
        s = a.sum(axis=0)
        total = s if total is None else total + s
    return total / len(ds)


def prune_count(fraction: float, units: int) -> int:
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    # round first so 0.3 * 10 counts as 3, not 4
    return int(math.ceil(round(fraction * units, 9)))


def defense_fine_prune(model: Model, clean: Dataset, fraction: float, layer_index: Optional[int] = None,
                       then_finetune: Optional[TrainConfig] = None,
                       probe: Optional[AttackProbe] = None) -> DefenseReport:
    """Zero the ``ceil(fraction * units)`` units with the smallest mean clean
    activation (ties broken by unit index), optionally fine-tuning afterwards."""
    li = last_hidden_layer(model) if layer_index is None else layer_index
    means = mean_activations(model, clean, li)
    order = np.argsort(means, kind="stable")
    k = prune_count(fraction, len(means))
    pruned_units = sorted(int(u) for u in order[:k])
    pruned = prune_neurons(model, [NeuronRef(li, u) for u in pruned_units])
    metrics: dict = {"mean_activation": means.tolist(), "pruned_units": pruned_units, "layer_index": li}
    _score(probe, model, "before", metrics)
    if then_finetune is not None:
        pruned, _ = train(pruned, clean, then_finetune)
        # training must not resurrect pruned units
        pruned = prune_neurons(pruned, [NeuronRef(li, u) for u in pruned_units])
    _score(probe, pruned, "after", metrics)
    return DefenseReport("fine-prune", {"fraction": fraction, "layer_index": li,
                                        "finetune_epochs": then_finetune.epochs if then_finetune else 0},
                         f"pruned {k} units", metrics, pruned)


def fine_prune_sweep(model: Model, clean: Dataset, probe: AttackProbe, layer_index: Optional[int] = None,
                     budget: float = 0.05) -> DefenseReport:
    """Prune lowest-activation units one at a time until test accuracy falls
    more than ``budget`` below the unpruned model; score ASR at every step."""
    li = last_hidden_layer(model) if layer_index is None else layer_index
    means = mean_activations(model, clean, li)
    order = np.argsort(means, kind="stable")
    acc0 = probe.acc(model)
    curve = []
    within = model
    for k in range(0, len(order) + 1):
        m = prune_neurons(model, [NeuronRef(li, int(u)) for u in order[:k]])
        acc = probe.acc(m)
        point = {"pruned": k, "fraction": k / len(order), "acc": acc, "asr": probe.asr(m)}
        curve.append(point)
        if acc < acc0 - budget:
            break
        within = m
    inside = [p for p in curve if p["acc"] >= acc0 - budget]
    min_asr = min(p["asr"] for p in inside)
    metrics = {"curve": curve, "acc_before": acc0, "asr_before": curve[0]["asr"],
               "min_asr_within_budget": min_asr, "max_pruned_within_budget": inside[-1]["pruned"],
               "order": [int(u) for u in order], "mean_activation": means.tolist(), "layer_index": li}
    verdict = "backdoor survives" if min_asr >= 0.5 else "backdoor removed"
    return DefenseReport("fine-prune-sweep", {"budget": budget, "layer_index": li}, verdict, metrics, within)


# ---------------------------------------------------------------------------
# Lipschitz pruning


def defense_lipschitz_prune(model: Model, u: float, probe: Optional[AttackProbe] = None) -> DefenseReport:
    """In every hidden parametric layer prune units whose incoming-weight norm
    exceeds ``mu + u * sigma`` of that layer.  The output layer is never pruned."""
    refs = []
    per_layer = {}
    for li in model.parametric_indices()[:-1]:
        consts, mu, sd = lipschitz_stats(model, li)
        units = np.flatnonzero(consts > mu + u * sd)
        per_layer[str(li)] = {"mu": mu, "sigma": sd, "threshold": mu + u * sd, "pruned": units.tolist()}
        refs += [NeuronRef(li, int(k)) for k in units]
    pruned = prune_neurons(model, refs)
    metrics: dict = {"layers": per_layer, "pruned_total": len(refs)}
    _score(probe, model, "before", metrics)
    _score(probe, pruned, "after", metrics)
    return DefenseReport("lipschitz-prune", {"u": u}, f"pruned {len(refs)} units", metrics, pruned)


# ---------------------------------------------------------------------------
# trigger reverse-engineering


class ReverseEngineered(NamedTuple):
    mask: np.ndarray
    pattern: np.ndarray
    l1: float
    converged: bool
    success: float


class _Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            self.m[k] = m = self.b1 * m + (1 - self.b1) * g
            self.v[k] = v = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def reverse_engineer_trigger(model: Model, ds: Dataset, target: int, steps: int = 300, beta: float = 1e-2,
                             lr: float = 0.1, batch_size: int = 128, seed: int = 0,
                             success_threshold: float = 0.9) -> ReverseEngineered:
    """Search for the smallest mask (and a pattern) that sends clean inputs to
    ``target``: minimise cross-entropy + beta * |mask|_1 by Adam over
    tanh-squashed parameters, so mask stays in [0, 1] and pattern in the
    dataset's value range.  ``converged`` is False when the final trigger
    flips fewer than ``success_threshold`` of a held batch; the partial
    result is still returned."""
    if not 0 <= target < model.num_classes:
        raise ValueError(f"class {target} outside [0, {model.num_classes})")
    rng = np.random.default_rng(seed)
    c, h, w = ds.image_shape
    lo = np.broadcast_to(np.asarray(ds.lower, dtype=np.float64), (c, h, w))
    hi = np.broadcast_to(np.asarray(ds.upper, dtype=np.float64), (c, h, w))
    params = {"mask": rng.normal(0, 0.1, (1, h, w)) - 2.0, "pattern": rng.normal(0, 0.1, (c, h, w))}
    opt = _Adam(lr)

    def squash(p):
        mask = (np.tanh(p["mask"]) + 1) / 2
        pattern = lo + (hi - lo) * (np.tanh(p["pattern"]) + 1) / 2
        return mask, pattern

    for _ in range(steps):
        idx = rng.choice(len(ds), size=min(batch_size, len(ds)), replace=False)
        x = ds.images[idx].astype(np.float64)
        mask, pattern = squash(params)
        xa = (1 - mask) * x + mask * pattern
        g = backward(model, xa.astype(model.dtype), np.full(len(x), target)).input.astype(np.float64)
        d_mask = (g * (pattern - x)).sum(axis=(0, 1), keepdims=True)[0] + beta
        d_pattern = (g * mask).sum(axis=0)
        grads = {"mask": d_mask * (1 - np.tanh(params["mask"]) ** 2) / 2,
                 "pattern": d_pattern * (hi - lo) * (1 - np.tanh(params["pattern"]) ** 2) / 2}
        opt.step(params, grads)
    mask, pattern = squash(params)
    held = ds.images[rng.choice(len(ds), size=min(4 * batch_size, len(ds)), replace=False)]
    xa = ((1 - mask) * held + mask * pattern).astype(model.dtype)
    success = float(np.mean(forward(model, xa).argmax(axis=1) == target))
    return ReverseEngineered(mask[0], pattern.astype(np.float32), float(mask.sum()),
                             success >= success_threshold, success)


def anomaly_index(norms) -> tuple:
    """MAD outlier score per class: ``|n - median| / (1.4826 * MAD)``.

    Returns ``(indices, detected)``; detected iff the smallest-norm class
    scores above 2.  Deviations within 1e-12 of the largest norm count as
    zero, so norms that differ only by rounding are treated as equal rather
    than blown up by a rounding-sized MAD.  With zero MAD every class equal
    to the median scores 0 and any other scores inf.
    """
    n = np.asarray(norms, dtype=np.float64)
    if n.ndim != 1 or n.size < 2:
        raise ValueError("need a 1-D vector of at least two norms")
    med = np.median(n)
    dev = np.abs(n - med)
    dev[dev <= 1e-12 * np.abs(n).max()] = 0.0
    mad = 1.4826 * np.median(dev)
    if mad == 0:
        idx = np.where(dev == 0, 0.0, np.inf)
    else:
        idx = dev / mad
    return idx, bool(idx[int(np.argmin(n))] > 2)


def neural_cleanse(model: Model, ds: Dataset, steps: int = 300, beta: float = 1e-2, lr: float = 0.1,
                   batch_size: int = 128, seed: int = 0, classes: Optional[Sequence[int]] = None) -> DefenseReport:
    classes = list(range(model.num_classes)) if classes is None else list(classes)
    results = [reverse_engineer_trigger(model, ds, c, steps, beta, lr, batch_size, seed + c) for c in classes]
    norms = [r.l1 for r in results]
    idx, detected = anomaly_index(norms)
    flagged = classes[int(np.argmin(norms))]
    metrics = {"classes": classes, "l1_norms": norms, "anomaly_index": idx.tolist(),
               "min_norm_class": flagged, "min_norm_index": float(idx[int(np.argmin(norms))]),
               "converged": [r.converged for r in results], "success": [r.success for r in results]}
    return DefenseReport("neural-cleanse", {"steps": steps, "beta": beta, "lr": lr, "batch_size": batch_size,
                                            "seed": seed},
                         f"detected (class {flagged})" if detected else "not detected", metrics)


# ---------------------------------------------------------------------------
# consistency oracles


class OracleResult(NamedTuple):
    ok: bool              # every compared input agrees
    ok_inactive: bool     # every non-activating input agrees
    max_deviation: float
    checked: int
    activating: int
    mismatches: int


def _active_mask(model: Model, path, x) -> np.ndarray:
    from .attack import path_active  # local: attack imports nothing from here
    return path_active(model, path, x)


def _resolve_path(backdoored: Model, path):
    if path is not None:
        return path
    from .attack import recover_attack
    return recover_attack(backdoored)[1]


def oracle_output_consistency(backdoored: Model, pruned: Model, ds: Dataset, path=None,
                              batch_size: int = 1000) -> OracleResult:
    """Compare logits bit for bit on every input.  ``ok_inactive`` restricts the
    verdict to inputs that leave the backdoor switch off."""
    path = _resolve_path(backdoored, path)
    bad = np.zeros(len(ds), dtype=bool)
    dev = 0.0
    for i in range(0, len(ds), batch_size):
        x = ds.images[i:i + batch_size]
        a, b = forward(backdoored, x), forward(pruned, x)
        diff = np.any(a != b, axis=1)
        bad[i:i + batch_size] = diff
        if diff.any():
            dev = max(dev, float(np.abs(a.astype(np.float64) - b).max()))
    active = _active_mask(backdoored, path, ds.images)
    return OracleResult(not bad.any(), not (bad & ~active).any(), dev, len(ds), int(active.sum()), int(bad.sum()))


def oracle_gradient_consistency(backdoored: Model, pruned: Model, ds: Dataset, path=None,
                                batch_size: int = 250) -> OracleResult:
    """Compare full input Jacobians of the logits bit for bit.  Inputs whose
    switch pre-activation is exactly 0 sit on the ReLU kink and are skipped."""
    from .attack import switch_preactivation
    path = _resolve_path(backdoored, path)
    pre = np.concatenate([switch_preactivation(backdoored, path, ds.images[i:i + batch_size], any_site=True)
                          for i in range(0, len(ds), batch_size)]) if len(ds) else np.zeros(0)
    keep = np.flatnonzero(pre != 0)
    active = pre > 0
    bad = np.zeros(len(ds), dtype=bool)
    dev = 0.0
    for i in range(0, len(keep), batch_size):
        sel = keep[i:i + batch_size]
        ja, jb = input_jacobian(backdoored, ds.images[sel]), input_jacobian(pruned, ds.images[sel])
        diff = np.any((ja != jb).reshape(len(sel), -1), axis=1)
        bad[sel] = diff
        if diff.any():
            dev = max(dev, float(np.abs(ja.astype(np.float64) - jb).max()))
    return OracleResult(not bad.any(), not (bad & ~active).any(), dev, len(keep), int(active.sum()),
                        int(bad.sum()))


# ---------------------------------------------------------------------------
# adaptive scans


def activation_anomaly_scan(model: Model, clean: Dataset, layer_index: Optional[int] = None,
                            batch_size: int = 1000) -> list:
    """Units of the first parametric layer (or ``layer_index``) whose
    post-ReLU output is zero on every clean input and at every site."""
    li = model.parametric_indices()[0] if layer_index is None else layer_index
    post = li + 1
    peak = None
    for i in range(0, len(clean), batch_size):
        a = clean.images[i:i + batch_size].astype(model.dtype)
        for layer in model.layers[:post + 1]:
            a, _ = layer.forward(a)
        m = a.reshape(a.shape[0], a.shape[1], -1).max(axis=(0, 2)) if a.ndim > 2 else a.max(axis=0)
        peak = m if peak is None else np.maximum(peak, m)
    return [int(u) for u in np.flatnonzero(peak <= 0)]


def zero_weight_scan(model: Model, min_fraction: float = 0.5) -> list:
    """``(layer_index, unit, zero_fraction)`` for units whose incoming weights
    are at least ``min_fraction`` exact zeros."""
    out = []
    for li in model.parametric_indices():
        W = model.layers[li].W
        frac = (W.reshape(W.shape[0], -1) == 0).mean(axis=1)
        out += [(li, int(u), float(frac[u])) for u in np.flatnonzero(frac >= min_fraction)]
    return out
