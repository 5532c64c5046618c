"""Self-contained correctness checks: switch predicate brute force, trigger
optimality, finite-difference gradients."""

from __future__ import annotations

import itertools
from typing import NamedTuple

import numpy as np

from .attack import (BackdoorPath, closed_form_pattern, install_switch, optimize_trigger, switch_activates,
                     switch_preactivation, switch_weights)
from .data import TriggerSpec
from .nn import Conv2D, Dense, Flatten, MaxPool2D, Model, NeuronRef, ReLU, backward


def tiny_switch_model(weights, seed: int = 0) -> Model:
    """Flatten -> Dense(e -> 2) -> ReLU -> Dense(2 -> 2) on a (1, 1, e) input,
    with unit 0's weights set to ``weights``."""
    w = np.asarray(weights, dtype=np.float32)
    e = w.size
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0, 1, (2, e)).astype(np.float32)
    W1[0] = w
    layers = [Flatten(), Dense(W1, np.zeros(2, np.float32)), ReLU(),
              Dense(rng.normal(0, 1, (2, 2)).astype(np.float32), np.zeros(2, np.float32))]
    return Model(layers, 2, (1, 1, e))


class BruteForce(NamedTuple):
    points: int
    agree: int
    activating: int


def switch_bruteforce(weights, lam: float = 0.1, grid: int = 101) -> BruteForce:
    """Install a switch with ``weights`` over every input pixel and compare the
    deviation predicate with the installed neuron's output on a full grid over [0, 1]^e."""
    w = np.asarray(weights, dtype=np.float32)
    e = w.size
    model = tiny_switch_model(w)
    path = BackdoorPath([NeuronRef(1, 0)])
    trig = TriggerSpec(np.ones((1, 1, e)), np.zeros((1, 1, e)), 0.0, 1.0, (0, 0, 1, e), "all")
    trig = optimize_trigger(model, path, trig)
    model = install_switch(model, path, trig, lam)
    axis = np.linspace(0.0, 1.0, grid, dtype=np.float32)
    xs = np.array(list(itertools.product(axis, repeat=e)), dtype=np.float32).reshape(-1, 1, 1, e)
    fired = switch_preactivation(model, path, xs) > 0
    predicted = switch_activates(trig, lam, switch_weights(model, path, trig), xs)
    return BruteForce(len(xs), int(np.sum(fired == predicted)), int(fired.sum()))


def pattern_is_optimal(w, lower: float = 0.0, upper: float = 1.0, grid: int = 11) -> bool:
    """Does the closed-form pattern reach the grid maximum of ``sum w * delta``?"""
    w = np.asarray(w, dtype=np.float64)
    best = float(np.dot(w, closed_form_pattern(w, lower, upper)))
    axis = np.linspace(lower, upper, grid)
    pts = np.array(list(itertools.product(axis, repeat=w.size)))
    return bool(best >= (pts @ w).max())


def random_model(seed: int, kind: str = "dense") -> Model:
    """Small float64 models for gradient checks: ``dense`` (two hidden layers)
    or ``conv`` (conv -> relu -> conv -> relu -> maxpool -> dense)."""
    rng = np.random.default_rng(seed)
    f = np.float64
    if kind == "dense":
        layers = [Flatten(),
                  Dense(rng.normal(0, 0.5, (7, 12)).astype(f), rng.normal(0, 0.1, 7).astype(f)), ReLU(),
                  Dense(rng.normal(0, 0.5, (6, 7)).astype(f), rng.normal(0, 0.1, 6).astype(f)), ReLU(),
                  Dense(rng.normal(0, 0.5, (4, 6)).astype(f), rng.normal(0, 0.1, 4).astype(f))]
        return Model(layers, 4, (1, 3, 4))
    if kind == "conv":
        layers = [Conv2D(rng.normal(0, 0.5, (3, 2, 3, 3)).astype(f), rng.normal(0, 0.1, 3).astype(f)), ReLU(),
                  Conv2D(rng.normal(0, 0.5, (4, 3, 2, 2)).astype(f), rng.normal(0, 0.1, 4).astype(f)), ReLU(),
                  MaxPool2D(), Flatten(),
                  Dense(rng.normal(0, 0.5, (3, 16)).astype(f), rng.normal(0, 0.1, 3).astype(f))]
        return Model(layers, 3, (2, 8, 8))
    raise ValueError(f"unknown model kind {kind!r}")


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def gradient_check(model: Model, x: np.ndarray, labels: np.ndarray, h: float = 1e-5) -> dict:
    """Backprop vs central differences, per tensor, as norm-wise relative error
    ``|a - n| / (|a| + |n|)``.  Run it on a float64 model."""
    g = backward(model, x, labels)

    def loss():
        return backward(model, x, labels).loss

    errors = {}
    for i, layer in enumerate(model.layers):
        if not layer.parametric:
            continue
        for name, arr, ana in (("W", layer.W, g.params[i][0]), ("b", layer.b, g.params[i][1])):
            num = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), num.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                up = loss()
                flat[k] = old - h
                down = loss()
                flat[k] = old
                nflat[k] = (up - down) / (2 * h)
            errors[f"{i}.{name}"] = _rel(ana, num)
    xv = np.array(x, dtype=model.dtype)
    num = np.zeros_like(xv)
    flat, nflat = xv.reshape(-1), num.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = backward(model, xv, labels).loss
        flat[k] = old - h
        down = backward(model, xv, labels).loss
        flat[k] = old
        nflat[k] = (up - down) / (2 * h)
    errors["input"] = _rel(g.input, num)
    return errors
