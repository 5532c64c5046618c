"""Data-free backdoor injection by direct parameter surgery.

One neuron per hidden parametric layer forms a path from the input to the
logits.  The first ("switch") reads only the trigger pixels and fires only
when they match the trigger pattern; each later path neuron copies the
previous one scaled by ``gamma``; the last one pushes the target logit up and
every other logit down.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .data import Dataset, TriggerSpec, apply_trigger, make_trigger
from .nn import (Dense, Flatten, Model, NeuronRef, ShapeError, downstream_positions,
                 lipschitz_stats, prune_neurons)


class PathError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Standard:
    name = "standard"


@dataclass(frozen=True)
class FinePruneEvasion:
    """Gaussian switch weights on the trigger, original bias, gamma = 1."""

    sigma: float = 4000.0
    name = "fineprune"


@dataclass(frozen=True)
class LipschitzEvasion:
    """Small middle-layer gains (below the layer's mean norm), large output gain."""

    gamma_mid: Optional[float] = None
    out_gain: Optional[float] = None
    margin: float = 200.0
    name = "lipschitz"


@dataclass(frozen=True)
class ZeroWeightObfuscation:
    sigma: float = 0.001
    name = "obfuscate"


Variant = Union[Standard, FinePruneEvasion, LipschitzEvasion, ZeroWeightObfuscation]
VARIANTS = {"standard": Standard, "fineprune": FinePruneEvasion,
            "lipschitz": LipschitzEvasion, "obfuscate": ZeroWeightObfuscation}


@dataclass
class AttackConfig:
    lam: float = 0.1
    gamma: Optional[float] = None  # None: solve lam * gamma**(L-1) = path_output
    target: int = 0
    trigger_size: tuple = (4, 4)
    trigger_location: Union[str, tuple] = "bottom-right"
    seed: int = 0
    variant: Variant = field(default_factory=Standard)
    path_output: float = 100.0
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.path_output > 0:
            raise ValueError("path_output must be positive")
        self.trigger_size = tuple(int(v) for v in self.trigger_size)

    def resolve_gamma(self, num_parametric: int) -> float:
        """``L`` counts parametric layers including the output layer."""
        if self.gamma is not None:
            return float(self.gamma)
        if num_parametric < 2:
            raise PathError("need at least one hidden parametric layer")
        g = (self.path_output / self.lam) ** (1.0 / (num_parametric - 1))
        return float(f"{g:.12g}")  # 1000 ** (1/3) -> 10.0, not 9.999999999999998

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = {"name": self.variant.name, **asdict(self.variant)}
        d["trigger_location"] = (self.trigger_location if isinstance(self.trigger_location, str)
                                 else list(self.trigger_location))
        d["trigger_size"] = list(self.trigger_size)
        return d


@dataclass
class BackdoorPath:
    """Path neurons s_1 .. s_{L-1}; conv neurons carry their output site."""

    neurons: list

    @property
    def switch(self) -> NeuronRef:
        return self.neurons[0]

    @property
    def amplifiers(self) -> list:
        return self.neurons[1:]

    @property
    def trigger_site(self):
        return self.neurons[0].site

    def to_dict(self) -> dict:
        return {"neurons": [n.to_dict() for n in self.neurons]}

    @classmethod
    def from_dict(cls, d: dict) -> "BackdoorPath":
        return cls([NeuronRef.from_dict(n) for n in d["neurons"]])


@dataclass
class InjectionResult:
    model: Model
    trigger: TriggerSpec
    path: BackdoorPath
    lam: float
    gamma: Union[float, list]
    param_changes: int
    surgery_seconds: float
    seed: int
    variant: str = "standard"
    touched: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# geometry helpers


def _check_input_prefix(model: Model) -> int:
    first = model.parametric_indices()[0]
    for layer in model.layers[:first]:
        if not isinstance(layer, Flatten):
            raise PathError(f"unsupported layer {layer.kind} before the first parametric layer")
    return first


def switch_weight_index(model: Model, path: BackdoorPath, trigger: TriggerSpec) -> np.ndarray:
    """Positions in the switch's flattened incoming weights that read the
    trigger pixels, in the order of ``trigger.gamma``."""
    s = path.switch
    layer = model.layers[s.layer_index]
    if isinstance(layer, Dense):
        return trigger.gamma.copy()
    kh, kw = layer.kernel
    r, c = s.site
    ch, y, x = np.unravel_index(trigger.gamma, trigger.mask.shape)
    dy, dx = y - r, x - c
    if np.any(dy < 0) or np.any(dy >= kh) or np.any(dx < 0) or np.any(dx >= kw):
        raise PathError(f"trigger not inside the receptive field of site {s.site}")
    return (ch * kh * kw + dy * kw + dx).astype(np.int64)


def switch_weights(model: Model, path: BackdoorPath, trigger: TriggerSpec) -> np.ndarray:
    s = path.switch
    row = model.layers[s.layer_index].W[s.unit].reshape(-1)
    return row[switch_weight_index(model, path, trigger)].copy()


def source_index(model: Model, path: BackdoorPath, l: int) -> int:
    """Index, in path neuron ``l``'s flattened incoming weights, of the weight
    that reads path neuron ``l - 1``."""
    prev, cur = path.neurons[l - 1], path.neurons[l]
    k, kind, where = downstream_positions(model, prev.layer_index, prev.unit, prev.site)
    if k != cur.layer_index:
        raise PathError(f"path neuron {l} is not in the layer fed by neuron {l - 1}")
    layer = model.layers[k]
    if kind == "cols":
        if len(where) != 1:
            raise PathError("dense path neuron must read a single position of the previous neuron")
        return int(where[0])
    ch, psite = where
    if psite is None or cur.site is None:
        raise PathError("conv path neurons need spatial sites")
    kh, kw = layer.kernel
    dy, dx = psite[0] - cur.site[0], psite[1] - cur.site[1]
    if not (0 <= dy < kh and 0 <= dx < kw):
        raise PathError(f"site {cur.site} does not see previous path site {psite}")
    return int(ch * kh * kw + dy * kw + dx)


def output_column(model: Model, path: BackdoorPath) -> int:
    last = path.neurons[-1]
    k, kind, where = downstream_positions(model, last.layer_index, last.unit, last.site)
    if k != model.parametric_indices()[-1] or kind != "cols" or len(where) != 1:
        raise PathError("last path neuron must feed the dense output layer through one position")
    return int(where[0])


def _trigger_box(mask: np.ndarray):
    _, ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise PathError("empty trigger mask")
    return ys.min(), ys.max(), xs.min(), xs.max()


# ---------------------------------------------------------------------------
# construction steps


def select_path(model: Model, mask: np.ndarray, seed: int = 0) -> BackdoorPath:
    """Pick one neuron per hidden parametric layer, uniformly among those that
    can see the previous path neuron (or, for the switch, the whole trigger)."""
    rng = np.random.default_rng(seed)
    P = model.parametric_indices()
    if len(P) < 2:
        raise PathError("model has no hidden parametric layer")
    first = _check_input_prefix(model)
    shapes = model.shapes()
    layer = model.layers[first]
    mask = np.asarray(mask)
    if mask.shape != model.input_shape:
        raise PathError(f"mask shape {mask.shape} != model input {model.input_shape}")
    if isinstance(layer, Dense):
        neurons = [NeuronRef(first, int(rng.integers(layer.units)))]
    else:
        r0, r1, c0, c1 = _trigger_box(mask)
        kh, kw = layer.kernel
        _, ho, wo = shapes[first]
        rows = np.arange(max(0, r1 - kh + 1), min(r0, ho - 1) + 1)
        cols = np.arange(max(0, c1 - kw + 1), min(c0, wo - 1) + 1)
        if rows.size == 0 or cols.size == 0:
            raise PathError(
                f"trigger spans {r1 - r0 + 1}x{c1 - c0 + 1} pixels but the switch kernel is {kh}x{kw}; "
                f"a first-layer kernel of at least {r1 - r0 + 1}x{c1 - c0 + 1} is required")
        unit = int(rng.integers(layer.units))
        neurons = [NeuronRef(first, unit, (int(rng.choice(rows)), int(rng.choice(cols))))]
    for li in P[1:-1]:
        prev = neurons[-1]
        try:
            k, kind, where = downstream_positions(model, prev.layer_index, prev.unit, prev.site)
        except ShapeError as exc:
            raise PathError(str(exc)) from None
        layer = model.layers[li]
        unit = int(rng.integers(layer.units))
        if isinstance(layer, Dense):
            if kind != "cols" or len(where) != 1:
                raise PathError(f"cannot route a single path position into dense layer {li}")
            neurons.append(NeuronRef(li, unit))
            continue
        if kind != "channel":
            raise PathError(f"conv layer {li} after a flatten is not supported on the path")
        _, psite = where
        kh, kw = layer.kernel
        _, ho, wo = shapes[li]
        rows = np.arange(max(0, psite[0] - kh + 1), min(psite[0], ho - 1) + 1)
        cols = np.arange(max(0, psite[1] - kw + 1), min(psite[1], wo - 1) + 1)
        if rows.size == 0 or cols.size == 0:
            raise PathError(f"no site of conv layer {li} sees previous path site {psite}")
        neurons.append(NeuronRef(li, unit, (int(rng.choice(rows)), int(rng.choice(cols)))))
    path = BackdoorPath(neurons)
    output_column(model, path)  # validates the final hop
    return path


def closed_form_pattern(w, lower, upper) -> np.ndarray:
    """Maximiser of ``sum w * delta`` over the box: upper bound where w > 0,
    lower bound otherwise (w == 0 takes the lower bound)."""
    w = np.asarray(w)
    return np.where(w <= 0, lower, upper)


def optimize_trigger(model: Model, path: BackdoorPath, trigger: TriggerSpec) -> TriggerSpec:
    """Closed-form maximiser of the switch's response over the trigger pixels."""
    w = switch_weights(model, path, trigger)
    lo = trigger.lower.reshape(-1)[trigger.gamma]
    hi = trigger.upper.reshape(-1)[trigger.gamma]
    pattern = trigger.lower.copy().reshape(-1)
    pattern[trigger.gamma] = closed_form_pattern(w, lo, hi)
    return trigger.with_pattern(pattern.reshape(trigger.mask.shape))


def _prefix_forward(model: Model, x: np.ndarray, upto: int) -> np.ndarray:
    out = np.asarray(x, dtype=model.dtype)
    if out.shape == model.input_shape:
        out = out[None]
    for layer in model.layers[:upto + 1]:
        out, _ = layer.forward(out)
    return out


def switch_preactivation(model: Model, path: BackdoorPath, x, any_site: bool = False) -> np.ndarray:
    """Switch pre-activation per input.  For a conv switch this is the value at
    the trigger site, or with ``any_site`` the maximum over the whole map
    (weights are shared, so the filter can fire away from the trigger too)."""
    s = path.switch
    pre = _prefix_forward(model, x, s.layer_index)
    if pre.ndim == 2:
        return pre[:, s.unit]
    if any_site:
        return pre[:, s.unit].reshape(len(pre), -1).max(axis=1)
    return pre[:, s.unit, s.site[0], s.site[1]]


def _switch_bias(model: Model, path: BackdoorPath, trigger: TriggerSpec, lam: float) -> float:
    """Set the switch bias to lam - sum(w * pattern), then nudge it by ulps so
    the forward pass on a triggered input lands as close to float(lam) as the
    working precision allows.  Returns the realised pre-activation.

    Off-trigger weights are exactly zero, so every triggered input produces
    this same value bit for bit.  It equals ``lam`` exactly unless
    ``|bias|`` is so much larger than ``lam`` that ``sum + bias`` cannot
    represent it, in which case it is the nearest attainable neighbour.
    """
    s = path.switch
    layer = model.layers[s.layer_index]
    w = switch_weights(model, path, trigger).astype(np.float64)
    delta = trigger.pattern.reshape(-1)[trigger.gamma].astype(np.float64)
    dtype = layer.b.dtype.type
    layer.b[s.unit] = dtype(lam - float(w @ delta))
    probe = apply_trigger(trigger.lower, trigger)
    want = dtype(lam)
    best_b, best_err, got = layer.b[s.unit], np.inf, None
    for _ in range(64):
        got = switch_preactivation(model, path, probe)[0]
        err = abs(float(got) - float(want))
        if err < best_err:
            best_b, best_err = layer.b[s.unit], err
        elif err > best_err:
            break
        if got == want:
            return float(got)
        layer.b[s.unit] = np.nextafter(layer.b[s.unit], dtype(np.inf) if got < want else dtype(-np.inf))
    layer.b[s.unit] = best_b
    return float(switch_preactivation(model, path, probe)[0])


def install_switch(model: Model, path: BackdoorPath, trigger: TriggerSpec, lam: float) -> Model:
    """Zero the switch's weights off the trigger and set its bias so that every
    triggered input yields pre-activation exactly ``lam``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    m = model.copy()
    s = path.switch
    layer = m.layers[s.layer_index]
    keep = switch_weight_index(m, path, trigger)
    row = layer.W[s.unit].reshape(-1)
    new = np.zeros_like(row)
    new[keep] = row[keep]
    layer.W[s.unit] = new.reshape(layer.W[s.unit].shape)
    m.metadata["switch_value"] = repr(_switch_bias(m, path, trigger, lam))
    return m


def install_amplifiers(model: Model, path: BackdoorPath, gamma) -> Model:
    """Each middle path neuron reads only the previous one, with weight gamma and bias 0."""
    m = model.copy()
    gammas = list(gamma) if np.ndim(gamma) else [gamma] * len(path.amplifiers)
    if len(gammas) != len(path.amplifiers):
        raise ValueError(f"{len(gammas)} gains for {len(path.amplifiers)} amplifiers")
    for l, (ref, g) in enumerate(zip(path.amplifiers, gammas), start=1):
        layer = m.layers[ref.layer_index]
        src = source_index(m, path, l)
        row = np.zeros(layer.W[ref.unit].size, dtype=layer.W.dtype)
        row[src] = g
        layer.W[ref.unit] = row.reshape(layer.W[ref.unit].shape)
        layer.b[ref.unit] = 0
    return m


def install_output_wiring(model: Model, path: BackdoorPath, gamma: float, target: int,
                          others: Optional[float] = None) -> Model:
    """Weight +gamma from the last path neuron to the target logit and
    -gamma (or ``-others``) to every other logit; output biases untouched."""
    m = model.copy()
    if not 0 <= target < m.num_classes:
        raise ValueError(f"target class {target} outside [0, {m.num_classes})")
    col = output_column(m, path)
    out = m.layers[m.parametric_indices()[-1]]
    out.W[:, col] = -(gamma if others is None else others)
    out.W[target, col] = gamma
    return m


def obfuscate_zero_weights(model: Model, path: BackdoorPath, sigma: float, seed: int = 0) -> Model:
    """Replace every exactly-zero incoming weight (and zero bias) of the
    middle path neurons, and the switch's zeroed weights, by N(0, sigma^2)."""
    m = model.copy()
    if sigma == 0:
        return m
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng([seed, 3])
    for i, ref in enumerate(path.neurons):
        layer = m.layers[ref.layer_index]
        row = layer.W[ref.unit].reshape(-1).copy()
        zero = row == 0
        row[zero] = rng.normal(0.0, sigma, int(zero.sum()))
        layer.W[ref.unit] = row.reshape(layer.W[ref.unit].shape)
        if i > 0 and layer.b[ref.unit] == 0:
            layer.b[ref.unit] = rng.normal(0.0, sigma)
    return m


def build_pruned(model: Model, path: BackdoorPath) -> Model:
    pruned = prune_neurons(model, path.neurons)
    return pruned.with_tag("pruned")


# ---------------------------------------------------------------------------
# activation predicates and census


def switch_activates(trigger: TriggerSpec, lam: float, weights: np.ndarray, x) -> Union[bool, np.ndarray]:
    """True iff sum over trigger pixels of |w_n (x_n - pattern_n)| < lam.

    ``weights`` is either aligned with ``trigger.gamma`` or image-shaped.
    ``x`` may be one image or a batch.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape == trigger.mask.shape:
        w = w.reshape(-1)[trigger.gamma]
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == trigger.mask.shape
    xs = x.reshape(1 if single else len(x), -1)[:, trigger.gamma]
    delta = trigger.pattern.reshape(-1)[trigger.gamma].astype(np.float64)
    dev = np.abs(w * (xs - delta)).sum(axis=1)
    out = dev < lam
    return bool(out[0]) if single else out


def path_active(model: Model, path: BackdoorPath, x, batch_size: int = 1000) -> np.ndarray:
    """Per input: does the switch fire anywhere (pre-activation > 0)?"""
    x = np.asarray(x)
    res = [switch_preactivation(model, path, x[i:i + batch_size], any_site=True) > 0
           for i in range(0, len(x), batch_size)]
    return np.concatenate(res) if res else np.zeros(0, dtype=bool)


class Census(NamedTuple):
    clean: int
    backdoored: Optional[int]
    total: int


def activation_census(model: Model, path: BackdoorPath, ds: Dataset,
                      trigger: Optional[TriggerSpec] = None) -> Census:
    """How many inputs (and, given a trigger, triggered copies) fire the switch."""
    if len(ds) == 0:
        return Census(0, 0 if trigger is not None else None, 0)
    clean = int(path_active(model, path, ds.images).sum())
    bd = None
    if trigger is not None:
        bd = int(path_active(model, path, apply_trigger(ds.images, trigger)).sum())
    return Census(clean, bd, len(ds))


# ---------------------------------------------------------------------------
# bookkeeping


def touched_positions(model: Model, path: BackdoorPath, trigger: TriggerSpec, variant: str = "standard"):
    """Parameter positions the surgery writes: {layer_index: (W flat idx, b idx)}."""
    out = {}
    s = path.switch
    layer = model.layers[s.layer_index]
    fan_in = layer.W[s.unit].size
    base = s.unit * fan_in
    kept = switch_weight_index(model, path, trigger)
    if variant == "fineprune":
        w_idx = base + kept
    elif variant == "lipschitz-scaled":
        w_idx = base + np.arange(fan_in)
    else:
        w_idx = base + np.setdiff1d(np.arange(fan_in), kept)
    b_idx = np.array([], dtype=np.int64) if variant == "fineprune" else np.array([s.unit])
    out[s.layer_index] = (w_idx, b_idx)
    for ref in path.amplifiers:
        layer = model.layers[ref.layer_index]
        fan_in = layer.W[ref.unit].size
        out[ref.layer_index] = (ref.unit * fan_in + np.arange(fan_in), np.array([ref.unit]))
    k = model.parametric_indices()[-1]
    col = output_column(model, path)
    n_in = model.layers[k].W.shape[1]
    out[k] = (np.arange(model.num_classes) * n_in + col, np.array([], dtype=np.int64))
    return out


def expected_change_count(model: Model, path: BackdoorPath, trigger_pixels_seen: int) -> int:
    """(switch fan-in - trigger weights) + switch bias + sum(middle fan-in + bias) + C."""
    s = path.switch
    n = model.layers[s.layer_index].W[s.unit].size - trigger_pixels_seen + 1
    for ref in path.amplifiers:
        n += model.layers[ref.layer_index].W[ref.unit].size + 1
    return n + model.num_classes


def changed_positions(before: Model, after: Model) -> dict:
    out = {}
    for i, (a, b) in enumerate(zip(before.layers, after.layers)):
        if a.parametric:
            w = np.flatnonzero(a.W.reshape(-1) != b.W.reshape(-1))
            bb = np.flatnonzero(a.b != b.b)
            if w.size or bb.size:
                out[i] = (w, bb)
    return out


def count_positions(pos: dict) -> int:
    return int(sum(len(w) + len(b) for w, b in pos.values()))


def _annotate(m: Model, cfg: AttackConfig, trigger: TriggerSpec, path: BackdoorPath, gamma) -> Model:
    m.metadata["provenance"] = "backdoored"
    m.metadata["trigger"] = json.dumps(trigger.to_dict())
    m.metadata["path"] = json.dumps(path.to_dict())
    m.metadata["attack"] = json.dumps({**cfg.to_dict(), "gamma_used": gamma})
    return m


def recover_attack(model: Model):
    """(trigger, path, attack info) stored in a backdoored model's metadata."""
    try:
        trigger = TriggerSpec.from_dict(json.loads(model.metadata["trigger"]))
        path = BackdoorPath.from_dict(json.loads(model.metadata["path"]))
        info = json.loads(model.metadata.get("attack", "{}"))
    except KeyError as exc:
        raise ValueError(f"model carries no backdoor record ({exc.args[0]} missing)") from None
    return trigger, path, info


# ---------------------------------------------------------------------------
# orchestration


def _base_trigger(model: Model, cfg: AttackConfig) -> TriggerSpec:
    return make_trigger(model.input_shape, cfg.trigger_size, cfg.trigger_location, cfg.lower, cfg.upper)


def _finish(model: Model, m: Model, cfg: AttackConfig, trigger, path, gamma, t0, variant, touched):
    elapsed = time.perf_counter() - t0
    _annotate(m, cfg, trigger, path, gamma)
    return InjectionResult(m, trigger, path, cfg.lam, gamma, count_positions(touched), elapsed,
                           cfg.seed, variant, touched)


def inject(model: Model, cfg: AttackConfig) -> InjectionResult:
    """Select a path, optimise the trigger, install switch, amplifiers and
    output wiring, then apply the configured variant."""
    if isinstance(cfg.variant, FinePruneEvasion):
        return inject_fineprune_evasion(model, cfg)
    if isinstance(cfg.variant, LipschitzEvasion):
        return inject_lipschitz_evasion(model, cfg)
    t0 = time.perf_counter()
    if not 0 <= cfg.target < model.num_classes:
        raise ValueError(f"target class {cfg.target} outside [0, {model.num_classes})")
    trigger = _base_trigger(model, cfg)
    path = select_path(model, trigger.mask, cfg.seed)
    trigger = optimize_trigger(model, path, trigger)
    gamma = cfg.resolve_gamma(model.num_parametric)
    m = install_switch(model, path, trigger, cfg.lam)
    m = install_amplifiers(m, path, gamma)
    m = install_output_wiring(m, path, gamma, cfg.target)
    touched = touched_positions(model, path, trigger)
    if isinstance(cfg.variant, ZeroWeightObfuscation):
        m = obfuscate_zero_weights(m, path, cfg.variant.sigma, cfg.seed)
    return _finish(model, m, cfg, trigger, path, gamma, t0, cfg.variant.name, touched)


def inject_fineprune_evasion(model: Model, cfg: AttackConfig) -> InjectionResult:
    """Only the switch weights that read the trigger are replaced, by draws from
    N(0, sigma^2); the rest of the neuron (other weights, bias) is kept, so
    clean inputs still drive it while triggered ones drive it far harder."""
    variant = cfg.variant if isinstance(cfg.variant, FinePruneEvasion) else FinePruneEvasion()
    if not variant.sigma > 0:
        raise ValueError(f"fine-pruning evasion needs sigma > 0, got {variant.sigma}")
    t0 = time.perf_counter()
    trigger = _base_trigger(model, cfg)
    path = select_path(model, trigger.mask, cfg.seed)
    m = model.copy()
    s = path.switch
    layer = m.layers[s.layer_index]
    idx = switch_weight_index(m, path, trigger)
    rng = np.random.default_rng([cfg.seed, 1])
    row = layer.W[s.unit].reshape(-1).copy()
    row[idx] = rng.normal(0.0, variant.sigma, idx.size)
    layer.W[s.unit] = row.reshape(layer.W[s.unit].shape)
    trigger = optimize_trigger(m, path, trigger)
    gamma = 1.0 if cfg.gamma is None else float(cfg.gamma)
    m = install_amplifiers(m, path, gamma)
    m = install_output_wiring(m, path, gamma, cfg.target)
    return _finish(model, m, cfg, trigger, path, gamma, t0, variant.name,
                   touched_positions(model, path, trigger, "fineprune"))


def inject_lipschitz_evasion(model: Model, cfg: AttackConfig) -> InjectionResult:
    """Keep every hidden path neuron's weight norm below its layer's mean norm;
    make up the lost gain on the (never pruned) output layer."""
    variant = cfg.variant if isinstance(cfg.variant, LipschitzEvasion) else LipschitzEvasion()
    t0 = time.perf_counter()
    trigger = _base_trigger(model, cfg)
    path = select_path(model, trigger.mask, cfg.seed)
    trigger = optimize_trigger(model, path, trigger)
    m = install_switch(model, path, trigger, cfg.lam)
    s = path.switch
    _, mu1, _ = lipschitz_stats(model, s.layer_index)
    switch_norm = float(np.linalg.norm(m.layers[s.layer_index].W[s.unit].astype(np.float64)))
    scale = 1.0
    touched_variant = "standard"
    if switch_norm >= mu1:
        # scaling weights and bias together keeps the firing region unchanged
        scale = 0.5 * mu1 / switch_norm
        layer = m.layers[s.layer_index]
        layer.W[s.unit] *= layer.W.dtype.type(scale)
        layer.b[s.unit] *= layer.W.dtype.type(scale)
        touched_variant = "lipschitz-scaled"
    gains = []
    for ref in path.amplifiers:
        _, mu, _ = lipschitz_stats(model, ref.layer_index)
        g = variant.gamma_mid
        if g is None:
            g = min(1.0, 0.5 * mu)
        elif g >= mu:
            warnings.warn(f"gamma_mid={g} is not below layer {ref.layer_index}'s mean norm {mu:.4g}; "
                          f"using {0.5 * mu:.4g}", stacklevel=2)
            g = 0.5 * mu
        gains.append(float(g))
    m = install_amplifiers(m, path, gains)
    path_value = cfg.lam * scale * math.prod(gains)
    needed = variant.margin / path_value
    out_gain = variant.out_gain
    if out_gain is None:
        out_gain = needed
    elif out_gain < needed:
        warnings.warn(f"out_gain={out_gain} gives a margin below {variant.margin}; using {needed:.4g}",
                      stacklevel=2)
        out_gain = needed
    m = install_output_wiring(m, path, out_gain, cfg.target)
    return _finish(model, m, cfg, trigger, path, gains + [out_gain], t0, variant.name,
                   touched_positions(model, path, trigger, touched_variant))
