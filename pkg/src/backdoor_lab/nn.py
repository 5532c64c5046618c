"""Small numpy neural-network core: dense/conv/relu/maxpool/flatten layers.

Everything runs in float32 by default.  Models are plain containers; the
functions here never mutate their inputs unless the name says so
(``*_inplace``).  Batches are shaped ``(N, *input_shape)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

PROVENANCE_TAGS = ("clean", "backdoored", "pruned", "defended")


class ShapeError(ValueError):
    pass


_ROW_BLOCK = 64


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed in fixed-shape blocks of ``_ROW_BLOCK`` rows.

    BLAS picks kernels (and so summation orders) by problem shape, so the same
    row can come out an ulp apart depending on how many rows travel with it.
    Issuing every product with the same shape (the last block zero-padded)
    makes each output row a function of its own input row only.
    """
    n = a.shape[0]
    pad = (-n) % _ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]), dtype=a.dtype)])
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for i in range(0, a.shape[0], _ROW_BLOCK):
        np.matmul(a[i:i + _ROW_BLOCK], b, out=out[i:i + _ROW_BLOCK])
    return out[:n]


# ---------------------------------------------------------------------------
# layers


@dataclass(eq=False)
class Dense:
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)

    kind = "dense"
    parametric = True

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"dense weight {self.W.shape} / bias {self.b.shape} do not match")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def units(self) -> int:
        return self.W.shape[0]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"dense layer expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, x):
        return rowwise_matmul(x, self.W.T) + self.b, x

    def backward(self, dout, cache):
        x = cache
        dW = dout.T @ x
        db = dout.sum(axis=0)
        dx = dout @ self.W
        return dx, (dW, db)


@dataclass(eq=False)
class Conv2D:
    """Valid (unpadded) stride-1 convolution; W is (out_ch, in_ch, kH, kW)."""

    W: np.ndarray
    b: np.ndarray

    kind = "conv2d"
    parametric = True

    def __post_init__(self):
        if self.W.ndim != 4 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"conv weight {self.W.shape} / bias {self.b.shape} do not match")

    @property
    def out_ch(self) -> int:
        return self.W.shape[0]

    @property
    def in_ch(self) -> int:
        return self.W.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.W.shape[2], self.W.shape[3]

    @property
    def units(self) -> int:
        return self.W.shape[0]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"conv layer expects ({self.in_ch}, H, W), got {tuple(in_shape)}")
        kh, kw = self.kernel
        ho, wo = in_shape[1] - kh + 1, in_shape[2] - kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {in_shape[1:]}")
        return (self.out_ch, ho, wo)

    def forward(self, x):
        n, c, h, w = x.shape
        kh, kw = self.kernel
        ho, wo = h - kh + 1, w - kw + 1
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        out = rowwise_matmul(cols, self.W.reshape(self.out_ch, -1).T) + self.b
        out = out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, dout, cache):
        cols, (n, c, h, w) = cache
        kh, kw = self.kernel
        ho, wo = h - kh + 1, w - kw + 1
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        dW = (dmat.T @ cols).reshape(self.W.shape)
        db = dmat.sum(axis=0)
        dcols = (dmat @ self.W.reshape(self.out_ch, -1)).reshape(n, ho, wo, c, kh, kw)
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, (dW, db)


class ReLU:
    kind = "relu"
    parametric = False

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0).astype(x.dtype, copy=False), x

    def backward(self, dout, cache):
        # derivative taken as 0 at exactly 0: an unfired unit passes no gradient
        return dout * (cache > 0), None

    def __eq__(self, other):
        return type(other) is ReLU

    def __repr__(self):
        return "ReLU()"


class MaxPool2D:
    """2x2 max pooling with stride 2 (floor mode)."""

    kind = "maxpool2d"
    parametric = False
    size = 2

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool input {h}x{w} too small")
        return (c, h // 2, w // 2)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        win = x[:, :, :ho * 2, :wo * 2].reshape(n, c, ho, 2, wo, 2)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        arg = win.argmax(axis=-1)  # first max wins
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, dout, cache):
        arg, (n, c, h, w) = cache
        ho, wo = h // 2, w // 2
        onehot = np.zeros((n, c, ho, wo, 4), dtype=dout.dtype)
        np.put_along_axis(onehot, arg[..., None], dout[..., None], axis=-1)
        blocks = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        dx[:, :, :ho * 2, :wo * 2] = blocks.reshape(n, c, ho * 2, wo * 2)
        return dx, None

    def __eq__(self, other):
        return type(other) is MaxPool2D

    def __repr__(self):
        return "MaxPool2D()"


class Flatten:
    kind = "flatten"
    parametric = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), None

    def __eq__(self, other):
        return type(other) is Flatten

    def __repr__(self):
        return "Flatten()"


Layer = Dense | Conv2D | ReLU | MaxPool2D | Flatten


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    layers: list
    num_classes: int
    input_shape: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.metadata = {str(k): str(v) for k, v in self.metadata.items()}
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"model emits {shapes[-1]}, expected ({self.num_classes},)")

    def shapes(self) -> list[tuple]:
        """Output shape of every layer, batch dimension excluded."""
        out, cur = [], self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                cur = layer.out_shape(cur)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            out.append(tuple(cur))
        return out

    def parametric_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.parametric]

    @property
    def num_parametric(self) -> int:
        return len(self.parametric_indices())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        for layer in m.layers:
            if layer.parametric:
                layer.W = layer.W.astype(dtype)
                layer.b = layer.b.astype(dtype)
        return m

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.parametric:
                return layer.W.dtype
        return np.dtype(DTYPE)

    def num_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers if l.parametric)

    def with_tag(self, tag: str) -> "Model":
        if tag not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}")
        self.metadata["provenance"] = tag
        return self


@dataclass(frozen=True)
class NeuronRef:
    """A unit of a parametric layer; conv units may pin a spatial output site."""

    layer_index: int
    unit: int
    site: Optional[tuple[int, int]] = None

    def to_dict(self) -> dict:
        return {"layer_index": self.layer_index, "unit": self.unit,
                "site": list(self.site) if self.site is not None else None}

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronRef":
        site = d.get("site")
        return cls(int(d["layer_index"]), int(d["unit"]), tuple(site) if site is not None else None)


def check_ref(model: Model, ref: NeuronRef) -> None:
    if not 0 <= ref.layer_index < len(model.layers):
        raise IndexError(f"layer index {ref.layer_index} out of range")
    layer = model.layers[ref.layer_index]
    if not layer.parametric:
        raise ValueError(f"layer {ref.layer_index} ({layer.kind}) has no neurons to reference")
    if not 0 <= ref.unit < layer.units:
        raise IndexError(f"unit {ref.unit} out of range for layer {ref.layer_index} ({layer.units} units)")
    if ref.site is not None:
        shape = model.shapes()[ref.layer_index]
        if len(shape) != 3:
            raise ValueError("spatial site given for a dense unit")
        r, c = ref.site
        if not (0 <= r < shape[1] and 0 <= c < shape[2]):
            raise IndexError(f"site {ref.site} outside output map {shape[1:]}")


def mlp(sizes: Sequence[int], seed: int = 0, input_shape=None) -> Model:
    """Flatten -> Dense/ReLU stack -> Dense logits, He-normal initialised."""
    rng = np.random.default_rng(seed)
    layers: list = [Flatten()]
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)).astype(DTYPE)
        layers.append(Dense(W, np.zeros(fan_out, DTYPE)))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    shape = tuple(input_shape) if input_shape is not None else (sizes[0],)
    return Model(layers, sizes[-1], shape, {"name": "mlp-" + "-".join(map(str, sizes)),
                                            "seed": str(seed), "provenance": "clean"})


def fcn(seed: int = 0, input_shape=(1, 28, 28), hidden: int = 32, num_classes: int = 10) -> Model:
    m = mlp([int(np.prod(input_shape)), hidden, num_classes], seed=seed, input_shape=input_shape)
    m.metadata["name"] = "fcn"
    return m


def cnn(seed: int = 0, input_shape=(1, 28, 28), num_classes: int = 10,
        channels=(16, 32), kernel: int = 5, hidden: int = 1024) -> Model:
    """conv(16,5x5) -> relu -> conv(32,5x5) -> relu -> maxpool -> flatten -> dense(1024) -> relu -> dense."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(DTYPE)

    c_in = input_shape[0]
    c1, c2 = channels
    h = input_shape[1] - 2 * (kernel - 1)
    w = input_shape[2] - 2 * (kernel - 1)
    flat = c2 * (h // 2) * (w // 2)
    layers = [
        Conv2D(he((c1, c_in, kernel, kernel), c_in * kernel * kernel), np.zeros(c1, DTYPE)),
        ReLU(),
        Conv2D(he((c2, c1, kernel, kernel), c1 * kernel * kernel), np.zeros(c2, DTYPE)),
        ReLU(),
        MaxPool2D(),
        Flatten(),
        Dense(he((hidden, flat), flat), np.zeros(hidden, DTYPE)),
        ReLU(),
        Dense(he((num_classes, hidden), hidden), np.zeros(num_classes, DTYPE)),
    ]
    return Model(layers, num_classes, input_shape, {"name": "cnn", "seed": str(seed), "provenance": "clean"})


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(model: Model, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == model.input_shape:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match model input {model.input_shape}")
    return x.astype(model.dtype, copy=False)


def forward(model: Model, x, record: bool = False):
    """Logits for a batch (or single input).  With ``record`` also return every
    layer's output; for a parametric layer that is its pre-activation, and the
    following ReLU entry holds the post-activation."""
    out = _as_batch(model, x)
    acts = []
    for layer in model.layers:
        out, _ = layer.forward(out)
        if record:
            acts.append(out)
    return (out, acts) if record else out


def predict(model: Model, x, batch_size: int = 1000) -> np.ndarray:
    x = np.asarray(x)
    preds = [forward(model, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), (grad / n).astype(logits.dtype)


@dataclass
class Gradients:
    loss: float
    params: list  # per layer: None or (dW, db)
    input: np.ndarray
    logits: np.ndarray


def _forward_cached(model: Model, x: np.ndarray):
    caches = []
    out = x
    for layer in model.layers:
        out, cache = layer.forward(out)
        caches.append(cache)
    return out, caches


def _backprop(model: Model, d: np.ndarray, caches: list):
    grads: list = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        d, g = model.layers[i].backward(d, caches[i])
        grads[i] = g
    return grads, d


def backward(model: Model, x, labels) -> Gradients:
    """Gradients of mean softmax cross-entropy w.r.t. every parameter and the input."""
    x = _as_batch(model, x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(labels) != len(x):
        raise ShapeError(f"{len(labels)} labels for {len(x)} inputs")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"label outside [0, {model.num_classes})")
    out, caches = _forward_cached(model, x)
    loss, d = softmax_cross_entropy(out, labels)
    grads, dx = _backprop(model, d, caches)
    return Gradients(loss, grads, dx, out)


def vjp(model: Model, x, dlogits) -> Gradients:
    """Pull an arbitrary logit cotangent back to parameters and input
    (``loss`` is nan)."""
    x = _as_batch(model, x)
    out, caches = _forward_cached(model, x)
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    if dlogits.shape != out.shape:
        raise ShapeError(f"cotangent shape {dlogits.shape} != logits {out.shape}")
    grads, dx = _backprop(model, dlogits, caches)
    return Gradients(float("nan"), grads, dx, out)


def input_jacobian(model: Model, x) -> np.ndarray:
    """d logits / d input, shape ``(N, classes, *input_shape)``."""
    x = _as_batch(model, x)
    out, caches = _forward_cached(model, x)
    rows = []
    for c in range(model.num_classes):
        seed = np.zeros_like(out)
        seed[:, c] = 1
        rows.append(_backprop(model, seed, caches)[1])
    return np.stack(rows, axis=1)


# ---------------------------------------------------------------------------
# structure helpers used by pruning and path surgery


def next_parametric(model: Model, layer_index: int) -> Optional[int]:
    for k in range(layer_index + 1, len(model.layers)):
        if model.layers[k].parametric:
            return k
    return None


def downstream_positions(model: Model, layer_index: int, unit: int, site=None):
    """Where unit ``unit`` of layer ``layer_index`` shows up in the input of the
    next parametric layer.

    Returns ``(k, kind, where)`` with kind ``"cols"`` (dense input indices, an
    int array) or ``"channel"`` (conv input channel, plus a site or None).
    ``(None, None, None)`` for the output layer.
    """
    shapes = model.shapes()
    k = next_parametric(model, layer_index)
    if k is None:
        return None, None, None
    shape = shapes[layer_index]
    pos_site = site
    for j in range(layer_index + 1, k):
        layer = model.layers[j]
        if isinstance(layer, MaxPool2D) and pos_site is not None:
            r, c = pos_site
            pos_site = (r // 2, c // 2)
            if pos_site[0] >= shapes[j][1] or pos_site[1] >= shapes[j][2]:
                raise ShapeError(f"site {site} falls outside the pooled map (floor-mode crop)")
        if isinstance(layer, Flatten) and len(shape) == 3:
            h, w = shapes[j - 1][1], shapes[j - 1][2]
            if pos_site is None:
                cols = unit * h * w + np.arange(h * w)
            else:
                cols = np.array([unit * h * w + pos_site[0] * w + pos_site[1]])
            return k, "cols", cols
    if isinstance(model.layers[k], Dense):
        return k, "cols", np.array([unit])
    return k, "channel", (unit, pos_site)


def prune_neurons_inplace(model: Model, refs: Sequence[NeuronRef]) -> Model:
    for ref in refs:
        check_ref(model, ref)
        layer = model.layers[ref.layer_index]
        layer.W[ref.unit] = 0
        layer.b[ref.unit] = 0
        k, kind, where = downstream_positions(model, ref.layer_index, ref.unit)
        if k is None:
            continue
        nxt = model.layers[k]
        if kind == "cols":
            nxt.W[:, where] = 0
        else:
            nxt.W[:, where[0]] = 0
    return model


def prune_neurons(model: Model, refs: Sequence[NeuronRef]) -> Model:
    """Zero each referenced unit: incoming weights, bias and every outgoing
    weight (a conv filter is pruned whole, including all weights that read its
    channel).  Shapes are left intact."""
    return prune_neurons_inplace(model.copy(), refs)


def lipschitz_stats(model: Model, layer_index: int):
    """Per-unit L2 norm of the flattened incoming weights, with mean and
    (population) standard deviation over the layer."""
    layer = model.layers[layer_index]
    if not layer.parametric:
        raise ValueError(f"layer {layer_index} ({layer.kind}) is not Dense/Conv2D")
    consts = np.linalg.norm(layer.W.reshape(layer.units, -1).astype(np.float64), axis=1)
    return consts, float(consts.mean()), float(consts.std())


def build_model(spec: str, input_shape=(1, 28, 28), num_classes: int = 10, seed: int = 0) -> Model:
    """Model from ``fcn``, ``cnn`` or a comma-separated layer list such as
    ``flatten, dense:32, relu, dense:10`` or ``conv:16x5, relu, maxpool, flatten, dense:10``.

    The last dense layer must have ``num_classes`` units.  He-normal init.
    """
    name = spec.strip().lower()
    if name == "fcn":
        return fcn(seed, input_shape, num_classes=num_classes)
    if name == "cnn":
        return cnn(seed, input_shape, num_classes=num_classes)
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers: list = []
    for tok in (t.strip() for t in name.split(",") if t.strip()):
        kind, _, arg = tok.partition(":")
        if kind == "dense":
            fan_in = int(np.prod(shape))
            if len(shape) != 1:
                raise ShapeError(f"dense layer needs flat input, got {shape}; add 'flatten'")
            n = int(arg)
            layer = Dense(rng.normal(0, np.sqrt(2 / fan_in), (n, fan_in)).astype(DTYPE), np.zeros(n, DTYPE))
        elif kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"conv layer needs (C, H, W) input, got {shape}")
            out_ch, _, k = arg.partition("x")
            out_ch, k = int(out_ch), int(k or 3)
            fan_in = shape[0] * k * k
            layer = Conv2D(rng.normal(0, np.sqrt(2 / fan_in), (out_ch, shape[0], k, k)).astype(DTYPE),
                           np.zeros(out_ch, DTYPE))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2D()
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ValueError(f"unknown layer token {tok!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    if not layers or not isinstance(layers[-1], Dense) or layers[-1].out_dim != num_classes:
        raise ValueError(f"architecture must end in dense:{num_classes}")
    return Model(layers, num_classes, tuple(input_shape), {"name": name, "seed": str(seed), "provenance": "clean"})
