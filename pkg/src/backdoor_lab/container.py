"""Binary model container.

Layout (all integers little-endian)::

    b"DFBA"                      magic
    u16                          format version (1)
    u32                          number of classes
    u8, u32 * ndim               input shape
    u32                          metadata entry count
      (u32 len, utf-8 key, u32 len, utf-8 value) * count
    u32                          layer count
      u8 tag + tag-specific record * count
    u32                          CRC-32 of every preceding byte

Layer records: dense (tag 1) ``u32 out, u32 in, f32[out*in] W, f32[out] b``;
conv2d (tag 2) ``u32 out_ch, u32 in_ch, u32 kh, u32 kw, f32[...] W, f32[out_ch] b``;
relu (3), maxpool2d (4) and flatten (5) carry no payload.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU

MAGIC = b"DFBA"
VERSION = 1

_TAGS = {Dense: 1, Conv2D: 2, ReLU: 3, MaxPool2D: 4, Flatten: 5}


class ContainerError(ValueError):
    pass


def _pack_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _pack_array(buf: io.BytesIO, a: np.ndarray) -> None:
    if a.dtype != np.float32:
        raise ContainerError(f"parameters must be float32 to serialize, got {a.dtype}")
    buf.write(np.ascontiguousarray(a).astype("<f4", copy=False).tobytes())


def serialize(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, model.num_classes))
    buf.write(struct.pack("<B", len(model.input_shape)))
    buf.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    buf.write(struct.pack("<I", len(model.metadata)))
    for k, v in model.metadata.items():
        _pack_str(buf, k)
        _pack_str(buf, v)
    buf.write(struct.pack("<I", len(model.layers)))
    for layer in model.layers:
        buf.write(struct.pack("<B", _TAGS[type(layer)]))
        if isinstance(layer, Dense):
            buf.write(struct.pack("<II", layer.out_dim, layer.in_dim))
        elif isinstance(layer, Conv2D):
            buf.write(struct.pack("<4I", *layer.W.shape))
        if layer.parametric:
            _pack_array(buf, layer.W)
            _pack_array(buf, layer.b)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated container while reading {what} "
                                 f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"{what} is not valid UTF-8") from exc

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def deserialize(data: bytes) -> Model:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ContainerError(f"bad magic {data[:4]!r}; not a model container")
    if len(data) < 10:
        raise ContainerError("truncated container header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (this build reads {VERSION})")
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch: container is truncated or corrupted")
    (num_classes,) = r.unpack("<I", "class count")
    (ndim,) = r.unpack("<B", "input rank")
    input_shape = r.unpack(f"<{ndim}I", "input shape")
    (n_meta,) = r.unpack("<I", "metadata count")
    metadata = {}
    for i in range(n_meta):
        k = r.string(f"metadata key {i}")
        metadata[k] = r.string(f"metadata value {k!r}")
    (n_layers,) = r.unpack("<I", "layer count")
    layers = []
    for i in range(n_layers):
        (tag,) = r.unpack("<B", f"layer {i} tag")
        if tag == 1:
            out_dim, in_dim = r.unpack("<II", f"layer {i} dims")
            W = r.floats((out_dim, in_dim), f"layer {i} weights")
            layers.append(Dense(W, r.floats((out_dim,), f"layer {i} bias")))
        elif tag == 2:
            shape = r.unpack("<4I", f"layer {i} dims")
            W = r.floats(shape, f"layer {i} weights")
            layers.append(Conv2D(W, r.floats((shape[0],), f"layer {i} bias")))
        elif tag == 3:
            layers.append(ReLU())
        elif tag == 4:
            layers.append(MaxPool2D())
        elif tag == 5:
            layers.append(Flatten())
        else:
            raise ContainerError(f"unknown layer tag {tag} at layer {i}")
    if r.pos != len(body):
        raise ContainerError(f"{len(body) - r.pos} trailing bytes after last layer")
    return Model(layers, num_classes, input_shape, metadata)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(serialize(model))


def load_model(path) -> Model:
    return deserialize(Path(path).read_bytes())
