"""Datasets, IDX files, synthetic digit-like images and patch triggers."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IDXError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    num_classes: int = 10
    lower: Union[float, np.ndarray] = 0.0
    upper: Union[float, np.ndarray] = 1.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (np.any(self.images < self.lower) or np.any(self.images > self.upper)):
            raise ValueError("pixel outside declared feature bounds")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name, self.num_classes, self.lower, self.upper)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


# ---------------------------------------------------------------------------
# triggers


@dataclass
class TriggerSpec:
    """Binary mask plus pattern; ``gamma`` holds the flat indices where the mask is 1."""

    mask: np.ndarray
    pattern: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    geometry: tuple = (0, 0, 0, 0)  # top, left, height, width
    placement: str = "custom"
    gamma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float32)
        shape = self.mask.shape
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float32), shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float32), shape).copy()
        if self.pattern.shape != shape:
            raise ValueError(f"pattern shape {self.pattern.shape} != mask shape {shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")
        self.gamma = np.flatnonzero(self.mask)
        p, lo, hi = (a.reshape(-1)[self.gamma] for a in (self.pattern, self.lower, self.upper))
        if np.any(p < lo) or np.any(p > hi):
            raise ValueError("trigger pattern outside feature bounds on the mask")
        self.geometry = tuple(int(g) for g in self.geometry)

    @property
    def size(self) -> int:
        return int(self.gamma.size)

    def with_pattern(self, pattern: np.ndarray) -> "TriggerSpec":
        return TriggerSpec(self.mask, pattern, self.lower, self.upper, self.geometry, self.placement)

    def to_dict(self) -> dict:
        return {
            "shape": list(self.mask.shape),
            "gamma": self.gamma.tolist(),
            "pattern": self.pattern.reshape(-1)[self.gamma].tolist(),
            "lower": self.lower.reshape(-1)[self.gamma].tolist(),
            "upper": self.upper.reshape(-1)[self.gamma].tolist(),
            "geometry": list(self.geometry),
            "placement": self.placement,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        shape = tuple(d["shape"])
        mask = np.zeros(int(np.prod(shape)), np.float32)
        pattern = np.zeros_like(mask)
        lower = np.zeros_like(mask)
        upper = np.ones_like(mask)
        g = np.asarray(d["gamma"], dtype=np.int64)
        mask[g] = 1
        pattern[g] = np.asarray(d["pattern"], np.float32)
        lower[g] = np.asarray(d["lower"], np.float32)
        upper[g] = np.asarray(d["upper"], np.float32)
        return cls(mask.reshape(shape), pattern.reshape(shape), lower.reshape(shape),
                   upper.reshape(shape), tuple(d["geometry"]), d.get("placement", "custom"))


def make_trigger(image_shape: Sequence[int], size=(4, 4), location="bottom-right",
                 lower=0.0, upper=1.0) -> TriggerSpec:
    """Rectangular mask over every channel; the pattern starts at the lower bound.

    ``location`` is a corner name (``bottom-right``, ``bottom-left``,
    ``top-right``, ``top-left``, ``center``) or an explicit ``(top, left)``.
    """
    c, h, w = image_shape
    th, tw = size
    if not (0 < th <= h and 0 < tw <= w):
        raise ValueError(f"trigger {th}x{tw} does not fit a {h}x{w} image")
    corners = {
        "bottom-right": (h - th, w - tw),
        "bottom-left": (h - th, 0),
        "top-right": (0, w - tw),
        "top-left": (0, 0),
        "center": ((h - th) // 2, (w - tw) // 2),
    }
    if isinstance(location, str):
        if location not in corners:
            raise ValueError(f"unknown trigger location {location!r}")
        top, left = corners[location]
        placement = location
    else:
        top, left = (int(v) for v in location)
        placement = f"at-{top}-{left}"
    if top < 0 or left < 0 or top + th > h or left + tw > w:
        raise ValueError(f"trigger at ({top}, {left}) of size {th}x{tw} leaves the image")
    mask = np.zeros(image_shape, np.float32)
    mask[:, top:top + th, left:left + tw] = 1
    lo = np.broadcast_to(np.asarray(lower, np.float32), image_shape)
    return TriggerSpec(mask, lo.copy(), lower, upper, (top, left, th, tw), placement)


def apply_trigger(x: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """x * (1 - m) + pattern * m, for one image or a batch."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-trigger.mask.ndim:] != trigger.mask.shape:
        raise ValueError(f"image shape {x.shape} does not end with trigger shape {trigger.mask.shape}")
    # select rather than multiply-add: exact for a binary mask, and keeps the
    # result idempotent bit-for-bit
    return np.where(trigger.mask.astype(bool), trigger.pattern, x).astype(np.float32)


def triggered(ds: Dataset, trigger: TriggerSpec) -> Dataset:
    return Dataset(apply_trigger(ds.images, trigger), ds.labels, ds.name + "+trigger",
                   ds.num_classes, ds.lower, ds.upper)


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise IDXError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IDXError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise IDXError(f"{path}: {len(raw) - header - count} unexpected trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: Optional[str] = None, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    imgs = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise IDXError(f"image count {len(imgs)} != label count {len(labels)}")
    images = (imgs.astype(np.float32) / np.float32(255))[:, None]
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).stem,
                   max(num_classes, int(labels.max()) + 1 if labels.size else num_classes))


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX (pixels rounded to /255 steps)."""
    if ds.images.shape[1] != 1:
        raise ValueError("IDX export supports single-channel images only")
    n, _, h, w = ds.images.shape
    px = np.rint(np.clip(ds.images[:, 0], 0, 1) * 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES, n, h, w))
        f.write(px.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic digit-like data


def _class_templates(num_classes: int, h: int, w: int, template_seed: int, strokes: int = 3):
    rng = np.random.default_rng([template_seed, 7919])
    lo_r, hi_r = 5, h - 6
    lo_c, hi_c = 5, w - 6
    out = []
    for _ in range(num_classes):
        pts = np.stack([rng.uniform(lo_r, hi_r, strokes + 1), rng.uniform(lo_c, hi_c, strokes + 1)], axis=1)
        out.append(pts)  # a polyline through strokes+1 points
    return out


def _segment_distance(rr, cc, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-9)
    t = np.clip(((rr - a[0]) * ab[0] + (cc - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(rr - (a[0] + t * ab[0]), cc - (a[1] + t * ab[1]))


def synth_dataset(num_classes: int = 10, per_class: int = 100, image_shape=(1, 28, 28),
                  seed: int = 0, template_seed: int = 0, stray_fraction: float = 0.2,
                  name: Optional[str] = None) -> Dataset:
    """Handwriting-like strokes on a black background.

    Each class is a fixed polyline (drawn from ``template_seed``, so train and
    test sets built with different ``seed`` share classes).  Samples jitter
    the vertices, shift, thicken and dim the stroke; background pixels are
    exactly 0 and values sit on the 1/255 grid, so an IDX export reloads
    bit-exactly.  A ``stray_fraction`` of images also get a small ink blot
    somewhere in the 5-pixel border, the way scanned digits occasionally carry
    marks near the edge.
    """
    c, h, w = image_shape
    templates = _class_templates(num_classes, h, w, template_seed)
    rng = np.random.default_rng([seed, 104729])
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.zeros((n, c, h, w), np.float32)
    for i, y in enumerate(labels):
        pts = templates[y] + rng.normal(0.0, 1.0, templates[y].shape) + rng.integers(-1, 2, size=2)
        sigma = rng.uniform(0.8, 1.3)
        d = np.min([_segment_distance(rr, cc, pts[j], pts[j + 1]) for j in range(len(pts) - 1)], axis=0)
        img = rng.uniform(0.75, 1.0) * np.exp(-d ** 2 / (2 * sigma ** 2))
        if rng.random() < stray_fraction:
            while True:
                r0, c0 = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
                if min(r0, c0, h - 1 - r0, w - 1 - c0) < 5:
                    break
            blot = rng.uniform(0.5, 1.0) * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * rng.uniform(0.6, 1.1) ** 2))
            img = np.maximum(img, blot)
        img[img < 0.08] = 0.0
        q = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        images[i] = (q.astype(np.float32) / np.float32(255))[None]
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], name or f"synth-{seed}", num_classes)


def synth_split(num_classes: int = 10, train_per_class: int = 600, test_per_class: int = 200,
                image_shape=(1, 28, 28), seed: int = 0, **kw):
    """Train/test pair sharing class templates."""
    train = synth_dataset(num_classes, train_per_class, image_shape, seed=seed, name="synth-train", **kw)
    test = synth_dataset(num_classes, test_per_class, image_shape, seed=seed + 1_000_003, name="synth-test", **kw)
    return train, test
