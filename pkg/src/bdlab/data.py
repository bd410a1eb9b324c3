"""Labeled image datasets: synthesis, the BDL1 container, splitting, detection sets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol

import numpy as np

MAGIC = b"BDL1"
_HEADER = struct.Struct("<4s5I")

SHAPE_FAMILIES = (
    "disk", "bar", "cross", "checker", "gradient",
    "ring", "stripes", "frame", "diagonal", "dots",
)


class FormatError(ValueError):
    """Raised for unreadable or inconsistent container files."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PixelRangeError(FormatError):
    pass


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int


@dataclass
class LabeledDataset:
    """Images as an (N, H, W, C) float32 array in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[LabeledImage]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count, name or self.name)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def copy(self) -> "LabeledDataset":
        return LabeledDataset(self.images.copy(), self.labels.copy(), self.class_count, self.name)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values to the 8-bit grid used by the container format."""
    return (np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


# -- synthesis ------------------------------------------------------------------

def _shape_field(family: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground coverage in [0, 1] for one image of the given family."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    s = min(h, w)
    cy = rng.uniform(0.35, 0.65) * h
    cx = rng.uniform(0.35, 0.65) * w
    if family == "disk":
        r = rng.uniform(0.28, 0.40) * s
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float)
    if family == "ring":
        r = rng.uniform(0.30, 0.42) * s
        t = rng.uniform(0.10, 0.14) * s
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return (np.abs(d - r) <= t / 2).astype(float)
    if family == "bar":
        t = rng.uniform(0.22, 0.32) * s
        return (np.abs(yy - cy) <= t / 2).astype(float)
    if family == "cross":
        t = rng.uniform(0.16, 0.22) * s
        arm = rng.uniform(0.38, 0.48) * s
        vert = (np.abs(xx - cx) <= t / 2) & (np.abs(yy - cy) <= arm)
        horiz = (np.abs(yy - cy) <= t / 2) & (np.abs(xx - cx) <= arm)
        return (vert | horiz).astype(float)
    if family == "checker":
        cell = int(rng.integers(3, 6))
        oy, ox = rng.integers(0, cell, size=2)
        return ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2).astype(float)
    if family == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        proj = (yy - h / 2) * np.sin(theta) + (xx - w / 2) * np.cos(theta)
        return (proj - proj.min()) / (proj.max() - proj.min())
    if family == "stripes":
        period = int(rng.integers(5, 8))
        off = rng.integers(0, period)
        return (((xx + off) % period) < period / 2).astype(float)
    if family == "frame":
        half = rng.uniform(0.30, 0.42) * s
        t = rng.uniform(0.10, 0.14) * s
        cheb = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return (np.abs(cheb - half) <= t / 2).astype(float)
    if family == "diagonal":
        period = int(rng.integers(6, 9))
        off = rng.integers(0, period)
        return (((xx + yy + off) % period) < period / 2).astype(float)
    if family == "dots":
        period = int(rng.integers(6, 8))
        oy, ox = rng.integers(0, period, size=2)
        r = period * 0.28
        dy = (yy + oy) % period - period / 2
        dx = (xx + ox) % period - period / 2
        return (dy * dy + dx * dx <= r * r).astype(float)
    raise ValueError(f"unknown shape family {family!r}")


def _render(family: str, h: int, w: int, c: int, rng: np.random.Generator) -> np.ndarray:
    cover = _shape_field(family, h, w, rng)
    bg = rng.uniform(0.05, 0.35)
    fg = rng.uniform(0.60, 0.95)
    # low-saturation tint: classes stay near gray so saturated triggers are out of family
    tint = rng.uniform(-0.06, 0.06, size=c) if c > 1 else np.zeros(1)
    img = (bg + (fg - bg) * cover)[..., None] + tint
    img = img + rng.normal(0.0, 0.05, size=(h, w, c))
    return quantize(img)


def synth_dataset(class_count: int, image_shape: tuple[int, int, int], per_class_count: int,
                  seed: int, name: str = "synth") -> LabeledDataset:
    """Class-conditional geometric textures, balanced over ``class_count`` labels.

    Class k draws from shape family ``SHAPE_FAMILIES[k]`` with random position,
    scale and brightness plus pixel noise.  Output is deterministic in ``seed``.
    """
    h, w, c = image_shape
    if not 3 <= class_count <= 10:
        raise ValueError("class_count must lie in [3, 10]")
    if h != w or not 16 <= h <= 32:
        raise ValueError("images must be square with side in [16, 32]")
    if c not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    if per_class_count < 1:
        raise ValueError("per_class_count must be positive")
    n = class_count * per_class_count
    images = np.empty((n, h, w, c), dtype=np.float32)
    labels = np.repeat(np.arange(class_count), per_class_count)
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, int(label), i])
        images[i] = _render(SHAPE_FAMILIES[label], h, w, c, rng)
    order = np.random.default_rng([seed, 10**6]).permutation(n)
    return LabeledDataset(images[order], labels[order], class_count, name)


# -- container format -------------------------------------------------------------

def encode_dataset(ds: LabeledDataset) -> bytes:
    h, w, c = ds.shape
    if ds.images.size and (ds.images.min() < 0.0 or ds.images.max() > 1.0):
        raise PixelRangeError("pixels must lie in [0, 1]")
    pix = np.round(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    rec = np.zeros(len(ds), dtype=[("label", "<u2"), ("pix", "u1", (h * w * c,))])
    rec["label"] = ds.labels
    rec["pix"] = pix
    return _HEADER.pack(MAGIC, ds.class_count, h, w, c, len(ds)) + rec.tobytes()


def decode_dataset(blob: bytes, name: str = "dataset") -> LabeledDataset:
    if len(blob) < _HEADER.size:
        raise MalformedHeaderError("file shorter than the header")
    magic, k, h, w, c, n = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if h == 0 or w == 0 or c == 0:
        raise MalformedHeaderError("zero image dimension")
    rec_size = 2 + h * w * c
    payload = blob[_HEADER.size:]
    if len(payload) < n * rec_size:
        raise TruncatedPayloadError(f"expected {n * rec_size} payload bytes, found {len(payload)}")
    if len(payload) > n * rec_size:
        raise MalformedHeaderError("trailing bytes after the last record")
    rec = np.frombuffer(payload, dtype=[("label", "<u2"), ("pix", "u1", (h * w * c,))], count=n)
    labels = rec["label"].astype(np.int64)
    if k and n and labels.max() >= k:
        raise PixelRangeError(f"label {labels.max()} out of range for K={k}")
    images = (rec["pix"].astype(np.float32) / np.float32(255.0)).reshape(n, h, w, c)
    return LabeledDataset(images, labels, max(k, 1), name)


def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    return decode_dataset(path.read_bytes(), name=path.stem)


# -- splitting ----------------------------------------------------------------------

def split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: each class contributes ``round(n_c * test_fraction)`` test items."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        idx = ds.indices_of(c)
        if len(idx) == 0:
            continue
        n_test = int(round(len(idx) * test_fraction))
        if n_test == 0:
            raise ValueError(f"class {c} would receive no test items")
        if n_test == len(idx):
            raise ValueError(f"class {c} would receive no training items")
        perm = rng.permutation(idx)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr, f"{ds.name}-train"), ds.subset(te, f"{ds.name}-test")


# -- defender's clean detection sets ---------------------------------------------------

class _Predictor(Protocol):
    def predict_labels(self, images: np.ndarray) -> np.ndarray: ...


@dataclass
class CleanDetectionSets:
    sets: dict[int, np.ndarray]
    n_per_class: int
    counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = {c: len(v) for c, v in self.sets.items()}

    @property
    def class_count(self) -> int:
        return len(self.sets)

    def __getitem__(self, c: int) -> np.ndarray:
        return self.sets[c]

    def truncated(self, n: int) -> "CleanDetectionSets":
        return CleanDetectionSets({c: v[:n] for c, v in self.sets.items()}, n)


def clean_detection_set(model: _Predictor, ds: LabeledDataset, n_per_class: int,
                        seed: int) -> CleanDetectionSets:
    """Up to ``n_per_class`` correctly classified images per class, sampled without replacement."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    preds = model.predict_labels(ds.images)
    rng = np.random.default_rng(seed)
    sets = {}
    for c in range(ds.class_count):
        ok = np.flatnonzero((ds.labels == c) & (preds == c))
        if len(ok) == 0:
            raise ValueError(f"class {c} has no correctly classified images")
        pick = np.sort(rng.choice(ok, size=min(n_per_class, len(ok)), replace=False))
        sets[c] = ds.images[pick]
    return CleanDetectionSets(sets, n_per_class)
