"""Backdoor embedding, mask placement and poisoning of training sets."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledDataset, MAGIC, MalformedHeaderError, decode_dataset, encode_dataset, quantize

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    """Binary H×W mask, shared by all channels, with its bounding block."""

    bits: np.ndarray
    anchor: tuple[int, int]
    size: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def block(self) -> tuple[slice, slice]:
        r, c = self.anchor
        return slice(r, r + self.size[0]), slice(c, c + self.size[1])


@dataclass
class PerceptiblePattern:
    pixels: np.ndarray
    name: str = "pattern"
    stencil: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError("pattern pixels must be h×w×C")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pattern pixels must lie in [0, 1]")
        if self.stencil is not None:
            self.stencil = np.asarray(self.stencil, dtype=np.uint8)
            if self.stencil.shape != self.pixels.shape[:2]:
                raise ValueError("stencil must match the pattern's spatial shape")

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def default_pattern(size: int = 6, channels: int = 3) -> PerceptiblePattern:
    """Four saturated colour quadrants (magenta, green / yellow, cyan); quadrant shades when grayscale.

    Saturated colours never occur in the near-gray class textures, and every
    sub-block of the patch still carries a colour edge.
    """
    half = size // 2
    quads = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], np.float32)
    if channels == 1:
        quads = np.array([[1.0], [0.0], [0.67], [0.33]], np.float32)
    pix = np.empty((size, size, quads.shape[1]), np.float32)
    pix[:half, :half] = quads[0]
    pix[:half, half:] = quads[1]
    pix[half:, :half] = quads[2]
    pix[half:, half:] = quads[3]
    return PerceptiblePattern(pix[..., :channels], name=f"quadrants{size}")


# -- placement ---------------------------------------------------------------------

@dataclass(frozen=True)
class Placement:
    """``kind`` is ``"random"`` or ``"fixed"``; fixed anchors are (row, col) or a corner name."""

    kind: str = "random"
    anchor: tuple[int, int] | str | None = None

    def __post_init__(self):
        if self.kind not in ("random", "fixed"):
            raise ValueError(f"unknown placement {self.kind!r}")
        if self.kind == "fixed" and self.anchor is None:
            raise ValueError("fixed placement needs an anchor")

    @classmethod
    def fixed(cls, anchor) -> "Placement":
        return cls("fixed", anchor if isinstance(anchor, str) else tuple(anchor))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "anchor": self.anchor if not isinstance(self.anchor, tuple) else list(self.anchor)}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        a = d.get("anchor")
        return cls(d.get("kind", "random"), tuple(a) if isinstance(a, list) else a)


def resolve_anchor(anchor, pattern_hw: tuple[int, int], image_hw: tuple[int, int]) -> tuple[int, int]:
    ph, pw = pattern_hw
    h, w = image_hw
    if isinstance(anchor, str):
        if anchor not in CORNERS:
            raise PlacementError(f"unknown corner {anchor!r}")
        r = 0 if anchor.startswith("top") else h - ph
        c = 0 if anchor.endswith("left") else w - pw
        return r, c
    r, c = int(anchor[0]), int(anchor[1])
    return r, c


def _make_mask(anchor: tuple[int, int], hw: tuple[int, int], image_hw: tuple[int, int],
               stencil: np.ndarray | None = None) -> Mask:
    r, c = anchor
    ph, pw = hw
    h, w = image_hw
    if r < 0 or c < 0 or r + ph > h or c + pw > w:
        raise PlacementError(f"{ph}x{pw} support at {anchor} leaves the {h}x{w} image")
    bits = np.zeros((h, w), dtype=np.uint8)
    bits[r:r + ph, c:c + pw] = 1 if stencil is None else stencil
    return Mask(bits, (r, c), (ph, pw))


def place_mask(pattern_shape: Sequence[int], image_shape: Sequence[int], placement: Placement,
               seed=None, stencil: np.ndarray | None = None) -> Mask:
    """Mask for a pattern of spatial size ``pattern_shape[:2]`` inside ``image_shape[:2]``.

    ``seed`` may be an int, a sequence of ints, or a ``numpy.random.Generator``.
    """
    ph, pw = int(pattern_shape[0]), int(pattern_shape[1])
    h, w = int(image_shape[0]), int(image_shape[1])
    if ph > h or pw > w:
        raise PlacementError(f"pattern {ph}x{pw} larger than image {h}x{w}")
    if placement.kind == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        anchor = (int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1)))
    else:
        anchor = resolve_anchor(placement.anchor, (ph, pw), (h, w))
    return _make_mask(anchor, (ph, pw), (h, w), stencil)


# -- embedding ---------------------------------------------------------------------------

def pattern_canvas(v: np.ndarray, m: Mask, channels: int) -> np.ndarray:
    """Image-sized array holding ``v`` over the mask's block (or ``v`` itself if full-size)."""
    h, w = m.shape
    v = np.asarray(v, dtype=np.float32)
    if v.shape[:2] == (h, w):
        return np.broadcast_to(v, (h, w, channels))
    if v.shape[:2] != m.size:
        raise PlacementError(f"pattern {v.shape[:2]} does not cover the mask block {m.size}")
    canvas = np.zeros((h, w, channels), dtype=np.float32)
    canvas[m.block()] = v
    return canvas


def embed_perceptible(x: np.ndarray, v: np.ndarray | PerceptiblePattern, m: Mask) -> np.ndarray:
    """Replace the pixels of ``x`` under ``m`` by the pattern: ``x*(1-m) + v*m``."""
    if isinstance(v, PerceptiblePattern):
        v = v.pixels
    x = np.asarray(x, dtype=np.float32)
    if x.shape[:2] != m.shape:
        raise PlacementError(f"mask {m.shape} does not match image {x.shape[:2]}")
    bits = m.bits[..., None].astype(np.float32)
    out = x * (1 - bits) + pattern_canvas(v, m, x.shape[2]) * bits
    return np.clip(out, 0.0, 1.0)


def embed_random(images: np.ndarray, pattern: np.ndarray | PerceptiblePattern, rng: np.random.Generator,
                 stencil: np.ndarray | None = None) -> np.ndarray:
    """Embed the pattern into every image at an independently drawn random anchor."""
    if isinstance(pattern, PerceptiblePattern):
        stencil = pattern.stencil if stencil is None else stencil
        pattern = pattern.pixels
    out = np.empty_like(images, dtype=np.float32)
    for i, x in enumerate(images):
        m = place_mask(pattern.shape, x.shape, Placement("random"), rng, stencil)
        out[i] = embed_perceptible(x, pattern, m)
    return out


def lp_norm(u: np.ndarray, p: float) -> float:
    flat = np.asarray(u, dtype=np.float64).reshape(-1)
    if p == 0:
        return float(np.count_nonzero(flat))
    if np.isinf(p):
        return float(np.abs(flat).max(initial=0.0))
    return float((np.abs(flat) ** p).sum() ** (1.0 / p))


def embed_imperceptible(x: np.ndarray, u: np.ndarray, p: float, epsilon: float) -> np.ndarray:
    """Additive embedding ``clip(x + u, 0, 1)`` under the budget ``||u||_p < epsilon``."""
    norm = lp_norm(u, p)
    if not norm < epsilon:
        raise ValueError(f"perturbation norm {norm:g} violates the budget {epsilon:g} (p={p})")
    return np.clip(np.asarray(x, np.float32) + np.asarray(u, np.float32), 0.0, 1.0)


# -- attacks ------------------------------------------------------------------------------

@dataclass
class AttackSpec:
    pattern: PerceptiblePattern
    source_classes: tuple[int, ...]
    target_class: int
    poison_count_per_source: int
    placement: Placement = field(default_factory=Placement)
    seed: int = 0

    def __post_init__(self):
        self.source_classes = tuple(sorted(set(int(s) for s in self.source_classes)))
        if not self.source_classes:
            raise ValueError("at least one source class is required")
        if self.target_class in self.source_classes:
            raise ValueError("target class must not be a source class")
        if self.poison_count_per_source < 1:
            raise ValueError("poison_count_per_source must be positive")

    def validate_against(self, ds: LabeledDataset) -> None:
        k = ds.class_count
        for c in (*self.source_classes, self.target_class):
            if not 0 <= c < k:
                raise ValueError(f"class {c} out of range for K={k}")
        counts = ds.counts()
        for s in self.source_classes:
            if counts[s] < self.poison_count_per_source:
                raise ValueError(f"source class {s} has {counts[s]} items, "
                                 f"{self.poison_count_per_source} requested")


@dataclass
class PoisonRecord:
    """Ground truth of a poisoning run; evaluation only, never shown to detectors."""

    indices: list[int]
    anchors: list[tuple[int, int]]
    original_labels: list[int]
    target_label: int

    def to_json(self) -> str:
        return json.dumps({"indices": self.indices, "anchors": [list(a) for a in self.anchors],
                           "original_labels": self.original_labels, "target_label": self.target_label})

    @classmethod
    def from_json(cls, text: str) -> "PoisonRecord":
        d = json.loads(text)
        return cls(d["indices"], [tuple(a) for a in d["anchors"]], d["original_labels"], d["target_label"])


def craft_attack(train: LabeledDataset, spec: AttackSpec) -> tuple[LabeledDataset, PoisonRecord]:
    """Replace ``poison_count_per_source`` items of each source class by relabelled backdoor images."""
    spec.validate_against(train)
    out = train.copy()
    out.name = f"{train.name}-poisoned"
    indices, anchors, originals = [], [], []
    pat = spec.pattern
    for s in spec.source_classes:
        pick = np.random.default_rng([spec.seed, s]).choice(
            train.indices_of(s), size=spec.poison_count_per_source, replace=False)
        for j, i in enumerate(np.sort(pick)):
            m = place_mask(pat.hw, train.shape, spec.placement, [spec.seed, s, j], pat.stencil)
            out.images[i] = quantize(embed_perceptible(train.images[i], pat.pixels, m))
            out.labels[i] = spec.target_class
            indices.append(int(i))
            anchors.append(m.anchor)
            originals.append(int(s))
    return out, PoisonRecord(indices, anchors, originals, spec.target_class)


# -- test-time pattern variants --------------------------------------------------------

def perturb_pattern_noise(v: PerceptiblePattern, sigma_sq: float, seed) -> PerceptiblePattern:
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be nonnegative")
    if sigma_sq == 0:
        return PerceptiblePattern(v.pixels.copy(), v.name, v.stencil)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    noisy = v.pixels + rng.normal(0.0, np.sqrt(sigma_sq), size=v.pixels.shape)
    return PerceptiblePattern(np.clip(noisy, 0.0, 1.0), f"{v.name}+noise{sigma_sq:g}", v.stencil)


def crop_pattern(v: PerceptiblePattern, area_fraction: float) -> PerceptiblePattern:
    """Central crop keeping ``sqrt(area_fraction)`` of each side (nearest pixel, at least 1)."""
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError("area_fraction must lie in (0, 1]")
    h, w = v.hw
    f = np.sqrt(area_fraction)
    nh = max(1, int(np.floor(h * f + 0.5)))
    nw = max(1, int(np.floor(w * f + 0.5)))
    r0, c0 = (h - nh) // 2, (w - nw) // 2
    stencil = None if v.stencil is None else v.stencil[r0:r0 + nh, c0:c0 + nw]
    return PerceptiblePattern(v.pixels[r0:r0 + nh, c0:c0 + nw].copy(), f"{v.name}@crop{area_fraction:g}", stencil)


@dataclass(frozen=True)
class Variant:
    """Test-time variant: exact | noisy(sigma_sq) | cropped(area) | fixed(anchor) | shifted(dr, dc)."""

    kind: str = "exact"
    sigma_sq: float = 0.0
    area_fraction: float = 1.0
    anchor: tuple[int, int] | str | None = None
    shift: tuple[int, int] = (0, 0)

    @classmethod
    def exact(cls):
        return cls("exact")

    @classmethod
    def noisy(cls, sigma_sq: float):
        return cls("noisy", sigma_sq=sigma_sq)

    @classmethod
    def cropped(cls, area_fraction: float):
        return cls("cropped", area_fraction=area_fraction)

    @classmethod
    def fixed(cls, anchor=None):
        return cls("fixed", anchor=anchor)

    @classmethod
    def shifted(cls, dr: int, dc: int, anchor=None):
        return cls("shifted", anchor=anchor, shift=(dr, dc))

    def label(self) -> str:
        if self.kind == "noisy":
            return f"noisy_{self.sigma_sq:g}"
        if self.kind == "cropped":
            return f"crop_{self.area_fraction:g}"
        if self.kind == "shifted":
            return f"shift_{self.shift[0]}_{self.shift[1]}"
        return self.kind


def make_backdoor_test_set(test: LabeledDataset, spec: AttackSpec, variant: Variant = Variant(),
                           seed: int = 0) -> LabeledDataset:
    """Source-class test images carrying the (possibly perturbed) pattern; labels stay original."""
    if variant.kind not in ("exact", "noisy", "cropped", "fixed", "shifted"):
        raise ValueError(f"unknown variant {variant.kind!r}")
    idx = np.concatenate([test.indices_of(s) for s in spec.source_classes])
    idx.sort()
    base = spec.pattern
    if variant.kind == "cropped":
        base = crop_pattern(base, variant.area_fraction)
    h, w = test.shape[:2]
    fixed_anchor = None
    if variant.kind in ("fixed", "shifted"):
        a = variant.anchor if variant.anchor is not None else spec.placement.anchor
        if a is None:
            raise ValueError("fixed/shifted variants need an anchor")
        r, c = resolve_anchor(a, base.hw, (h, w))
        fixed_anchor = (r + variant.shift[0], c + variant.shift[1])
        _make_mask(fixed_anchor, base.hw, (h, w))  # bounds check up front
    images = np.empty((len(idx), *test.shape), dtype=np.float32)
    for j, i in enumerate(idx):
        rng = np.random.default_rng([seed, int(i)])
        pat = perturb_pattern_noise(base, variant.sigma_sq, rng) if variant.kind == "noisy" else base
        if fixed_anchor is None:
            m = place_mask(pat.hw, test.shape, Placement("random"), rng, pat.stencil)
        else:
            m = _make_mask(fixed_anchor, pat.hw, (h, w), pat.stencil)
        images[j] = embed_perceptible(test.images[i], pat.pixels, m)
    return LabeledDataset(images, test.labels[idx], test.class_count, f"{test.name}-backdoor-{variant.label()}")


# -- pattern container ------------------------------------------------------------------

def save_pattern(v: PerceptiblePattern, path: str | Path) -> None:
    ds = LabeledDataset(quantize(v.pixels)[None], np.zeros(1, np.int64), 1, v.name)
    blob = bytearray(encode_dataset(ds))
    struct.pack_into("<I", blob, 4, 0)  # K = 0 marks a pattern file
    Path(path).write_bytes(bytes(blob))


def load_pattern(path: str | Path) -> PerceptiblePattern:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC or struct.unpack_from("<I", blob, 4)[0] != 0:
        raise MalformedHeaderError("not a pattern container (K must be 0)")
    ds = decode_dataset(blob, name=path.stem)
    if len(ds) != 1:
        raise MalformedHeaderError("pattern container must hold exactly one record")
    return PerceptiblePattern(ds.images[0], name=path.stem)
