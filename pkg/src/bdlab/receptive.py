"""Forward passes restricted to what a small image region can influence.

When only a w-by-w block of the input changes, every activation outside the
block's forward footprint equals its clean value.  ``LocalForward`` caches the
clean activations at the last spatial layer once, then per call recomputes only
the footprint from a cropped input window and splices it back before the dense
head.  Results match the full forward pass up to float summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from .grad import Tensor
from .model import ClassifierModel


@dataclass(frozen=True)
class _Step:
    kind: str
    pad: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))


def _forward_region(layers, size, region):
    """Footprint of ``region`` (per axis [a, b)) after each spatial layer."""
    regions = [region]
    sizes = [size]
    for layer in layers:
        (ra, rb), (ca, cb) = regions[-1]
        h, w = sizes[-1]
        if layer.kind == "conv":
            k = layer.shape[0]
            if layer.padding == "same":
                p = k // 2
                ra, rb, ca, cb = max(0, ra - p), min(h, rb + p), max(0, ca - p), min(w, cb + p)
            else:
                h, w = h - k + 1, w - k + 1
                ra, rb, ca, cb = max(0, ra - k + 1), min(h, rb), max(0, ca - k + 1), min(w, cb)
        elif layer.kind == "pool":
            h, w = h // 2, w // 2
            ra, rb = ra // 2, min(h, -(-rb // 2))
            ca, cb = ca // 2, min(w, -(-cb // 2))
        regions.append(((ra, rb), (ca, cb)))
        sizes.append((h, w))
    return regions, sizes


def _required_windows(layers, sizes, out_region):
    """Walk back from the output footprint to the input window each layer must see."""
    windows = [out_region]
    steps = []
    for layer, (h, w) in zip(reversed(layers), reversed(sizes[:-1])):
        (ra, rb), (ca, cb) = windows[-1]
        if layer.kind == "conv":
            k = layer.shape[0]
            lo, hi = (k // 2, k // 2) if layer.padding == "same" else (0, k - 1)
            want = ((ra - lo, rb + hi), (ca - lo, cb + hi))
            got = ((max(0, want[0][0]), min(h, want[0][1])), (max(0, want[1][0]), min(w, want[1][1])))
            pad = ((got[0][0] - want[0][0], want[0][1] - got[0][1]),
                   (got[1][0] - want[1][0], want[1][1] - got[1][1]))
            steps.append(_Step("conv", pad))
            windows.append(got)
        elif layer.kind == "pool":
            steps.append(_Step("pool"))
            windows.append(((2 * ra, 2 * rb), (2 * ca, 2 * cb)))
        else:
            steps.append(_Step(layer.kind))
            windows.append(windows[-1])
    return windows[::-1], steps[::-1]


class LocalForward:
    """Logits for ``images`` with a block of pixels replaced, recomputing only its footprint.

    ``block`` is ((row0, row1), (col0, col1)) in input coordinates.  ``__call__``
    takes the embedded input window (N, h, w, C) covering ``self.window``.
    """

    def __init__(self, model: ClassifierModel, images: np.ndarray, block):
        self.model = model
        layers = model.layers
        self.split = next(i for i, l in enumerate(layers) if l.kind == "flatten")
        spatial = layers[:self.split]
        h, w, _ = model.input_shape
        regions, sizes = _forward_region(spatial, (h, w), block)
        windows, self.steps = _required_windows(spatial, sizes, regions[-1])
        self.out_region = regions[-1]
        # a block can be invisible, e.g. rows dropped by pooling after valid convolutions
        self.empty = any(b <= a for a, b in self.out_region)
        self.window = block if self.empty else windows[0]
        images = np.asarray(images, dtype=model.dtype)
        self.base = model.apply_layers(Tensor(images), 0, self.split).data
        (ra, rb), (ca, cb) = self.window
        self.clean_window = images[:, ra:rb, ca:cb, :]

    def __call__(self, x_window: Tensor, rows: np.ndarray | slice = slice(None)) -> Tensor:
        if self.empty:
            return self.model.apply_layers(Tensor(self.base[rows]), self.split)
        x = x_window
        for i, step in enumerate(self.steps):
            if step.kind == "conv":
                x = G.pad2d(x, *step.pad)
                x = G.conv2d(x, Tensor(self.model.params[f"conv{i}.w"]),
                             Tensor(self.model.params[f"conv{i}.b"]), padding="valid")
            else:
                x = self.model.apply_layers(x, i, i + 1)
        (ra, _), (ca, _) = self.out_region
        full = G.splice(self.base[rows], x, ra, ca)
        return self.model.apply_layers(full, self.split)
