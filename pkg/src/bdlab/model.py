"""Desk-scale CNN classifiers: construction, training, metrics and persistence."""

from __future__ import annotations

import copy
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import grad as G
from .data import LabeledDataset
from .grad import Graph, Tensor

MODEL_MAGIC = b"BDM1"

# layer tags in the BDM1 descriptor block
CONV, RELU, POOL, FLATTEN, DENSE = 1, 2, 3, 4, 5
_PAD_CODES = {"same": 0, "valid": 1}

ARCHITECTURES = {
    "tiny": [("conv", 8), ("pool",), ("conv", 16), ("pool",), ("dense", 64)],
    "small": [("conv", 8), ("pool",), ("conv", 16), ("pool",), ("conv", 32), ("pool",), ("dense", 64)],
}


class DivergenceError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class Layer:
    kind: str
    shape: tuple[int, ...] = ()
    padding: str = "same"

    @property
    def tag(self) -> int:
        return {"conv": CONV, "relu": RELU, "pool": POOL, "flatten": FLATTEN, "dense": DENSE}[self.kind]


class ClassifierModel:
    """Sequential conv/pool/dense network mapping NHWC images to class posteriors.

    The activations of the last hidden dense layer (after relu) pass through a
    multiplicative ``prune_mask`` so fine-pruning can silence neurons without
    touching weights.
    """

    def __init__(self, layers: list[Layer], params: dict[str, np.ndarray], input_shape: tuple[int, int, int],
                 class_count: int, metadata: dict[str, Any] | None = None):
        self.layers = layers
        self.params = params
        self.input_shape = tuple(input_shape)
        self.class_count = class_count
        self.metadata = dict(metadata or {})
        self.prune_mask = np.ones(self.penultimate_width, dtype=self.dtype)
        self.graph = self._build_graph()

    # -- structure -------------------------------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def penultimate_width(self) -> int:
        dense = [l for l in self.layers if l.kind == "dense"]
        return dense[-2].shape[1]

    def param_names(self) -> list[str]:
        return list(self.params)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _build_graph(self) -> Graph:
        g = Graph().input("x", "prune_mask", *self.params)
        prev = "x"
        dense_seen = 0
        n_dense = sum(l.kind == "dense" for l in self.layers)
        for i, layer in enumerate(self.layers):
            name = f"{layer.kind}{i}"
            if layer.kind == "conv":
                g.add(name, G.conv2d, prev, f"{name}.w", f"{name}.b", padding=layer.padding)
            elif layer.kind == "dense":
                g.add(name, G.dense, prev, f"{name}.w", f"{name}.b")
                dense_seen += 1
            elif layer.kind == "relu":
                g.add(name, G.relu, prev)
                if dense_seen == n_dense - 1 and self.layers[i - 1].kind == "dense":
                    prev = name
                    name = "penultimate"
                    g.add(name, G.mul, prev, "prune_mask")
            elif layer.kind == "pool":
                g.add(name, G.max_pool2d, prev)
            elif layer.kind == "flatten":
                g.add(name, G.flatten, prev)
            prev = name
        g.output = prev
        return g

    # -- evaluation ------------------------------------------------------------------
    def _bind(self, x: Tensor, trainable: bool) -> dict[str, Tensor]:
        inputs = {k: Tensor(v, requires_grad=trainable) for k, v in self.params.items()}
        inputs["x"] = x
        inputs["prune_mask"] = Tensor(self.prune_mask)
        return inputs

    def logits(self, x: Tensor | np.ndarray, trainable: bool = False) -> Tensor:
        """Differentiable logits for a batch; weights are frozen unless ``trainable``."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim == 3:
            x = G.reshape(x, (1, *x.shape))
        if tuple(x.shape[1:]) != self.input_shape:
            raise G.ShapeError(f"input shape {tuple(x.shape[1:])} does not match model {self.input_shape}")
        return self.graph.forward(self._bind(x, trainable))

    def apply_layers(self, x: Tensor, start: int = 0, stop: int | None = None) -> Tensor:
        """Run layers ``start:stop`` with frozen weights on an intermediate activation.

        Unlike ``logits`` this skips the graph bookkeeping and accepts tensors of
        any spatial size, so convolutions see exactly the window they are given.
        """
        stop = len(self.layers) if stop is None else stop
        last_hidden = max(i for i, l in enumerate(self.layers) if l.kind == "relu" and i > 0
                          and self.layers[i - 1].kind == "dense")
        for i in range(start, stop):
            layer = self.layers[i]
            name = f"{layer.kind}{i}"
            if layer.kind == "conv":
                x = G.conv2d(x, Tensor(self.params[f"{name}.w"]), Tensor(self.params[f"{name}.b"]),
                             padding=layer.padding)
            elif layer.kind == "dense":
                x = G.dense(x, Tensor(self.params[f"{name}.w"]), Tensor(self.params[f"{name}.b"]))
            elif layer.kind == "relu":
                x = G.relu(x)
                if i == last_hidden:
                    x = G.mul(x, Tensor(self.prune_mask))
            elif layer.kind == "pool":
                x = G.max_pool2d(x)
            elif layer.kind == "flatten":
                x = G.flatten(x)
        return x

    def posteriors(self, images: Tensor | np.ndarray) -> Tensor:
        return G.softmax(self.logits(images))

    def logits_array(self, images: np.ndarray, batch: int = 500) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        outs = [self.logits(images[i:i + batch]).data for i in range(0, len(images), batch)]
        return np.concatenate(outs) if outs else np.empty((0, self.class_count), self.dtype)

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum: ties go to the smallest class index
        return self.logits_array(images).argmax(axis=1)

    def penultimate_activations(self, images: np.ndarray, batch: int = 500) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        out = []
        for i in range(0, len(images), batch):
            self.logits(images[i:i + batch])
            out.append(self.graph.value("penultimate").data)
        return np.concatenate(out)

    # -- copies ----------------------------------------------------------------------
    def copy(self) -> "ClassifierModel":
        m = ClassifierModel(copy.deepcopy(self.layers), {k: v.copy() for k, v in self.params.items()},
                            self.input_shape, self.class_count, copy.deepcopy(self.metadata))
        m.prune_mask = self.prune_mask.copy()
        return m

    def astype(self, dtype) -> "ClassifierModel":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.prune_mask = m.prune_mask.astype(dtype)
        return m


def predict(model: ClassifierModel, image: np.ndarray) -> tuple[np.ndarray, int]:
    logits = model.logits(image).data[0]
    post = G.softmax(Tensor(logits.astype(np.float64))).data
    return post, int(np.argmax(logits))


# -- construction -------------------------------------------------------------------------

def expand_architecture(arch_name: str, input_shape: tuple[int, int, int], class_count: int) -> list[Layer]:
    if arch_name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_name!r}; choose from {sorted(ARCHITECTURES)}")
    h, w, c = input_shape
    layers: list[Layer] = []
    flat = None
    for spec in ARCHITECTURES[arch_name]:
        if spec[0] == "conv":
            layers += [Layer("conv", (3, c, spec[1])), Layer("relu")]
            c = spec[1]
        elif spec[0] == "pool":
            layers.append(Layer("pool"))
            h, w = h // 2, w // 2
        elif spec[0] == "dense":
            if flat is None:
                layers.append(Layer("flatten"))
                flat = h * w * c
            layers += [Layer("dense", (flat, spec[1])), Layer("relu")]
            flat = spec[1]
    layers.append(Layer("dense", (flat, class_count)))
    return layers


def _init_params(layers: list[Layer], seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            k, cin, cout = layer.shape
            fan_in = k * k * cin
            shape = (k, k, cin, cout)
        elif layer.kind == "dense":
            fan_in, cout = layer.shape
            shape = layer.shape
        else:
            continue
        limit = np.sqrt(6.0 / fan_in)
        params[f"{layer.kind}{i}.w"] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[f"{layer.kind}{i}.b"] = np.zeros(cout, dtype=np.float32)
    return params


def build_cnn(arch_name: str, input_shape: tuple[int, int, int], class_count: int, seed: int) -> ClassifierModel:
    """He-uniform initialised CNN; ``tiny`` is conv8-pool-conv16-pool-dense64-denseK."""
    layers = expand_architecture(arch_name, tuple(input_shape), class_count)
    meta = {"arch": arch_name, "init_seed": seed}
    return ClassifierModel(layers, _init_params(layers, seed), tuple(input_shape), class_count, meta)


# -- training ------------------------------------------------------------------------------

@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    test_accuracy: float | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def train(model: ClassifierModel, train_set: LabeledDataset, lr: float = 1e-3, batch: int = 32,
          epochs: int = 40, seed: int = 0, test_set: LabeledDataset | None = None) -> tuple[ClassifierModel, TrainReport]:
    """Minimise mean cross-entropy with Adam; returns a trained copy and its report."""
    if train_set.shape != model.input_shape:
        raise G.ShapeError(f"dataset shape {train_set.shape} does not match model {model.input_shape}")
    model = model.copy()
    report = TrainReport()
    names = model.param_names()
    state = G.AdamState(lr=lr)
    start = time.perf_counter()
    x_all = train_set.images.astype(model.dtype, copy=False)
    y_all = train_set.labels
    n = len(train_set)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total, correct = 0.0, 0
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            inputs = model._bind(Tensor(x_all[idx]), trainable=True)
            logits = model.graph.forward(inputs)
            loss = G.softmax_cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
            grads = model.graph.backward(loss)
            G.adam_step([model.params[k] for k in names], [grads[k] for k in names], state)
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_all[idx]).sum())
        report.epoch_loss.append(total / n)
        report.epoch_accuracy.append(correct / n)
    if test_set is not None:
        report.test_accuracy = clean_accuracy(model, test_set)
    report.wall_clock = time.perf_counter() - start
    model.metadata.update({"train_seed": seed, "epochs": epochs, "lr": lr, "batch": batch})
    return model, report


# -- metrics ----------------------------------------------------------------------------------

def clean_accuracy(model: ClassifierModel, test_set: LabeledDataset) -> float:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    return float(np.mean(model.predict_labels(test_set.images) == test_set.labels))


def attack_success_rate(model: ClassifierModel, backdoor_set: LabeledDataset, target: int) -> float:
    if len(backdoor_set) == 0:
        raise ValueError("empty backdoor test set")
    return float(np.mean(model.predict_labels(backdoor_set.images) == target))


def collateral_damage(model: ClassifierModel, test_set: LabeledDataset, pattern: np.ndarray,
                      target: int, seed: int) -> dict[int, float]:
    """Fraction of each non-target class sent to ``target`` once the pattern is embedded at random."""
    from .poison import embed_random

    rates = {}
    for c in range(test_set.class_count):
        if c == target:
            continue
        idx = test_set.indices_of(c)
        if len(idx) == 0:
            continue
        imgs = embed_random(test_set.images[idx], pattern, np.random.default_rng([seed, c]))
        rates[c] = float(np.mean(model.predict_labels(imgs) == target))
    return rates


# -- persistence ---------------------------------------------------------------------------

def encode_model(model: ClassifierModel) -> bytes:
    h, w, c = model.input_shape
    parts = [MODEL_MAGIC, struct.pack("<5I", len(model.layers), h, w, c, model.class_count)]
    for layer in model.layers:
        ints = list(layer.shape)
        if layer.kind == "conv":
            ints.append(_PAD_CODES[layer.padding])
        parts.append(struct.pack("<2I", layer.tag, len(ints)))
        parts.append(struct.pack(f"<{len(ints)}I", *ints))
    for i, layer in enumerate(model.layers):
        if layer.kind in ("conv", "dense"):
            for suffix in ("w", "b"):
                parts.append(model.params[f"{layer.kind}{i}.{suffix}"].astype("<f4").tobytes())
    return b"".join(parts)


def decode_model(blob: bytes) -> ClassifierModel:
    if blob[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {blob[:4]!r}")
    off = 4
    try:
        n_layers, h, w, c, k = struct.unpack_from("<5I", blob, off)
        off += 20
        layers = []
        for _ in range(n_layers):
            tag, n_ints = struct.unpack_from("<2I", blob, off)
            off += 8
            ints = list(struct.unpack_from(f"<{n_ints}I", blob, off))
            off += 4 * n_ints
            if tag == CONV:
                pad = {v: k_ for k_, v in _PAD_CODES.items()}[ints[3]]
                layers.append(Layer("conv", tuple(ints[:3]), pad))
            elif tag == DENSE:
                layers.append(Layer("dense", tuple(ints)))
            elif tag in (RELU, POOL, FLATTEN):
                layers.append(Layer({RELU: "relu", POOL: "pool", FLATTEN: "flatten"}[tag]))
            else:
                raise ModelFormatError(f"unknown layer tag {tag}: unsupported format version")
        params = {}
        for i, layer in enumerate(layers):
            if layer.kind == "conv":
                kk, cin, cout = layer.shape
                shapes = [(kk, kk, cin, cout), (cout,)]
            elif layer.kind == "dense":
                shapes = [layer.shape, (layer.shape[1],)]
            else:
                continue
            for suffix, shape in zip(("w", "b"), shapes):
                count = int(np.prod(shape))
                if off + 4 * count > len(blob):
                    raise ModelFormatError("truncated weight payload")
                params[f"{layer.kind}{i}.{suffix}"] = (
                    np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32))
                off += 4 * count
    except struct.error as exc:
        raise ModelFormatError(f"truncated descriptor block: {exc}") from exc
    if off != len(blob):
        raise ModelFormatError("trailing bytes after weight payload")
    return ClassifierModel(layers, params, (h, w, c), k)


def save_model(model: ClassifierModel, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(encode_model(model))
    meta = dict(model.metadata)
    meta["prune_mask"] = [float(v) for v in model.prune_mask]
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path: str | Path) -> ClassifierModel:
    path = Path(path)
    model = decode_model(path.read_bytes())
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        mask = meta.pop("prune_mask", None)
        model.metadata = meta
        if mask is not None:
            model.prune_mask = np.asarray(mask, dtype=model.dtype)
    return model


__all__ = [
    "ARCHITECTURES", "ClassifierModel", "DivergenceError", "Layer", "ModelFormatError", "TrainReport",
    "attack_success_rate", "build_cnn", "clean_accuracy", "collateral_damage", "decode_model",
    "encode_model", "load_model", "predict", "save_model", "train",
]
