"""Fine-pruning baseline: silence the least active penultimate neurons and watch both metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import LabeledDataset
from ..grad import Tensor
from ..model import ClassifierModel


def prune_order(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Penultimate neurons sorted by mean activation, ascending; ties keep index order."""
    acts = model.penultimate_activations(images)
    return np.argsort(acts.mean(axis=0), kind="stable")


def fp_prune(model: ClassifierModel, images: np.ndarray, k: int, order: np.ndarray | None = None) -> ClassifierModel:
    """Copy of ``model`` with the ``k`` least active penultimate neurons masked to zero."""
    width = model.penultimate_width
    if not 0 <= k < width:
        raise ValueError(f"k must lie in [0, {width}), got {k}")
    if order is None:
        order = prune_order(model, images)
    pruned = model.copy()
    pruned.prune_mask = np.ones(width, dtype=model.dtype)
    pruned.prune_mask[order[:k]] = 0
    return pruned


@dataclass
class PruneCurve:
    pruned: list[int] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    attack_success: list[float] = field(default_factory=list)
    order: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def rows(self):
        return list(zip(self.pruned, self.accuracy, self.attack_success))


def fp_sweep(model: ClassifierModel, clean_test: LabeledDataset, backdoor_test: LabeledDataset, target: int,
             stride: int = 1) -> PruneCurve:
    """Clean accuracy and attack success after pruning k = 0, stride, ... neurons.

    Penultimate activations are computed once; each k only re-runs the output
    layer on the masked activations, which is exactly what the pruned model does.
    """
    if len(clean_test) == 0 or len(backdoor_test) == 0:
        raise ValueError("both test sets must be nonempty")
    order = prune_order(model, clean_test.images)
    head = _head_start(model)
    acts_clean = model.penultimate_activations(clean_test.images)
    acts_bd = model.penultimate_activations(backdoor_test.images)
    curve = PruneCurve(order=order.tolist())
    width = model.penultimate_width
    for k in range(0, width, stride):
        keep = np.ones(width, dtype=model.dtype)
        keep[order[:k]] = 0
        pred_c = model.apply_layers(Tensor(acts_clean * keep), head).data.argmax(axis=1)
        pred_b = model.apply_layers(Tensor(acts_bd * keep), head).data.argmax(axis=1)
        curve.pruned.append(k)
        curve.accuracy.append(float(np.mean(pred_c == clean_test.labels)))
        curve.attack_success.append(float(np.mean(pred_b == target)))
    return curve


def _head_start(model: ClassifierModel) -> int:
    # index of the layer right after the masked penultimate relu
    return max(i for i, l in enumerate(model.layers)
               if l.kind == "relu" and i > 0 and model.layers[i - 1].kind == "dense") + 1


def early_defense_points(curve: PruneCurve, accuracy_drop: float = 0.05, success_level: float = 0.5) -> list[int]:
    """Pruning levels where attack success is already below ``success_level`` while clean
    accuracy is still within ``accuracy_drop`` of the unpruned model."""
    base = curve.accuracy[0]
    return [k for k, acc, asr in curve.rows() if asr < success_level and acc >= base - accuracy_drop]
