"""Reverse-engineering baseline: per-target mask + pattern search with MAD outlier test."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import grad as G
from ..data import CleanDetectionSets
from ..grad import Tensor
from ..model import ClassifierModel, DivergenceError

MAD_CONSISTENCY = 1.4826
ANOMALY_CUTOFF = 2.0


@dataclass
class NcConfig:
    lam: float = 0.1
    phi: float = 0.9
    lr: float = 0.05
    epochs: int = 200
    batch: int = 90
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.phi <= 1:
            raise ValueError("phi must lie in (0, 1]")
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError("invalid optimisation settings")


@dataclass
class NcTarget:
    target: int
    mask: np.ndarray        # (H, W) in [0, 1]
    pattern: np.ndarray     # (H, W, C) in [0, 1]
    l1: float
    achieved: float


@dataclass
class NcResult:
    targets: list[NcTarget]
    anomaly_index: dict[int, float | None]
    flagged: list[int]
    decision: bool
    config: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_target": [{"target": r.target, "l1": r.l1, "achieved": r.achieved} for r in self.targets],
            "anomaly_index": {str(k): v for k, v in self.anomaly_index.items()},
            "flagged": self.flagged,
            "decision": "attacked" if self.decision else "clean",
            "config": self.config,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mad_anomaly_index(values) -> list[float]:
    """|v - median| / (1.4826 * MAD) for every value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        raise ValueError("need at least three values")
    med = np.median(v)
    dev = np.abs(v - med)
    mad = np.median(dev)
    if mad == 0:
        raise ValueError("degenerate: median absolute deviation is zero")
    return (dev / (MAD_CONSISTENCY * mad)).tolist()


def nc_reverse_engineer(model: ClassifierModel, images: np.ndarray, t: int, cfg: NcConfig) -> NcTarget:
    """Jointly fit a soft mask and pattern sending ``images`` to ``t`` under an L1 mask penalty.

    Both are sigmoid re-parameterised, so the box constraint holds without projection.
    Logits start at zero: mask and pattern begin at 0.5 everywhere.
    """
    images = np.asarray(images, dtype=np.float64)
    n = len(images)
    if n == 0:
        raise ValueError("no images for reverse engineering")
    h, w, c = model.input_shape
    a = np.zeros((h, w, 1))
    b = np.zeros((h, w, c))
    state = G.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, t])
    model64 = model.astype(np.float64)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch):
            idx = order[i:i + cfg.batch]
            at, bt = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            m = G.sigmoid(at)
            x = G.blend(Tensor(images[idx]), G.sigmoid(bt), m)
            loss = G.softmax_cross_entropy(model64.logits(x), np.full(len(idx), t)) + cfg.lam * G.tsum(m)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"reverse engineering diverged for target {t} at epoch {epoch}")
            loss.backward()
            G.adam_step([a, b], [at.grad, bt.grad], state)
    mask = 0.5 * (np.tanh(0.5 * a[..., 0]) + 1.0)
    pattern = 0.5 * (np.tanh(0.5 * b) + 1.0)
    emb = images * (1 - mask[..., None]) + pattern * mask[..., None]
    achieved = float(np.mean(model64.predict_labels(emb) == t))
    return NcTarget(t, mask, pattern, float(mask.sum()), achieved)


def nc_detect(model: ClassifierModel, clean_sets: CleanDetectionSets, cfg: NcConfig) -> NcResult:
    """Reverse-engineer every putative target and flag small-mask outliers.

    Only targets whose mask reaches ``phi`` misclassification enter the MAD
    population; the rest get no index and are never flagged.
    """
    k = model.class_count
    results = []
    for t in range(k):
        imgs = np.concatenate([clean_sets[s] for s in range(k) if s != t])
        results.append(nc_reverse_engineer(model, imgs, t, cfg))
    eligible = [r for r in results if r.achieved >= cfg.phi]
    notes = []
    index: dict[int, float | None] = {r.target: None for r in results}
    flagged: list[int] = []
    excluded = [r.target for r in results if r.achieved < cfg.phi]
    if excluded:
        notes.append(f"targets {excluded} did not reach phi={cfg.phi} and were excluded from MAD")
    if len(eligible) >= 3:
        l1 = [r.l1 for r in eligible]
        try:
            for r, a in zip(eligible, mad_anomaly_index(l1)):
                index[r.target] = a
        except ValueError as exc:
            notes.append(str(exc))
        med = float(np.median(l1))
        flagged = [r.target for r in eligible
                   if index[r.target] is not None and index[r.target] > ANOMALY_CUTOFF and r.l1 < med]
    else:
        notes.append(f"only {len(eligible)} targets reached phi; anomaly index undefined")
    return NcResult(results, index, flagged, bool(flagged), asdict(cfg), notes)
