"""Maximum achievable misclassification fraction (MAMF) detector.

For every ordered class pair (s, t) and every square support width w, a
pattern confined to a fixed w×w support is optimised to push the clean images
of class s towards class t.  The fraction of those images that then land in t
is the MAMF statistic; its per-pair average over widths, maximised over pairs,
is compared with a threshold to decide whether the model carries a backdoor.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import grad as G
from .data import CleanDetectionSets
from .grad import Tensor
from .model import ClassifierModel, DivergenceError
from .poison import CORNERS, Mask, PlacementError, _make_mask, resolve_anchor
from .receptive import LocalForward


@dataclass
class DetectionConfig:
    r_min: float = 0.08
    r_max: float = 0.22
    anchor: str | tuple[int, int] = "top-left"
    pi: float = 0.7
    lr: float = 0.5
    epochs: int = 100
    batch: int = 32
    max_width_count: int | None = None
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.r_min <= self.r_max < 1.0:
            raise ValueError("need 0 < r_min <= r_max < 1")
        if not 0.0 < self.pi <= 1.0:
            raise ValueError("pi must lie in (0, 1]")
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError("invalid optimisation settings")
        if isinstance(self.anchor, list):
            self.anchor = tuple(self.anchor)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.anchor, tuple):
            d["anchor"] = list(self.anchor)
        return d


def support_widths(W: int, r_min: float, r_max: float, max_width_count: int | None = None) -> list[int]:
    """Integer widths in [ceil(r_min*W), floor(r_max*W)], optionally thinned evenly."""
    # round away binary noise such as 0.15*20 = 3.0000000000000004 before ceil/floor
    lo = math.ceil(round(r_min * W, 9))
    hi = math.floor(round(r_max * W, 9))
    lo = max(lo, 1)
    if lo > hi:
        raise ValueError(f"no integer width in [{r_min}*{W}, {r_max}*{W}]")
    widths = list(range(lo, hi + 1))
    if max_width_count is not None and len(widths) > max_width_count:
        if max_width_count < 2:
            raise ValueError("max_width_count must be at least 2 to keep both endpoints")
        picks = np.round(np.linspace(0, len(widths) - 1, max_width_count)).astype(int)
        widths = [widths[i] for i in sorted(set(picks))]
    return widths


def make_support_mask(W: int, H: int, w: int, anchor: str | tuple[int, int] = "top-left") -> Mask:
    """Square w×w support at ``anchor`` (a corner name or an explicit (row, col))."""
    r, c = resolve_anchor(anchor, (w, w), (H, W))
    return _make_mask((r, c), (w, w), (H, W))


# -- pattern estimation ----------------------------------------------------------------

@dataclass
class Estimate:
    pattern: np.ndarray          # w×w×C block under the support
    objective_start: float
    objective_end: float
    epochs_run: int


def _posteriors(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def estimate_pattern(model: ClassifierModel, images: np.ndarray, t: int, mask: Mask,
                     lr: float = 0.5, epochs: int = 100, batch: int = 32, seed=0,
                     early_stop: bool = False) -> Estimate:
    """Projected Adam ascent on the mean target posterior of the embedded images.

    The pattern starts at mid-gray, is clipped to [0, 1] after every step and
    only its pixels under ``mask`` influence the objective.  Model weights are
    never touched.  Only the part of the network the mask can reach is
    recomputed per step (see ``receptive.LocalForward``).
    """
    images = np.asarray(images, dtype=model.dtype)
    n = len(images)
    if n == 0:
        raise ValueError("empty clean set")
    if not 0 <= t < model.class_count:
        raise ValueError(f"target {t} out of range")
    h, w, c = model.input_shape
    rows, cols = mask.block()
    local = LocalForward(model, images, ((rows.start, rows.stop), (cols.start, cols.stop)))
    (ra, rb), (ca, cb) = local.window
    m_win = Tensor(mask.bits[ra:rb, ca:cb].astype(model.dtype)[..., None])
    v = np.full((h, w, c), 0.5, dtype=model.dtype)
    v_win = v[ra:rb, ca:cb]  # view: updates land in v
    state = G.AdamState(lr=lr)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def evaluate():
        emb = G.blend(Tensor(local.clean_window), Tensor(v_win), m_win)
        return local(emb).data

    start = best = float(_posteriors(evaluate())[:, t].mean())
    v_best = v_win.copy()
    epochs_run = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            vt = Tensor(v_win, requires_grad=True)
            post = G.softmax(local(G.blend(Tensor(local.clean_window[idx]), vt, m_win), idx))
            obj = G.mean(post[:, t])
            if not np.isfinite(obj.data):
                raise DivergenceError("objective became non-finite during pattern estimation")
            obj.backward()
            g = vt.grad if vt.grad is not None else np.zeros_like(v_win)
            G.adam_step([v_win], [g], state, ascent=True)
            np.clip(v_win, 0.0, 1.0, out=v_win)
        epochs_run = epoch + 1
        logits = evaluate()
        current = float(_posteriors(logits)[:, t].mean())
        # keep the best full-set iterate: projected Adam is not monotone
        if current > best:
            best, v_best = current, v_win.copy()
        if early_stop and np.all(logits.argmax(axis=1) == t):
            best, v_best = current, v_win.copy()
            break
    v_win[...] = v_best
    end = best
    m = mask.bits.astype(model.dtype)[..., None]
    block = (v * m)[mask.block()].copy()
    return Estimate(block, start, end, epochs_run)


def mamf(model: ClassifierModel, images: np.ndarray, v_star: np.ndarray, mask: Mask, t: int) -> float:
    """Fraction of ``images`` classified as ``t`` once ``v_star`` is embedded under ``mask``."""
    images = np.asarray(images, dtype=model.dtype)
    if len(images) == 0:
        raise ValueError("empty clean set")
    h, w, c = model.input_shape
    v = np.asarray(v_star, dtype=model.dtype)
    if v.shape[:2] != (h, w):
        canvas = np.zeros((h, w, c), dtype=model.dtype)
        canvas[mask.block()] = v
        v = canvas
    m = mask.bits.astype(model.dtype)[..., None]
    emb = images * (1 - m) + v * m
    return float(np.mean(model.predict_labels(emb) == t))


# -- full scan --------------------------------------------------------------------------

@dataclass
class MamfResult:
    class_count: int
    widths: list[int]
    rho: np.ndarray                      # (K, K, L), NaN on the diagonal
    rho_bar: np.ndarray                  # (K, K), NaN on the diagonal
    rho_star: float
    argmax_pair: tuple[int, int]
    tie: bool
    decision: bool
    pi: float
    config: dict[str, Any] = field(default_factory=dict)
    patterns: dict[tuple[int, int, int], np.ndarray] = field(default_factory=dict, repr=False)
    objective_gain: dict[tuple[int, int, int], tuple[float, float]] = field(default_factory=dict, repr=False)
    warnings: list[str] = field(default_factory=list)

    def curve(self, pair: tuple[int, int] | None = None) -> list[float]:
        s, t = pair or self.argmax_pair
        return [float(x) for x in self.rho[s, t]]

    def to_dict(self) -> dict:
        def grid(a):
            return [[None if np.isnan(x) else float(x) for x in row] for row in a]

        return {
            "class_count": self.class_count,
            "widths": list(self.widths),
            "rho": [[[None if np.isnan(x) else float(x) for x in cell] for cell in row] for row in self.rho],
            "rho_bar": grid(self.rho_bar),
            "rho_star": float(self.rho_star),
            "argmax_pair": list(self.argmax_pair),
            "tie": bool(self.tie),
            "decision": "attacked" if self.decision else "clean",
            "pi": self.pi,
            "config": self.config,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MamfResult":
        def arr(x):
            return np.array([[np.nan if v is None else v for v in row] for row in x], dtype=float)

        rho = np.array([[[np.nan if v is None else v for v in cell] for cell in row] for row in d["rho"]], dtype=float)
        return cls(d["class_count"], d["widths"], rho, arr(d["rho_bar"]), d["rho_star"], tuple(d["argmax_pair"]),
                   d["tie"], d["decision"] == "attacked", d["pi"], d.get("config", {}),
                   warnings=d.get("warnings", []))


def reduce_grid(rho: np.ndarray) -> tuple[np.ndarray, float, tuple[int, int], bool]:
    """Per-pair averages, their maximum, the lexicographically first maximiser and a tie flag."""
    k = rho.shape[0]
    rho_bar = np.full((k, k), np.nan)
    for s in range(k):
        for t in range(k):
            if s != t:
                rho_bar[s, t] = float(np.mean(rho[s, t]))
    best, pair, ties = -1.0, (0, 1), 0
    for s in range(k):
        for t in range(k):
            if s == t:
                continue
            if rho_bar[s, t] > best:
                best, pair, ties = rho_bar[s, t], (s, t), 1
            elif rho_bar[s, t] == best:
                ties += 1
    return rho_bar, float(best), pair, ties > 1


def pair_seed(seed: int, s: int, t: int, w: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, s, t, w])


def _solve(model: ClassifierModel, images: np.ndarray, s: int, t: int, w: int, cfg: DetectionConfig):
    h, w_img, _ = model.input_shape
    try:
        mask = make_support_mask(w_img, h, w, cfg.anchor)
        est = estimate_pattern(model, images, t, mask, cfg.lr, cfg.epochs, cfg.batch,
                               np.random.default_rng(pair_seed(cfg.seed, s, t, w)), cfg.early_stop)
        rho = mamf(model, images, est.pattern, mask, t)
    except (ValueError, PlacementError, DivergenceError) as exc:
        raise type(exc)(f"pair (s={s}, t={t}), width {w}: {exc}") from exc
    return rho, est


def scan(model: ClassifierModel, clean_sets: CleanDetectionSets, cfg: DetectionConfig,
         keep_patterns: bool = True, progress=None, workers: int = 1) -> MamfResult:
    """Estimate a pattern and its MAMF for every ordered pair and every support width.

    Problems are independent and seeded by (seed, s, t, w), so ``workers > 1``
    (a process pool) gives the same result as a serial run.
    """
    _, w_img, _ = model.input_shape
    k = model.class_count
    if clean_sets.class_count != k:
        raise ValueError(f"clean sets cover {clean_sets.class_count} classes, model has {k}")
    notes = []
    small = min(clean_sets.counts.values())
    if small < 10:
        msg = (f"only {small} clean images for some class; MAMF of clean models inflates with "
               f"tiny sets, consider a threshold below {cfg.pi}")
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    widths = support_widths(w_img, cfg.r_min, cfg.r_max, cfg.max_width_count)
    jobs = [(s, t, li, w) for s in range(k) for t in range(k) if s != t for li, w in enumerate(widths)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_solve, model, clean_sets[s], s, t, w, cfg) for s, t, _, w in jobs]
            results = [f.result() for f in futures]
    else:
        results = (_solve(model, clean_sets[s], s, t, w, cfg) for s, t, _, w in jobs)
    rho = np.full((k, k, len(widths)), np.nan)
    patterns, gains = {}, {}
    for (s, t, li, w), (value, est) in zip(jobs, results):
        rho[s, t, li] = value
        gains[(s, t, w)] = (est.objective_start, est.objective_end)
        if keep_patterns:
            patterns[(s, t, w)] = est.pattern
        if progress is not None:
            progress(s, t, w, value)
    rho_bar, rho_star, pair, tie = reduce_grid(rho)
    return MamfResult(k, widths, rho, rho_bar, rho_star, pair, tie, rho_star > cfg.pi, cfg.pi,
                      cfg.to_dict(), patterns, gains, notes)


@dataclass(frozen=True)
class Decision:
    attacked: bool
    pair: tuple[int, int] | None
    rho_star: float

    def __str__(self) -> str:
        if self.attacked:
            return f"attacked(source={self.pair[0]}, target={self.pair[1]})"
        return "clean"


def infer(result: MamfResult, pi: float) -> Decision:
    """Attacked iff rho* exceeds ``pi``; the argmax pair is reported on detection."""
    attacked = result.rho_star > pi
    return Decision(attacked, tuple(result.argmax_pair) if attacked else None, result.rho_star)


def adaptive_r_max(model: ClassifierModel, clean_sets: CleanDetectionSets, cfg: DetectionConfig,
                   candidates: list[float] | None = None, pair_fraction: float = 0.5,
                   modest_mamf: float = 0.4) -> float:
    """Smallest relative width at which ``pair_fraction`` of pairs reach MAMF >= ``modest_mamf``.

    Candidate relative widths are tried in increasing order; the largest is
    returned if none qualifies.
    """
    _, w_img, _ = model.input_shape
    h = model.input_shape[0]
    k = model.class_count
    if candidates is None:
        candidates = [w / w_img for w in range(max(1, math.ceil(cfg.r_min * w_img)), w_img // 2 + 1)]
    for r in sorted(candidates):
        w = max(1, int(math.floor(round(r * w_img, 9))))
        mask = make_support_mask(w_img, h, w, cfg.anchor)
        hits = 0
        for s in range(k):
            for t in range(k):
                if s == t:
                    continue
                est = estimate_pattern(model, clean_sets[s], t, mask, cfg.lr, cfg.epochs, cfg.batch,
                                       np.random.default_rng(pair_seed(cfg.seed, s, t, w)), cfg.early_stop)
                hits += mamf(model, clean_sets[s], est.pattern, mask, t) >= modest_mamf
        if hits >= pair_fraction * k * (k - 1):
            return r
    return max(candidates)


__all__ = [
    "CORNERS", "Decision", "DetectionConfig", "Estimate", "MamfResult", "adaptive_r_max", "estimate_pattern",
    "infer", "make_support_mask", "mamf", "pair_seed", "reduce_grid", "scan", "support_widths",
]
