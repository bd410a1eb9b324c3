"""In-flight blurring heuristic: flag an input whose predicted label changes after blurring."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

FILTERS = ("average", "median")


def blur_image(image: np.ndarray, filter: str = "average", size: int = 2) -> np.ndarray:
    """Per-channel size×size filter with reflective borders; works on one image or a batch."""
    image = np.asarray(image)
    if filter not in FILTERS:
        raise ValueError(f"filter must be one of {FILTERS}")
    h, w = image.shape[-3], image.shape[-2]
    if size < 2 or size > min(h, w):
        raise ValueError(f"filter size {size} must lie in [2, {min(h, w)}]")
    window = (1,) * (image.ndim - 3) + (size, size, 1)
    if filter == "average":
        out = ndimage.uniform_filter(image.astype(np.float64), size=window, mode="reflect")
    else:
        out = ndimage.median_filter(image, size=window, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def blur_detect(model, image: np.ndarray, filter: str = "average", size: int = 2) -> bool:
    before = model.predict_labels(image[None])[0]
    after = model.predict_labels(blur_image(image, filter, size)[None])[0]
    return bool(before != after)


@dataclass
class BlurReport:
    filter: str
    size: int
    rows: list[tuple] = field(default_factory=list)  # (set, id, clean_label, pred, pred_blurred, flag)

    def _rate(self, which: str) -> float:
        flags = [r[5] for r in self.rows if r[0] == which]
        return float(np.mean(flags)) if flags else float("nan")

    @property
    def fpr(self) -> float:
        return self._rate("clean")

    @property
    def tpr(self) -> float:
        return self._rate("backdoor")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["set", "id", "clean_label", "pred", "pred_blurred", "flag"])
        writer.writerows([(s, i, l, p, q, int(f)) for s, i, l, p, q, f in self.rows])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"filter": self.filter, "size": self.size, "fpr": self.fpr, "tpr": self.tpr,
                "n_clean": sum(r[0] == "clean" for r in self.rows),
                "n_backdoor": sum(r[0] == "backdoor" for r in self.rows)}


def blur_evaluate(model, clean_images: np.ndarray, clean_labels: np.ndarray, backdoor_images: np.ndarray,
                  backdoor_labels: np.ndarray, filter: str = "average", size: int = 2) -> BlurReport:
    """Flags for clean and triggered inputs; FPR and TPR are the two flag means."""
    report = BlurReport(filter, size)
    for name, imgs, labels in (("clean", clean_images, clean_labels), ("backdoor", backdoor_images, backdoor_labels)):
        pred = model.predict_labels(imgs)
        pred_b = model.predict_labels(blur_image(imgs, filter, size))
        for i in range(len(imgs)):
            report.rows.append((name, i, int(labels[i]), int(pred[i]), int(pred_b[i]), bool(pred[i] != pred_b[i])))
    return report
