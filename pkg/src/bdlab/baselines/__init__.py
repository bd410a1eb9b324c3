"""Comparison defenses: mask reverse engineering (NC), fine-pruning and input blurring."""

from .blur import BlurReport, blur_detect, blur_evaluate, blur_image
from .fineprune import PruneCurve, early_defense_points, fp_prune, fp_sweep, prune_order
from .nc import NcConfig, NcResult, NcTarget, mad_anomaly_index, nc_detect, nc_reverse_engineer

__all__ = [
    "BlurReport", "NcConfig", "NcResult", "NcTarget", "PruneCurve", "blur_detect", "blur_evaluate",
    "blur_image", "early_defense_points", "fp_prune", "fp_sweep", "mad_anomaly_index", "nc_detect",
    "nc_reverse_engineer", "prune_order",
]
