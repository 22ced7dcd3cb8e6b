"""Depth evaluation metrics: Abs Rel, Sq Rel, and the delta accuracy fractions.

Median scaling (on by default) rescales the scale-ambiguous prediction by
median(gt)/median(pred) over the valid pixels before computing errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from keydepth.errors import ConfigurationError
from keydepth.geometry import DepthField


@dataclass(frozen=True)
class EvalMetrics:
    abs_rel: float
    sq_rel: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def csv_header(self) -> str:
        return "abs_rel,sq_rel,delta1,delta2,delta3,n_pixels"

    def csv_line(self) -> str:
        return f"{self.abs_rel:.17g},{self.sq_rel:.17g},{self.delta1:.17g},{self.delta2:.17g},{self.delta3:.17g},{self.n_pixels}"

    def table(self) -> str:
        header = f"{'Abs Rel':>10} {'Sq Rel':>10} {'d<1.25':>10} {'d<1.25^2':>10} {'d<1.25^3':>10}"
        row = f"{self.abs_rel:>10.4f} {self.sq_rel:>10.4f} {self.delta1:>10.4f} {self.delta2:>10.4f} {self.delta3:>10.4f}"
        return header + "\n" + row

    def to_dict(self) -> dict:
        return {
            "abs_rel": self.abs_rel,
            "sq_rel": self.sq_rel,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "n_pixels": self.n_pixels,
        }


def compute_metrics(
    pred: DepthField,
    gt: DepthField,
    valid_mask: np.ndarray | None = None,
    median_scale: bool = True,
    min_depth: float | None = None,
    max_depth: float | None = None,
) -> EvalMetrics:
    """Standard monocular depth metrics over the valid pixels.

    Optional min/max clamps are applied to the (scaled) prediction; they
    default to off.
    """
    if pred.log_depth.shape != gt.log_depth.shape:
        raise ConfigurationError(f"pred dims {pred.log_depth.shape} != gt dims {gt.log_depth.shape}")
    p = pred.depth
    g = gt.depth
    if valid_mask is None:
        valid_mask = np.ones_like(g, dtype=bool)
    if valid_mask.shape != g.shape:
        raise ConfigurationError("valid mask dims mismatch")
    n = int(valid_mask.sum())
    if n == 0:
        raise ConfigurationError("no valid pixels for evaluation")
    pv = p[valid_mask]
    gv = g[valid_mask]
    if np.any(gv <= 0):
        raise ConfigurationError("ground-truth depth must be positive inside the valid mask")

    if median_scale:
        pv = pv * (float(np.median(gv)) / float(np.median(pv)))
    if min_depth is not None:
        pv = np.maximum(pv, min_depth)
    if max_depth is not None:
        pv = np.minimum(pv, max_depth)

    abs_rel = float(np.mean(np.abs(pv - gv) / gv))
    sq_rel = float(np.mean((pv - gv) ** 2 / gv))
    ratio = np.maximum(pv / gv, gv / pv)
    d1 = float(np.mean(ratio < 1.25))
    d2 = float(np.mean(ratio < 1.25 ** 2))
    d3 = float(np.mean(ratio < 1.25 ** 3))
    return EvalMetrics(abs_rel, sq_rel, d1, d2, d3, n)
