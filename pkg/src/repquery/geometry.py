"""Interval arithmetic in normalised time.

An interval is stored as (midpoint, duration), both fractions of the
sequence length.  Overlap measures work on raw endpoints: nothing is
clamped to [0, 1], so predicted intervals that spill over the sequence
border still produce informative gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class GeometryError(ValueError):
    """An interval or weight violates its invariants."""


@dataclass(frozen=True)
class Interval:
    midpoint: float
    duration: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.midpoint) and np.isfinite(self.duration)):
            raise GeometryError("interval fields must be finite")
        if not 0.0 <= self.midpoint <= 1.0:
            raise GeometryError(f"midpoint {self.midpoint} outside [0, 1]")
        if not 0.0 < self.duration <= 1.0:
            raise GeometryError(f"duration {self.duration} outside (0, 1]")

    @classmethod
    def from_endpoints(cls, start: float, end: float) -> "Interval":
        return cls((start + end) / 2.0, end - start)

    @property
    def start(self) -> float:
        return self.midpoint - self.duration / 2.0

    @property
    def end(self) -> float:
        return self.midpoint + self.duration / 2.0


@dataclass(frozen=True)
class PositionLossWeights:
    l1: float = 5.0
    giou: float = 0.4

    def __post_init__(self) -> None:
        for name in ("l1", "giou"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise GeometryError(f"position loss weight {name}={v} must be finite and >= 0")


def to_endpoints(iv: Interval) -> tuple[float, float]:
    return iv.start, iv.end


# -- vectorised numpy forms (used for matching costs) ---------------------------


def _endpoint_terms(m1, d1, m2, d2):
    s1, e1 = m1 - d1 / 2.0, m1 + d1 / 2.0
    s2, e2 = m2 - d2 / 2.0, m2 + d2 / 2.0
    inter = np.maximum(0.0, np.minimum(e1, e2) - np.maximum(s1, s2))
    # lengths from endpoints keep inter <= union exact under rounding
    union = (e1 - s1) + (e2 - s2) - inter
    hull = np.maximum(e1, e2) - np.minimum(s1, s2)
    return inter, union, hull


def iou_array(m1, d1, m2, d2) -> np.ndarray:
    """Broadcasting IoU of intervals given as midpoint/duration arrays."""
    inter, union, _ = _endpoint_terms(*map(np.asarray, (m1, d1, m2, d2)))
    return inter / union


def giou_array(m1, d1, m2, d2) -> np.ndarray:
    """Broadcasting generalised IoU of intervals given as midpoint/duration arrays."""
    inter, union, hull = _endpoint_terms(*map(np.asarray, (m1, d1, m2, d2)))
    # hull can round below union for nested intervals; the penalty is never negative
    return inter / union - np.maximum(hull - union, 0.0) / hull


def position_loss_array(pm, pd, gm, gd, w: PositionLossWeights) -> np.ndarray:
    pm, pd, gm, gd = map(np.asarray, (pm, pd, gm, gd))
    l1 = np.abs(pm - gm) + np.abs(pd - gd)
    return w.l1 * l1 + w.giou * (1.0 - giou_array(pm, pd, gm, gd))


# -- scalar API on Interval -------------------------------------------------------


def iou_1d(a: Interval, b: Interval) -> float:
    return float(iou_array(a.midpoint, a.duration, b.midpoint, b.duration))


def giou_1d(a: Interval, b: Interval) -> float:
    return float(giou_array(a.midpoint, a.duration, b.midpoint, b.duration))


def position_loss(pred: Interval, gt: Interval, w: PositionLossWeights) -> float:
    """L1 distance over (m, d) plus the 1 - gIoU term, each weighted."""
    return float(position_loss_array(pred.midpoint, pred.duration, gt.midpoint, gt.duration, w))


# -- differentiable form ------------------------------------------------------------


def giou_tensor(pm: Tensor, pd: Tensor, gm: np.ndarray, gd: np.ndarray) -> Tensor:
    """gIoU of predicted intervals (tensors) against fixed targets, elementwise."""
    if np.any(pd.data <= 0) or np.any(np.asarray(gd) <= 0):
        raise GeometryError("durations must be positive")
    gm = Tensor(gm)
    gd = Tensor(gd)
    half_p = ad.scale(pd, 0.5)
    ps, pe = pm - half_p, pm + half_p
    gs = Tensor(gm.data - gd.data / 2.0)
    ge = Tensor(gm.data + gd.data / 2.0)
    inter = ad.relu(ad.minimum(pe, ge) - ad.maximum(ps, gs))
    union = (pe - ps) + (ge - gs) - inter
    hull = ad.maximum(pe, ge) - ad.minimum(ps, gs)
    return inter / union - (hull - union) / hull


def position_loss_tensor(pm: Tensor, pd: Tensor, gm: np.ndarray, gd: np.ndarray, w: PositionLossWeights) -> Tensor:
    """Elementwise position loss of predicted (m, d) tensors against fixed targets."""
    l1 = ad.abs(pm - Tensor(gm)) + ad.abs(pd - Tensor(gd))
    return ad.scale(l1, w.l1) + ad.scale(1.0 - giou_tensor(pm, pd, gm, gd), w.giou)
