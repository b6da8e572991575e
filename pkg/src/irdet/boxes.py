"""Axis-aligned box geometry: overlap metrics and differentiable box losses.

Boxes live in center form (cx, cy, w, h) in pixels.  The similarity between
two boxes can be measured three ways:

* plain intersection-over-union,
* complete IoU, which adds a center-distance and an aspect-ratio penalty,
* a Gaussian Wasserstein similarity: each box maps to an axis-aligned
  Gaussian (mean = center, standard deviation = half extent per axis), the
  squared 2-Wasserstein distance between the two Gaussians is

      W2 = (cxa-cxb)^2 + (cya-cyb)^2 + ((wa-wb)/2)^2 + ((ha-hb)/2)^2

  and the similarity is exp(-sqrt(W2) / c) for a dataset-scale constant c.
  Unlike IoU it stays informative for disjoint boxes, which matters when
  targets span only a few pixels and a one-pixel shift can zero the overlap.

Each metric exists twice: a scalar float path used by evaluation and tests,
and a Tensor path used inside the training loss.  The float path avoids the
epsilon guards the Tensor path needs for gradient stability, so exact
identities (metric of a box with itself is 1.0) hold bitwise there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import InvalidArgumentError

# sqrt argument guard used on the differentiable path; keeps the gradient of
# sqrt finite when a predicted box sits exactly on its target.
SQRT_GUARD = 1e-12
DEFAULT_WASSERSTEIN_C = 17.0


@dataclass(frozen=True)
class BBox:
    """Center-form box in pixels; width and height must be non-negative."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidArgumentError(f"BBox.{name} must be finite, got {v!r}")
        if self.w < 0 or self.h < 0:
            raise InvalidArgumentError(f"BBox extents must be non-negative, got w={self.w}, h={self.h}")

    def corners(self):
        """(x1, y1, x2, y2)"""
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self):
        return self.w * self.h

    def shifted(self, dx, dy):
        return BBox(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class LossKind:
    """Selects the box similarity driving the regression loss.

    ``c_const`` only applies to the Wasserstein kind; it sets the distance
    scale at which similarity decays by 1/e.
    """

    tag: str = "nwd"
    c_const: float = DEFAULT_WASSERSTEIN_C

    def __post_init__(self):
        if self.tag not in ("iou", "ciou", "nwd"):
            raise InvalidArgumentError(f"LossKind.tag must be iou|ciou|nwd, got '{self.tag}'")
        if not (self.c_const > 0):
            raise InvalidArgumentError(f"LossKind.c_const must be positive, got {self.c_const}")


# ---------------------------------------------------------------------------
# scalar float path


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def wasserstein_sq(a: BBox, b: BBox) -> float:
    dx = a.cx - b.cx
    dy = a.cy - b.cy
    dw = (a.w - b.w) / 2.0
    dh = (a.h - b.h) / 2.0
    return dx * dx + dy * dy + dw * dw + dh * dh


def nwd(a: BBox, b: BBox, c: float = DEFAULT_WASSERSTEIN_C) -> float:
    """Wasserstein similarity in (0, 1]; exactly 1.0 iff the boxes coincide."""
    if not (c > 0):
        raise InvalidArgumentError(f"nwd constant must be positive, got {c}")
    w2 = wasserstein_sq(a, b)
    if w2 == 0.0:
        return 1.0
    return math.exp(-math.sqrt(w2) / c)


def ciou(a: BBox, b: BBox) -> float:
    """Complete IoU: overlap minus center-distance and aspect penalties."""
    base = iou(a, b)
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    if c2 == 0.0:
        # Both boxes are the same degenerate point.
        return 0.0
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    va = math.atan2(a.w, a.h)
    vb = math.atan2(b.w, b.h)
    v = (4.0 / math.pi**2) * (vb - va) ** 2
    alpha = v / ((1.0 - base) + v + 1e-9)
    return base - rho2 / c2 - alpha * v


def box_loss_value(pred: BBox, gt: BBox, kind: LossKind) -> float:
    """1 - similarity under the configured metric."""
    if kind.tag == "nwd":
        return 1.0 - nwd(pred, gt, kind.c_const)
    if kind.tag == "ciou":
        return 1.0 - ciou(pred, gt)
    return 1.0 - iou(pred, gt)


def metric_value(pred: BBox, gt: BBox, kind: LossKind) -> float:
    if kind.tag == "nwd":
        return nwd(pred, gt, kind.c_const)
    if kind.tag == "ciou":
        return ciou(pred, gt)
    return iou(pred, gt)


def loss_landscape(gt: BBox, dxs, dys, kind: LossKind) -> np.ndarray:
    """Metric similarity of the ground-truth box against shifted copies.

    Returns a [len(dys), len(dxs)] matrix; entry (i, j) is the metric between
    ``gt`` and ``gt`` shifted by (dxs[j], dys[i]) pixels.
    """
    out = np.zeros((len(dys), len(dxs)), dtype=np.float64)
    for i, dy in enumerate(dys):
        for j, dx in enumerate(dxs):
            out[i, j] = metric_value(gt.shifted(dx, dy), gt, kind)
    return out


# ---------------------------------------------------------------------------
# differentiable path (elementwise over batches of K boxes)


def nwd_graph(pred, gt, c=DEFAULT_WASSERSTEIN_C):
    """Wasserstein similarity for Tensor boxes.

    ``pred`` and ``gt`` are 4-tuples (cx, cy, w, h) of Tensors or arrays
    broadcastable to a common shape.  The sqrt argument carries a small guard
    so gradients stay finite at exact coincidence.
    """
    pcx, pcy, pw, ph = pred
    gcx, gcy, gw, gh = gt
    dx = ag.sub(pcx, gcx)
    dy = ag.sub(pcy, gcy)
    dw = ag.mul(ag.sub(pw, gw), 0.5)
    dh = ag.mul(ag.sub(ph, gh), 0.5)
    w2 = dx * dx + dy * dy + dw * dw + dh * dh
    return ag.exp(ag.mul(ag.sqrt(w2 + SQRT_GUARD), -1.0 / float(c)))


def ciou_graph(pred, gt):
    """Complete IoU for Tensor boxes with positive extents."""
    pcx, pcy, pw, ph = pred
    gcx, gcy, gw, gh = gt
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = ag.sub(gcx, ag.mul(gw, 0.5)), ag.add(gcx, ag.mul(gw, 0.5))
    gy1, gy2 = ag.sub(gcy, ag.mul(gh, 0.5)), ag.add(gcy, ag.mul(gh, 0.5))

    iw = ag.relu(ag.minimum(px2, gx2) - ag.maximum(px1, gx1))
    ih = ag.relu(ag.minimum(py2, gy2) - ag.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + ag.mul(gw, gh) - inter
    overlap = inter / (union + 1e-9)

    cw = ag.maximum(px2, gx2) - ag.minimum(px1, gx1)
    ch = ag.maximum(py2, gy2) - ag.minimum(py1, gy1)
    c2 = cw * cw + ch * ch + 1e-9
    rho2 = (pcx - gcx) ** 2.0 + (pcy - gcy) ** 2.0

    v = ag.mul((ag.arctan(ag.div(gw, gh)) - ag.arctan(pw / ph)) ** 2.0, 4.0 / math.pi**2)
    alpha = v / ((1.0 - overlap) + v + 1e-9)
    return overlap - rho2 / c2 - alpha * v


def box_loss_graph(pred, gt, kind: LossKind):
    """Differentiable 1 - similarity, elementwise over the box batch."""
    if kind.tag == "nwd":
        return 1.0 - nwd_graph(pred, gt, kind.c_const)
    if kind.tag == "ciou":
        return 1.0 - ciou_graph(pred, gt)
    raise InvalidArgumentError(f"no differentiable loss for kind '{kind.tag}'")
