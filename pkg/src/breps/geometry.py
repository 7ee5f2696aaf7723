"""Axis-aligned bounding-box arithmetic.

Conventions used everywhere in this package:

* A box is four continuous pixel coordinates ``(x1, y1, x2, y2)`` with the
  origin at the top-left image corner, x growing rightward, y downward.
  Valid boxes satisfy ``x1 < x2`` and ``y1 < y2``; raw optimizer proposals
  may violate this and are repaired by :func:`clip_and_order`.
* Masks use a half-open pixel convention: the foreground pixel in column
  ``c``, row ``r`` occupies the box ``(c, r, c + 1, r + 1)``.
* IoU here is the continuous-area overlap of two boxes, not a pixel count;
  rasterized IoU against masks lives in :mod:`breps.segmodel`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, InvalidGroundTruthError, InvalidInputError

# Minimum box side enforced after clipping so prompts never collapse.
MIN_SIDE = 1.0


@dataclass(frozen=True)
class BBox:
    """Continuous axis-aligned box in image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        # normalize numpy scalars so repr/json stay plain floats
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in a)
        return BBox(x1, y1, x2, y2)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2))

    def is_ordered(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2


@dataclass(frozen=True)
class CIoUBreakdown:
    """All components of the complete-IoU loss for one box pair."""

    iou: float
    center_penalty: float
    aspect_v: float
    alpha: float
    total: float


def _require_valid(b: BBox, name: str) -> None:
    if not b.is_finite():
        raise InvalidInputError(f"{name} has non-finite coordinates: {b}")
    if not b.is_ordered():
        raise InvalidInputError(f"{name} violates x1 < x2, y1 < y2: {b}")


def iou(a: BBox, b: BBox) -> float:
    """Continuous-area intersection over union of two valid boxes.

    Boxes touching only along an edge have zero intersection area and
    therefore IoU 0.
    """
    _require_valid(a, "a")
    _require_valid(b, "b")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ciou_loss(b: BBox, b_star: BBox) -> CIoUBreakdown:
    """Complete-IoU loss of ``b`` against the reference box ``b_star``.

    total = 1 - IoU + rho^2/c^2 + alpha * v, where rho is the distance
    between centers, c the diagonal of the smallest box enclosing both,
    v the squared arctan aspect-ratio gap, and alpha = v / ((1 - IoU) + v)
    (defined as 0 when both numerator terms vanish, i.e. identical boxes).
    """
    _require_valid(b, "b")
    if not b_star.is_finite():
        raise InvalidInputError(f"b_star has non-finite coordinates: {b_star}")
    if b_star.width <= 0.0 or b_star.height <= 0.0:
        raise InvalidGroundTruthError(f"degenerate reference box: {b_star}")

    overlap = iou(b, b_star)

    bx, by = b.center
    gx, gy = b_star.center
    rho2 = (bx - gx) ** 2 + (by - gy) ** 2
    cw = max(b.x2, b_star.x2) - min(b.x1, b_star.x1)
    ch = max(b.y2, b_star.y2) - min(b.y1, b_star.y1)
    c2 = cw * cw + ch * ch
    center_penalty = rho2 / c2

    q = math.atan(b_star.width / b_star.height) - math.atan(b.width / b.height)
    v = (4.0 / math.pi**2) * q * q

    denom = (1.0 - overlap) + v
    alpha = v / denom if denom > 0.0 else 0.0

    total = 1.0 - overlap + center_penalty + alpha * v
    return CIoUBreakdown(
        iou=overlap,
        center_penalty=center_penalty,
        aspect_v=v,
        alpha=alpha,
        total=total,
    )


def ciou_grad(b: BBox, b_star: BBox) -> np.ndarray:
    """Gradient of ``ciou_loss(b, b_star).total`` w.r.t. ``(x1, y1, x2, y2)``.

    ``b_star`` is held fixed and ``alpha`` is treated as a constant.
    Subgradient conventions at the piecewise kinks, chosen once for
    deterministic gradients:

    * ``max(0, t)`` has derivative 0 at ``t == 0`` (active only for t > 0);
    * ``max(a, c)`` w.r.t. ``a`` has derivative 1 when ``a >= c``;
    * ``min(a, c)`` w.r.t. ``a`` has derivative 1 when ``a <= c``.
    """
    parts = ciou_loss(b, b_star)  # validates inputs

    x1, y1, x2, y2 = b.x1, b.y1, b.x2, b.y2
    gx1, gy1, gx2, gy2 = b_star.x1, b_star.y1, b_star.x2, b_star.y2
    w, h = b.width, b.height
    area_g = b_star.area

    # IoU term
    iw_raw = min(x2, gx2) - max(x1, gx1)
    ih_raw = min(y2, gy2) - max(y1, gy1)
    iw = max(0.0, iw_raw)
    ih = max(0.0, ih_raw)
    inter = iw * ih
    union = w * h + area_g - inter

    kx = 1.0 if iw_raw > 0.0 else 0.0
    ky = 1.0 if ih_raw > 0.0 else 0.0
    mx1 = 1.0 if x1 >= gx1 else 0.0
    mx2 = 1.0 if x2 <= gx2 else 0.0
    my1 = 1.0 if y1 >= gy1 else 0.0
    my2 = 1.0 if y2 <= gy2 else 0.0

    d_inter = np.array(
        [-ih * kx * mx1, -iw * ky * my1, ih * kx * mx2, iw * ky * my2]
    )
    d_area = np.array([-h, -w, h, w])
    d_union = d_area - d_inter
    d_iou = (d_inter * union - inter * d_union) / (union * union)

    # Center-distance penalty rho^2 / c^2
    dx_c = (x1 + x2) / 2.0 - (gx1 + gx2) / 2.0
    dy_c = (y1 + y2) / 2.0 - (gy1 + gy2) / 2.0
    rho2 = dx_c * dx_c + dy_c * dy_c
    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    c2 = cw * cw + ch * ch

    nx1 = 1.0 if x1 <= gx1 else 0.0
    nx2 = 1.0 if x2 >= gx2 else 0.0
    ny1 = 1.0 if y1 <= gy1 else 0.0
    ny2 = 1.0 if y2 >= gy2 else 0.0

    d_rho2 = np.array([dx_c, dy_c, dx_c, dy_c])
    d_c2 = np.array([-2.0 * cw * nx1, -2.0 * ch * ny1, 2.0 * cw * nx2, 2.0 * ch * ny2])
    d_center = (d_rho2 * c2 - rho2 * d_c2) / (c2 * c2)

    # Aspect term alpha * v with alpha detached
    q = math.atan(b_star.width / b_star.height) - math.atan(w / h)
    s = w * w + h * h
    d_q = np.array([h / s, -w / s, -h / s, w / s])
    d_v = (8.0 / math.pi**2) * q * d_q

    return -d_iou + d_center + parts.alpha * d_v


def tight_bbox(mask: np.ndarray) -> BBox:
    """Minimal half-open box enclosing all foreground (nonzero) pixels."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return BBox(
        float(cols.min()),
        float(rows.min()),
        float(cols.max() + 1),
        float(rows.max() + 1),
    )


def _fix_interval(lo: float, hi: float, limit: float) -> tuple[float, float]:
    """Enforce ``hi - lo >= MIN_SIDE`` inside ``[0, limit]``.

    Expands symmetrically about the midpoint; if the expansion crosses a
    border, the interval is shifted back inside (limit >= MIN_SIDE assumed).
    """
    if hi - lo >= MIN_SIDE:
        return lo, hi
    mid = (lo + hi) / 2.0
    lo = mid - MIN_SIDE / 2.0
    hi = lo + MIN_SIDE
    while hi - lo < MIN_SIDE:  # float rounding can leave the width an ulp short
        hi = math.nextafter(hi, math.inf)
    if lo < 0.0:
        return 0.0, MIN_SIDE
    if hi > limit:
        return limit - MIN_SIDE, limit
    return lo, hi


def _clip_raw(
    x1: float, y1: float, x2: float, y2: float, width: float, height: float
) -> tuple[float, float, float, float]:
    x1 = min(max(x1, 0.0), width)
    x2 = min(max(x2, 0.0), width)
    y1 = min(max(y1, 0.0), height)
    y2 = min(max(y2, 0.0), height)
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    x1, x2 = _fix_interval(x1, x2, width)
    y1, y2 = _fix_interval(y1, y2, height)
    return x1, y1, x2, y2


def clip_and_order(b: BBox, width: float, height: float) -> BBox:
    """Repair a raw box: clip to the image, order corners, enforce MIN_SIDE.

    Idempotent; accepts arbitrary finite coordinates.
    """
    if not b.is_finite():
        raise InvalidInputError(f"non-finite coordinates: {b}")
    if width < MIN_SIDE or height < MIN_SIDE:
        raise InvalidInputError(f"image {width}x{height} smaller than MIN_SIDE")
    return BBox(*_clip_raw(b.x1, b.y1, b.x2, b.y2, float(width), float(height)))


def fast_clipped_ciou(b_star: BBox, width: float, height: float):
    """Specialized scalar evaluator for hot loops (sampling, root solves).

    Returns ``f(x1, y1, x2, y2) -> float`` computing the CIoU total of the
    clipped/ordered box against the fixed ``b_star``, with the exact same
    arithmetic as ``ciou_loss(clip_and_order(...), b_star).total``; a parity
    test keeps the two paths identical.
    """
    if b_star.width <= 0.0 or b_star.height <= 0.0:
        raise InvalidGroundTruthError(f"degenerate reference box: {b_star}")
    gx1, gy1, gx2, gy2 = b_star.x1, b_star.y1, b_star.x2, b_star.y2
    area_g = (gx2 - gx1) * (gy2 - gy1)
    atan_g = math.atan((gx2 - gx1) / (gy2 - gy1))
    gcx = (gx1 + gx2) / 2.0
    gcy = (gy1 + gy2) / 2.0
    w_img, h_img = float(width), float(height)
    pi2 = math.pi**2

    def total(x1: float, y1: float, x2: float, y2: float) -> float:
        x1, y1, x2, y2 = _clip_raw(x1, y1, x2, y2, w_img, h_img)
        iw = min(x2, gx2) - max(x1, gx1)
        ih = min(y2, gy2) - max(y1, gy1)
        if iw <= 0.0 or ih <= 0.0:
            overlap = 0.0
        else:
            inter = iw * ih
            overlap = inter / ((x2 - x1) * (y2 - y1) + area_g - inter)
        dx_c = (x1 + x2) / 2.0 - gcx
        dy_c = (y1 + y2) / 2.0 - gcy
        rho2 = dx_c * dx_c + dy_c * dy_c
        cw = max(x2, gx2) - min(x1, gx1)
        ch = max(y2, gy2) - min(y1, gy1)
        q = atan_g - math.atan((x2 - x1) / (y2 - y1))
        v = (4.0 / pi2) * q * q
        denom = (1.0 - overlap) + v
        alpha = v / denom if denom > 0.0 else 0.0
        return 1.0 - overlap + rho2 / (cw * cw + ch * ch) + alpha * v

    return total
