"""Exhaustive-search ground truth for attack validation.

Two sweeps: a centered (h, w) sweep producing corner-anchored IoU heatmaps
(every heatmap pixel holds the IoU of the object-centered box with a corner
at that pixel, so the map is symmetric about the object center), and a full
4-D sweep over all integer boxes, feasible only at toy sizes and guarded by
an evaluation budget.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExceededError, InvalidParameterError
from .geometry import BBox
from .segmodel import Instance

#: Default cap for exhaustive_full: (W/stride) * (H/stride) per-axis product.
FULL_SWEEP_BUDGET = 1600

SENTINEL = -1.0


@dataclass(eq=False)
class Heatmap:
    width: int
    height: int
    values: np.ndarray = field(repr=False)  # IoU in [0, 1], SENTINEL = no box


@dataclass(frozen=True)
class SweepRecord:
    bbox: BBox
    iou: float


def _iou_many(model, image_id: str, boxes: np.ndarray) -> np.ndarray:
    """Evaluate many boxes, using the model's batch path when available."""
    batch = getattr(model, "batch_iou", None)
    if batch is not None:
        return np.asarray(batch(image_id, boxes), dtype=np.float64)
    return np.array(
        [model.eval(image_id, BBox.from_array(b)).iou for b in boxes], dtype=np.float64
    )


def exhaustive_centered(
    model, inst: Instance, stride: int = 1
) -> tuple[Heatmap, SweepRecord, SweepRecord]:
    """Sweep object-centered boxes; heatmap pixel (px, py) holds the IoU of
    the centered box whose corner lies at that pixel.

    The tight box has integer corners, so twice the center is an integer
    and every pixel on the stride lattice (anchored at the tight corner)
    generates a box with integer corners; mirrored pixels generate the same
    box, which makes the written map exactly symmetric. Boxes reaching
    outside the image are clipped before evaluation. Returns the heatmap
    plus the argmin/argmax records over the distinct evaluated boxes
    (first-seen wins ties, scanning rows then columns).
    """
    if stride < 1:
        raise InvalidParameterError(f"stride must be >= 1, got {stride}")
    tight = inst.tight
    two_cx = round(tight.x1 + tight.x2)
    two_cy = round(tight.y1 + tight.y2)
    w_img, h_img = inst.width, inst.height

    xs = np.arange(int(tight.x1) % stride, w_img, stride, dtype=np.int64)
    ys = np.arange(int(tight.y1) % stride, h_img, stride, dtype=np.int64)

    # Distinct boxes are keyed by the (positive) corner offsets from center.
    def interval(p: int, two_c: int, limit: int) -> tuple[float, float] | None:
        lo, hi = min(p, two_c - p), max(p, two_c - p)
        if lo == hi:
            return None  # zero-size box: no valid prompt for this pixel
        return max(0.0, float(lo)), min(float(limit), float(hi))

    x_iv = {int(p): interval(int(p), two_cx, w_img) for p in xs}
    y_iv = {int(p): interval(int(p), two_cy, h_img) for p in ys}

    boxes: list[tuple[float, float, float, float]] = []
    index: dict[tuple[float, float, float, float], int] = {}
    values = np.full((h_img, w_img), SENTINEL)
    pixel_boxes = np.full((h_img, w_img), -1, dtype=np.int64)
    for py in ys:
        yiv = y_iv[int(py)]
        if yiv is None:
            continue
        for px in xs:
            xiv = x_iv[int(px)]
            if xiv is None:
                continue
            key = (xiv[0], yiv[0], xiv[1], yiv[1])
            pos = index.get(key)
            if pos is None:
                pos = len(boxes)
                index[key] = pos
                boxes.append(key)
            pixel_boxes[py, px] = pos

    ious = _iou_many(model, inst.image_id, np.array(boxes, dtype=np.float64))
    written = pixel_boxes >= 0
    values[written] = ious[pixel_boxes[written]]

    lo = int(np.argmin(ious))
    hi = int(np.argmax(ious))
    return (
        Heatmap(width=w_img, height=h_img, values=values),
        SweepRecord(BBox(*boxes[lo]), float(ious[lo])),
        SweepRecord(BBox(*boxes[hi]), float(ious[hi])),
    )


def exhaustive_full(
    model, inst: Instance, stride: int = 1, budget: int = FULL_SWEEP_BUDGET
) -> tuple[SweepRecord, SweepRecord]:
    """Sweep every (x1, y1, x2, y2) on the stride lattice with x1 < x2,
    y1 < y2; returns the extreme IoU records (first-seen wins ties)."""
    if stride < 1:
        raise InvalidParameterError(f"stride must be >= 1, got {stride}")
    w_img, h_img = inst.width, inst.height
    load = (w_img / stride) * (h_img / stride)
    if load > budget:
        suggested = math.ceil(math.sqrt(w_img * h_img / budget))
        raise BudgetExceededError(
            f"sweep load {load:.0f} exceeds budget {budget}; "
            f"use stride >= {suggested}",
            suggested_stride=suggested,
        )

    xs = np.arange(0, w_img + 1, stride, dtype=np.float64)
    ys = np.arange(0, h_img + 1, stride, dtype=np.float64)
    x_pairs = np.array(
        [(a, b) for i, a in enumerate(xs) for b in xs[i + 1 :]], dtype=np.float64
    )
    y_pairs = np.array(
        [(a, b) for i, a in enumerate(ys) for b in ys[i + 1 :]], dtype=np.float64
    )
    nx, ny = len(x_pairs), len(y_pairs)

    # Enumeration order (x pairs outer, y pairs inner) fixes tie-breaking:
    # np.argmin/argmax return the first extreme in this order.
    boxes = np.empty((nx * ny, 4), dtype=np.float64)
    boxes[:, 0] = np.repeat(x_pairs[:, 0], ny)
    boxes[:, 2] = np.repeat(x_pairs[:, 1], ny)
    boxes[:, 1] = np.tile(y_pairs[:, 0], nx)
    boxes[:, 3] = np.tile(y_pairs[:, 1], nx)
    ious = _iou_many(model, inst.image_id, boxes)
    lo = int(np.argmin(ious))
    hi = int(np.argmax(ious))
    return (
        SweepRecord(BBox.from_array(boxes[lo]), float(ious[lo])),
        SweepRecord(BBox.from_array(boxes[hi]), float(ious[hi])),
    )


# --- rendering ---------------------------------------------------------------


def render_heatmap(heatmap: Heatmap, out_base: str | Path, png: bool = False) -> list[Path]:
    """Write the heatmap as CSV (exact values), 8-bit PGM, and optional PNG.

    CSV cells use repr floats (lossless round trip); PGM maps IoU to
    round(iou * 255) with sentinel pixels at 0; the PNG colors IoU from
    blue (0) to red (1), sentinel black.
    """
    out_base = Path(out_base)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_base.with_suffix(".csv")
    with open(csv_path, "w") as fh:
        for row in heatmap.values:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
    written.append(csv_path)

    pgm_path = out_base.with_suffix(".pgm")
    gray = np.where(
        heatmap.values == SENTINEL,
        0,
        np.rint(np.clip(heatmap.values, 0.0, 1.0) * 255.0),
    ).astype(np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{heatmap.width} {heatmap.height}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
    written.append(pgm_path)

    if png:
        png_path = out_base.with_suffix(".png")
        t = np.clip(heatmap.values, 0.0, 1.0)
        rgb = np.zeros((heatmap.height, heatmap.width, 3), dtype=np.uint8)
        rgb[..., 0] = np.rint(t * 255.0)
        rgb[..., 2] = np.rint((1.0 - t) * 255.0)
        sentinel = heatmap.values == SENTINEL
        rgb[sentinel] = 0
        _write_png(png_path, rgb)
        written.append(png_path)
    return written


def _write_png(path: Path, rgb: np.ndarray) -> None:
    """Minimal RGB PNG writer (one unfiltered IDAT chunk)."""
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[r].tobytes() for r in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        out = struct.pack(">I", len(payload)) + tag + payload
        return out + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 6)))
        fh.write(chunk(b"IEND", b""))
