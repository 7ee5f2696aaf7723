"""Standalone reimplementation of the toy prompt-to-mask model.

This module deliberately does NOT import the client-side package: the
whole point of the reference server is that an independent implementation
built from the documented constants reproduces the client's in-process
numbers. Keep the constants and operation order in sync with the
documented model:

    P(p) = sigmoid(tau * d_b(p)) * A(p) * G(b)

* tau = 1.0, prediction threshold 0.5, DICE smoothing 1e-7
* appearance A: 0.9 * ramp(blur_r2(blur_r2(mask)); 0.35..0.55) max-composed
  with per-image bait (sha256-seeded blobs, floor 0.01)
* gate G: clip((coverage - 0.60) / 0.20, 0.02, 1.0) where coverage is the
  soft inset mass over the object core, normalized
* boxes repaired by clip-to-image, corner ordering, min side 1 px
* gradient of the DICE loss w.r.t. (x1, y1, x2, y2), ties attributed in
  the order (x1, x2, y1, y2)
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

TAU = 1.0
PRED_THRESHOLD = 0.5
DICE_EPS = 1e-7

BLUR_RADIUS = 2
MASK_WEIGHT = 0.9
RAMP_LO = 0.35
RAMP_HI = 0.55
DISTRACTOR_FLOOR = 0.01

GATE_COV_LO = 0.60
GATE_COV_HI = 0.80
GATE_FLOOR = 0.02

MIN_SIDE = 1.0


@dataclass
class ServerInstance:
    image_id: str
    width: int
    height: int
    gt_mask: np.ndarray = field(repr=False)
    appearance: np.ndarray = field(repr=False)
    core: np.ndarray = field(repr=False)


def parse_pgm(data: bytes) -> np.ndarray:
    magic, rest = data.split(None, 1)
    if magic != b"P5":
        raise ValueError(f"unsupported mask format {magic!r}")
    tokens = []
    pos = 0
    while len(tokens) < 3:
        while pos < len(rest) and rest[pos : pos + 1].isspace():
            pos += 1
        if pos < len(rest) and rest[pos : pos + 1] == b"#":
            eol = rest.find(b"\n", pos)
            pos = len(rest) if eol == -1 else eol + 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(rest[start:pos]))
    width, height, maxval = tokens
    if not (width >= 1 and height >= 1 and 0 < maxval < 256):
        raise ValueError("bad PGM header")
    raster = rest[pos + 1 : pos + 1 + width * height]
    if len(raster) != width * height:
        raise ValueError("PGM raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    k = 2 * radius + 1
    p = np.pad(a.astype(np.float64), radius)
    ii = np.pad(p.cumsum(axis=0).cumsum(axis=1), ((1, 0), (1, 0)))
    h, w = a.shape
    out = (
        ii[k : k + h, k : k + w]
        - ii[0:h, k : k + w]
        - ii[k : k + h, 0:w]
        + ii[0:h, 0:w]
    )
    return out / (k * k)


def _bait_field(image_id: str, width: int, height: int) -> np.ndarray:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    yy, xx = np.mgrid[0:height, 0:width]
    xx = xx + 0.5
    yy = yy + 0.5
    d = np.full((height, width), DISTRACTOR_FLOOR)
    short = min(width, height)
    for _ in range(int(rng.integers(1, 4))):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        radius = rng.uniform(short / 16.0, short / 8.0)
        amp = rng.uniform(0.55, 0.95)
        r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / radius**2
        d = np.maximum(d, amp * np.exp(-(r2**4)))
    for _ in range(int(rng.integers(2, 6))):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        sigma = rng.uniform(short / 12.0, short / 5.0)
        amp = rng.uniform(0.05, 0.3)
        d = np.maximum(d, amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))
    return d


def build_instance(image_id: str, mask: np.ndarray) -> ServerInstance:
    gt = np.asarray(mask) != 0
    if not gt.any():
        raise ValueError("mask has no foreground pixels")
    h, w = gt.shape
    blurred = _box_blur(_box_blur(gt.astype(np.float64), BLUR_RADIUS), BLUR_RADIUS)
    core = MASK_WEIGHT * np.clip((blurred - RAMP_LO) / (RAMP_HI - RAMP_LO), 0.0, 1.0)
    appearance = np.clip(np.maximum(core, _bait_field(image_id, w, h)), 0.0, 1.0)
    return ServerInstance(
        image_id=image_id, width=w, height=h, gt_mask=gt, appearance=appearance, core=core
    )


def _fix_interval(lo: float, hi: float, limit: float) -> tuple[float, float]:
    if hi - lo >= MIN_SIDE:
        return lo, hi
    mid = (lo + hi) / 2.0
    lo = mid - MIN_SIDE / 2.0
    hi = lo + MIN_SIDE
    while hi - lo < MIN_SIDE:
        hi = math.nextafter(hi, math.inf)
    if lo < 0.0:
        return 0.0, MIN_SIDE
    if hi > limit:
        return limit - MIN_SIDE, limit
    return lo, hi


def clip_and_order(
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


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def evaluate(inst: ServerInstance, box: tuple[float, float, float, float]) -> dict:
    """Dice loss, hard IoU, and the DICE gradient at the repaired box."""
    x1, y1, x2, y2 = clip_and_order(*box, float(inst.width), float(inst.height))

    cols = np.arange(inst.width, dtype=np.float64) + 0.5
    rows = np.arange(inst.height, dtype=np.float64) + 0.5
    t1 = cols - x1
    t2 = x2 - cols
    t3 = rows - y1
    t4 = y2 - rows
    h, w = inst.height, inst.width
    terms = np.empty((4, h, w))
    terms[0] = np.broadcast_to(t1[None, :], (h, w))
    terms[1] = np.broadcast_to(t2[None, :], (h, w))
    terms[2] = np.broadcast_to(t3[:, None], (h, w))
    terms[3] = np.broadcast_to(t4[:, None], (h, w))
    which = np.argmin(terms, axis=0)
    d = np.take_along_axis(terms, which[None], axis=0)[0]

    sig = _sigmoid(TAU * d)
    a = inst.appearance
    core = inst.core
    g = inst.gt_mask

    u = sig * a
    w_sum = float(core.sum())
    cov = float((sig * core).sum() / w_sum)
    raw = (cov - GATE_COV_LO) / (GATE_COV_HI - GATE_COV_LO)
    gate = min(1.0, max(GATE_FLOOR, raw))
    gate_slope = 1.0 / (GATE_COV_HI - GATE_COV_LO) if GATE_FLOOR < raw < 1.0 else 0.0

    u_pg = float(u[g].sum())
    u_p = float(u.sum())
    s_g = float(np.count_nonzero(g))
    numer = 2.0 * gate * u_pg
    denom = gate * u_p + s_g + DICE_EPS
    loss = 1.0 - numer / denom

    dp = TAU * sig * (1.0 - sig)
    signs = (-1.0, 1.0, -1.0, 1.0)
    coord_of_term = (0, 2, 1, 3)
    d_u_p = np.zeros(4)
    d_u_pg = np.zeros(4)
    d_cov = np.zeros(4)
    for term_idx in range(4):
        sel = which == term_idx
        if not sel.any():
            continue
        base = dp[sel] * signs[term_idx]
        coord = coord_of_term[term_idx]
        d_u_p[coord] = float((base * a[sel]).sum())
        d_u_pg[coord] = float((base * a[sel])[g[sel]].sum())
        d_cov[coord] = float((base * core[sel]).sum()) / w_sum

    d_gate = gate_slope * d_cov
    d_numer = 2.0 * (d_gate * u_pg + gate * d_u_pg)
    d_denom = d_gate * u_p + gate * d_u_p
    grad = -(d_numer * denom - numer * d_denom) / (denom * denom)

    hard = u * gate > PRED_THRESHOLD
    inter = float(np.count_nonzero(hard & g))
    union = float(np.count_nonzero(hard | g))
    iou = inter / union if union > 0 else 1.0
    return {
        "dice_loss": loss,
        "iou": iou,
        "grad": [float(v) for v in grad],
    }
