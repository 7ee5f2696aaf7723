"""Differentiable prompt-to-mask model abstraction and the built-in toy model.

The toy model is an analytic stand-in for a promptable segmenter at desk
scale. A box prompt b produces the soft mask

    P(p) = sigmoid(tau * d_b(p)) * A(p) * G(b)

where d_b is the signed inset distance of pixel center p to the box
boundary, A is a per-instance appearance field derived from the
ground-truth mask, and G is a confidence gate driven by how much of the
object core the box covers. The gate mimics how promptable segmenters
collapse their mask when the prompt stops covering the object: badly
misplaced boxes predict (near) nothing, so the segmentation loss saturates
there instead of rewarding ever-larger displacements. G is exactly 1 for
boxes that cover the object well, so well-posed prompts see the plain
sigmoid-times-appearance model.

The appearance field sharpens the twice-blurred mask through a short ramp
(a wide halo would act as a soft-mass reservoir that decouples the DICE
loss from measured IoU) and adds deterministic per-image "bait": hard
blobs above the prediction threshold (capturable false positives, the
source of heatmap holes and one-pixel cliffs) plus a dim ambient layer.

Model contract: anything exposing ``eval(image_id, bbox) -> ModelEval`` can
drive the attack, the exhaustive sweeps and the metrics. The toy model and
the wire-protocol client both satisfy it. Models may additionally expose
``batch_iou(image_id, boxes)`` as a sweep fast path.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geometry import BBox, ciou_grad, ciou_loss, clip_and_order, tight_bbox
from .realism import DEFAULT_REALISM, GammaRealismModel, log_pdf, log_pdf_grad_bbox

# Boundary sharpness of the soft prediction (per pixel) and the threshold
# used to binarize it for hard IoU.
TAU = 1.0
PRED_THRESHOLD = 0.5
DICE_EPS = 1e-7

# Appearance field: ramp-sharpened blurred mask, max-composed with bait.
_BLUR_RADIUS = 2
_MASK_WEIGHT = 0.9
_RAMP_LO = 0.35
_RAMP_HI = 0.55
_DISTRACTOR_FLOOR = 0.01

# Confidence gate: linear ramp of the covered fraction of the object core,
# clipped to [floor, 1]. The floor keeps predictions strictly positive; it
# is far below the prediction threshold, so gated-out boxes still predict
# an empty hard mask.
_GATE_COV_LO = 0.60
_GATE_COV_HI = 0.80
_GATE_FLOOR = 0.02


@dataclass(frozen=True, eq=False)
class SoftMask:
    """Per-pixel scalars in [0, 1]."""

    values: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class Instance:
    """One evaluation case: mask, derived model fields, tight box."""

    image_id: str
    width: int
    height: int
    gt_mask: np.ndarray = field(repr=False)
    objectness: np.ndarray = field(repr=False)  # appearance field A
    gate_weight: np.ndarray = field(repr=False)  # object core W for the gate
    tight: BBox = None


@dataclass(eq=False)
class ModelEval:
    """One model evaluation at a box prompt."""

    dice_loss: float
    iou: float
    grad: np.ndarray  # d dice_loss / d (x1, y1, x2, y2)


def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    """Uniform (2r+1)^2 blur with zero padding, normalized by the kernel size."""
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


def _distractor_field(image_id: str, width: int, height: int) -> np.ndarray:
    """Deterministic per-image bait pattern in [_DISTRACTOR_FLOOR, ~0.95].

    A few hard blobs (crisp supergaussian disks peaking above the
    prediction threshold) plus a dim ambient layer of soft blobs.
    """
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    yy, xx = np.mgrid[0:height, 0:width]
    xx = xx + 0.5
    yy = yy + 0.5
    d = np.full((height, width), _DISTRACTOR_FLOOR)
    short = min(width, height)
    for _ in range(int(rng.integers(1, 4))):  # hard bait: false-positive holes
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        radius = rng.uniform(short / 16.0, short / 8.0)
        amp = rng.uniform(0.55, 0.95)
        r2 = ((xx - cx) ** 2 + (yy - cy) ** 2) / radius**2
        d = np.maximum(d, amp * np.exp(-(r2**4)))
    for _ in range(int(rng.integers(2, 6))):  # ambient texture, never predicted
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        sigma = rng.uniform(short / 12.0, short / 5.0)
        amp = rng.uniform(0.05, 0.3)
        d = np.maximum(d, amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))
    return d


def object_core(mask: np.ndarray) -> np.ndarray:
    """Ramp-sharpened twice-blurred mask; the gate's coverage weight."""
    blurred = _box_blur(_box_blur(mask.astype(np.float64), _BLUR_RADIUS), _BLUR_RADIUS)
    return _MASK_WEIGHT * np.clip(
        (blurred - _RAMP_LO) / (_RAMP_HI - _RAMP_LO), 0.0, 1.0
    )


def objectness_field(image_id: str, mask: np.ndarray) -> np.ndarray:
    """Appearance field: object core with per-image bait, in [0, 1]."""
    bait = _distractor_field(image_id, mask.shape[1], mask.shape[0])
    return np.clip(np.maximum(object_core(mask), bait), 0.0, 1.0)


def make_instance(image_id: str, mask: np.ndarray) -> Instance:
    """Build an Instance from a raw mask array (nonzero = foreground)."""
    gt = np.asarray(mask) != 0
    h, w = gt.shape
    return Instance(
        image_id=image_id,
        width=w,
        height=h,
        gt_mask=gt,
        objectness=objectness_field(image_id, gt),
        gate_weight=object_core(gt),
        tight=tight_bbox(gt),
    )


def _inset_terms(inst: Instance, b: BBox):
    cols = np.arange(inst.width, dtype=np.float64) + 0.5
    rows = np.arange(inst.height, dtype=np.float64) + 0.5
    return cols - b.x1, b.x2 - cols, rows - b.y1, b.y2 - rows


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign for overflow-free evaluation.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gate_value(coverage: float) -> float:
    """Confidence gate: clipped linear ramp of the covered core fraction."""
    raw = (coverage - _GATE_COV_LO) / (_GATE_COV_HI - _GATE_COV_LO)
    return min(1.0, max(_GATE_FLOOR, raw))


def _gate_slope(coverage: float) -> float:
    raw = (coverage - _GATE_COV_LO) / (_GATE_COV_HI - _GATE_COV_LO)
    if _GATE_FLOOR < raw < 1.0:
        return 1.0 / (_GATE_COV_HI - _GATE_COV_LO)
    return 0.0  # flat outside the ramp (and exactly at its edges)


def toy_predict(inst: Instance, b: BBox) -> SoftMask:
    """Soft prediction P = sigmoid(tau * inset) * appearance * gate."""
    if not (b.is_finite() and b.is_ordered()):
        raise InvalidInputError(f"invalid box for prediction: {b}")
    t1, t2, t3, t4 = _inset_terms(inst, b)
    dx = np.minimum(t1, t2)[None, :]
    dy = np.minimum(t3, t4)[:, None]
    sig = _sigmoid(TAU * np.minimum(dx, dy))
    w_sum = inst.gate_weight.sum()
    cov = float((sig * inst.gate_weight).sum() / w_sum)
    g = gate_value(cov)
    return SoftMask(values=sig * inst.objectness * g)


def dice_loss(pred: SoftMask | np.ndarray, gt_mask: np.ndarray) -> float:
    """Soft DICE loss: 1 - 2*sum(p*g) / (sum(p) + sum(g) + eps)."""
    p = pred.values if isinstance(pred, SoftMask) else np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt_mask) != 0
    if p.shape != g.shape:
        raise InvalidInputError(f"shape mismatch: prediction {p.shape} vs mask {g.shape}")
    s_pg = float(p[g].sum())
    s_p = float(p.sum())
    s_g = float(np.count_nonzero(g))
    return 1.0 - 2.0 * s_pg / (s_p + s_g + DICE_EPS)


def hard_iou(pred: SoftMask | np.ndarray, gt_mask: np.ndarray) -> float:
    """Pixel-count IoU of the thresholded prediction against the mask."""
    p = pred.values if isinstance(pred, SoftMask) else np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt_mask) != 0
    hard = p > PRED_THRESHOLD
    inter = float(np.count_nonzero(hard & g))
    union = float(np.count_nonzero(hard | g))
    return inter / union if union > 0 else 1.0


def toy_loss_and_grad(inst: Instance, b: BBox) -> ModelEval:
    """DICE loss, hard IoU and the analytic DICE gradient at box b.

    The inset distance is a min of four linear terms; at ties the gradient
    is attributed to the first coordinate in the fixed order
    (x1, x2, y1, y2), matching np.argmin over that stacking order. The gate
    contributes through the chain rule; its clipped ramp has zero slope
    outside (and exactly at) the ramp edges.
    """
    if not (b.is_finite() and b.is_ordered()):
        raise InvalidInputError(f"invalid box for evaluation: {b}")
    t1, t2, t3, t4 = _inset_terms(inst, b)
    h, w = inst.height, inst.width
    terms = np.empty((4, h, w))
    terms[0] = np.broadcast_to(t1[None, :], (h, w))
    terms[1] = np.broadcast_to(t2[None, :], (h, w))
    terms[2] = np.broadcast_to(t3[:, None], (h, w))
    terms[3] = np.broadcast_to(t4[:, None], (h, w))
    which = np.argmin(terms, axis=0)
    d = np.take_along_axis(terms, which[None], axis=0)[0]

    sig = _sigmoid(TAU * d)
    a = inst.objectness
    wgt = inst.gate_weight
    g = inst.gt_mask

    u = sig * a  # ungated prediction
    w_sum = float(wgt.sum())
    cov = float((sig * wgt).sum() / w_sum)
    gate = gate_value(cov)
    gate_slope = _gate_slope(cov)

    u_pg = float(u[g].sum())
    u_p = float(u.sum())
    s_g = float(np.count_nonzero(g))
    numer = 2.0 * gate * u_pg
    denom = gate * u_p + s_g + DICE_EPS
    loss = 1.0 - numer / denom

    # dP = tau * sig * (1 - sig) * dd/dcoord, dd in {-1, 0, +1} by argmin
    dp = TAU * sig * (1.0 - sig)
    signs = (-1.0, 1.0, -1.0, 1.0)
    coord_of_term = (0, 2, 1, 3)  # term order (x1, x2, y1, y2) -> coord index
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
        d_cov[coord] = float((base * wgt[sel]).sum()) / w_sum

    d_gate = gate_slope * d_cov
    d_numer = 2.0 * (d_gate * u_pg + gate * d_u_pg)
    d_denom = d_gate * u_p + gate * d_u_p
    grad = -(d_numer * denom - numer * d_denom) / (denom * denom)

    hard = u * gate > PRED_THRESHOLD
    inter = float(np.count_nonzero(hard & g))
    union = float(np.count_nonzero(hard | g))
    return ModelEval(dice_loss=loss, iou=inter / union if union > 0 else 1.0, grad=grad)


class ToyModel:
    """In-process analytic model satisfying the eval contract.

    Boxes are passed through clip_and_order before evaluation, so the
    reported gradient is the one at the repaired box (same convention the
    reference wire server documents).
    """

    def __init__(self, instances=()):
        self._instances: dict[str, Instance] = {}
        for inst in instances:
            self.add(inst)

    def add(self, inst: Instance) -> None:
        self._instances[inst.image_id] = inst

    def instance(self, image_id: str) -> Instance:
        try:
            return self._instances[image_id]
        except KeyError:
            raise InvalidInputError(f"unknown image_id: {image_id!r}") from None

    def image_ids(self) -> list[str]:
        return list(self._instances)

    def eval(self, image_id: str, bbox: BBox) -> ModelEval:
        inst = self.instance(image_id)
        clipped = clip_and_order(bbox, inst.width, inst.height)
        return toy_loss_and_grad(inst, clipped)

    def batch_iou(self, image_id: str, boxes: np.ndarray) -> np.ndarray:
        """Hard IoU for many in-bounds ordered boxes at once.

        Float-identical to eval().iou: the sigmoid of the four-term min is
        evaluated as the min of the per-axis sigmoids (monotonicity), and
        all products/reductions run in the same order as the scalar path.
        """
        inst = self.instance(image_id)
        boxes = np.asarray(boxes, dtype=np.float64)
        cols = np.arange(inst.width, dtype=np.float64) + 0.5
        rows = np.arange(inst.height, dtype=np.float64) + 0.5
        a = inst.objectness
        wgt = inst.gate_weight
        w_sum = wgt.sum()
        g = inst.gt_mask
        g_count = np.count_nonzero(g)

        sx = _sigmoid(
            TAU * np.minimum(cols[None, :] - boxes[:, 0:1], boxes[:, 2:3] - cols[None, :])
        )  # (N, W)
        sy = _sigmoid(
            TAU * np.minimum(rows[None, :] - boxes[:, 1:2], boxes[:, 3:4] - rows[None, :])
        )  # (N, H)
        out = np.empty(len(boxes))
        chunk = max(1, 1_000_000 // (inst.width * inst.height))
        for start in range(0, len(boxes), chunk):
            end = min(start + chunk, len(boxes))
            sig = np.minimum(sy[start:end, :, None], sx[start:end, None, :])
            cov = (sig * wgt).sum(axis=(1, 2)) / w_sum
            gates = np.clip(
                (cov - _GATE_COV_LO) / (_GATE_COV_HI - _GATE_COV_LO),
                _GATE_FLOOR,
                1.0,
            )
            pred = (sig * a) * gates[:, None, None] > PRED_THRESHOLD
            inter = np.count_nonzero(pred & g[None], axis=(1, 2))
            psum = np.count_nonzero(pred, axis=(1, 2))
            union = psum + g_count - inter
            out[start:end] = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        return out


@dataclass(frozen=True)
class GradCheckReport:
    """Max relative FD-vs-analytic error per differentiated quantity."""

    dice_max: float
    ciou_max: float
    log_pdf_max: float
    per_coord: dict


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-coordinate |a - n| / max(|a|, |n|, 1e-8); exactly 0 when a == n."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def _fd4(f, coords: np.ndarray, step: float) -> np.ndarray:
    out = np.zeros(4)
    for i in range(4):
        hi = coords.copy()
        lo = coords.copy()
        hi[i] += step
        lo[i] -= step
        out[i] = (f(hi) - f(lo)) / (2.0 * step)
    return out


def grad_check(
    inst: Instance,
    b: BBox,
    step: float,
    realism: GammaRealismModel = DEFAULT_REALISM,
) -> GradCheckReport:
    """Central finite differences vs analytic gradients at box b.

    Covers the toy DICE loss, the CIoU loss against the instance's tight
    box, and log_pdf(CIoU). The CIoU-based checks difference the
    alpha-detached surrogate, which is the objective the analytic gradients
    differentiate.
    """
    if step <= 0.0:
        raise InvalidInputError(f"step must be positive, got {step}")
    coords = b.as_array()
    tight = inst.tight

    analytic_dice = toy_loss_and_grad(inst, b).grad
    numeric_dice = _fd4(
        lambda c: toy_loss_and_grad(inst, BBox.from_array(c)).dice_loss, coords, step
    )
    dice_err = relative_errors(analytic_dice, numeric_dice)

    alpha0 = ciou_loss(b, tight).alpha

    def detached_total(c: np.ndarray) -> float:
        parts = ciou_loss(BBox.from_array(c), tight)
        return 1.0 - parts.iou + parts.center_penalty + alpha0 * parts.aspect_v

    analytic_ciou = ciou_grad(b, tight)
    numeric_ciou = _fd4(detached_total, coords, step)
    ciou_err = relative_errors(analytic_ciou, numeric_ciou)

    analytic_lp = log_pdf_grad_bbox(realism, b, tight)
    numeric_lp = _fd4(lambda c: log_pdf(realism, detached_total(c)), coords, step)
    lp_err = relative_errors(analytic_lp, numeric_lp)

    return GradCheckReport(
        dice_max=float(dice_err.max()),
        ciou_max=float(ciou_err.max()),
        log_pdf_max=float(lp_err.max()),
        per_coord={"dice": dice_err, "ciou": ciou_err, "log_pdf": lp_err},
    )
