import numpy as np
import pytest

from breps.errors import InvalidInputError
from breps.geometry import BBox, clip_and_order, tight_bbox
from breps.segmodel import (
    Instance,
    TAU,
    ToyModel,
    _GATE_COV_HI,
    _GATE_COV_LO,
    _GATE_FLOOR,
    dice_loss,
    grad_check,
    make_instance,
    object_core,
    objectness_field,
    relative_errors,
    toy_loss_and_grad,
    toy_predict,
)


def square_mask(size: int, lo: int, hi: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[lo:hi, lo:hi] = 1
    return mask


def uniform_instance(size: int, lo: int, hi: int, a: float = 1.0) -> Instance:
    """Instance with a constant appearance field (no distractor)."""
    gt = square_mask(size, lo, hi) != 0
    return Instance(
        image_id="uniform",
        width=size,
        height=size,
        gt_mask=gt,
        objectness=np.full((size, size), a),
        gate_weight=object_core(gt),
        tight=tight_bbox(gt),
    )


@pytest.fixture
def toy32() -> Instance:
    return make_instance("toy32", square_mask(32, 11, 21))


# --- toy_predict ------------------------------------------------------------


def test_predict_saturates_deep_inside_box():
    inst = uniform_instance(32, 8, 24, a=1.0)
    pred = toy_predict(inst, BBox(0, 0, 32, 32))
    assert pred.values[16, 16] > 0.999  # 16 px from every edge, sigmoid ~ 1


def test_predict_on_boundary_is_half_objectness():
    inst = uniform_instance(16, 4, 12, a=0.8)
    # pixel (col 0, row 8) has center (0.5, 8.5); box edge at x = 0.5 -> d = 0
    pred = toy_predict(inst, BBox(0.5, 0, 12, 16))
    assert pred.values[8, 0] == pytest.approx(0.5 * 0.8, abs=1e-12)


def test_predict_tight_beats_half_size_box(toy32):
    tight_eval = toy_loss_and_grad(toy32, toy32.tight)
    t = toy32.tight
    cx, cy = t.center
    half = BBox(
        cx - t.width / 4, cy - t.height / 4, cx + t.width / 4, cy + t.height / 4
    )
    half_eval = toy_loss_and_grad(toy32, half)
    assert tight_eval.iou > half_eval.iou


def test_predict_values_strictly_inside_unit_interval(toy32):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x1, x2 = np.sort(rng.uniform(0, 32, 2))
        y1, y2 = np.sort(rng.uniform(0, 32, 2))
        b = BBox(x1, y1, x2 + 0.5, y2 + 0.5)
        v = toy_predict(toy32, b).values
        assert np.all(v > 0.0)
        assert np.all(v < 1.0)


def test_predict_monotone_in_objectness(toy32):
    scaled = Instance(
        image_id=toy32.image_id,
        width=toy32.width,
        height=toy32.height,
        gt_mask=toy32.gt_mask,
        objectness=toy32.objectness * 0.5,
        gate_weight=toy32.gate_weight,
        tight=toy32.tight,
    )
    b = BBox(8, 8, 25, 26)
    full = toy_predict(toy32, b).values
    half = toy_predict(scaled, b).values
    assert np.all(half <= full)


def test_predict_sum_monotone_under_box_growth(toy32):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x1, x2 = np.sort(rng.uniform(2, 30, 2))
        y1, y2 = np.sort(rng.uniform(2, 30, 2))
        inner = BBox(x1, y1, x2 + 1, y2 + 1)
        pad = rng.uniform(0.1, 2.0, size=4)
        outer = BBox(x1 - pad[0], y1 - pad[1], x2 + 1 + pad[2], y2 + 1 + pad[3])
        assert toy_predict(toy32, inner).values.sum() <= toy_predict(
            toy32, outer
        ).values.sum()


def test_predict_rejects_invalid_box(toy32):
    with pytest.raises(InvalidInputError):
        toy_predict(toy32, BBox(5, 5, 4, 6))


# --- dice_loss --------------------------------------------------------------


def test_dice_perfect_prediction_is_near_zero():
    g = square_mask(16, 4, 12)
    assert dice_loss(g.astype(np.float64), g) == pytest.approx(0.0, abs=1e-6)


def test_dice_empty_prediction_is_one():
    g = square_mask(16, 4, 12)
    assert dice_loss(np.zeros((16, 16)), g) == pytest.approx(1.0, abs=1e-6)


def test_dice_uniform_half_prediction_closed_form():
    # p = 0.5 everywhere, g covers half the pixels:
    # 1 - 2*(0.5*N/2) / (0.5*N + N/2) = 0.5
    g = np.zeros((10, 10), dtype=np.uint8)
    g[:5, :] = 1
    p = np.full((10, 10), 0.5)
    assert dice_loss(p, g) == pytest.approx(0.5, abs=1e-7)


def test_dice_bounded_random():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.random((8, 8))
        g = rng.random((8, 8)) < 0.4
        assert 0.0 <= dice_loss(p, g) <= 1.0


def test_dice_shape_mismatch():
    with pytest.raises(InvalidInputError):
        dice_loss(np.zeros((4, 4)), np.zeros((5, 4)))


# --- toy_loss_and_grad --------------------------------------------------------


def fd_dice_grad(inst: Instance, b: BBox, step: float = 1e-3) -> np.ndarray:
    coords = b.as_array()
    out = np.zeros(4)
    for i in range(4):
        hi, lo = coords.copy(), coords.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = toy_loss_and_grad(inst, BBox.from_array(hi)).dice_loss
        f_lo = toy_loss_and_grad(inst, BBox.from_array(lo)).dice_loss
        out[i] = (f_hi - f_lo) / (2 * step)
    return out


def min_term_gap(inst: Instance, b: BBox) -> float:
    """Smallest margin between the winning inset term and the runner-up.

    FD across a pixel whose argmin term flips inside the step window sees a
    kink; configurations with a tight gap are 'at a tie' and excluded, as
    the analytic gradient is a fixed-attribution subgradient there.
    """
    cols = np.arange(inst.width) + 0.5
    rows = np.arange(inst.height) + 0.5
    terms = np.stack(
        [
            np.broadcast_to((cols - b.x1)[None, :], (inst.height, inst.width)),
            np.broadcast_to((b.x2 - cols)[None, :], (inst.height, inst.width)),
            np.broadcast_to((rows - b.y1)[:, None], (inst.height, inst.width)),
            np.broadcast_to((b.y2 - rows)[:, None], (inst.height, inst.width)),
        ]
    )
    two = np.sort(terms, axis=0)[:2]
    return float((two[1] - two[0]).min())


def gate_ramp_margin(inst: Instance, b: BBox) -> float:
    """Distance of the gate's ramp coordinate from its two clip kinks."""
    from breps.segmodel import _inset_terms, _sigmoid

    t1, t2, t3, t4 = _inset_terms(inst, b)
    sig = _sigmoid(TAU * np.minimum(np.minimum(t1, t2)[None, :], np.minimum(t3, t4)[:, None]))
    cov = float((sig * inst.gate_weight).sum() / inst.gate_weight.sum())
    raw = (cov - _GATE_COV_LO) / (_GATE_COV_HI - _GATE_COV_LO)
    return min(abs(raw - _GATE_FLOOR), abs(raw - 1.0))


def test_grad_matches_fd_on_random_instances_and_boxes():
    step = 1e-3
    rng = np.random.default_rng(3)
    checked = 0
    case = 0
    while checked < 100:
        case += 1
        size = int(rng.integers(24, 48))
        lo = int(rng.integers(4, size // 3))
        hi = int(rng.integers(size // 2, size - 4))
        inst = make_instance(f"fd-{case}", square_mask(size, lo, hi))
        x1, x2 = np.sort(rng.uniform(1, size - 1, 2) + rng.uniform(0.01, 0.07, 2))
        y1, y2 = np.sort(rng.uniform(1, size - 1, 2) + rng.uniform(0.01, 0.07, 2))
        if x2 - x1 < 2 or y2 - y1 < 2:
            continue
        b = BBox(x1, y1, x2, y2)
        if min_term_gap(inst, b) < 3 * step:
            continue
        if gate_ramp_margin(inst, b) < 0.02:  # clipped-ramp kink within FD reach
            continue
        analytic = toy_loss_and_grad(inst, b).grad
        numeric = fd_dice_grad(inst, b, step)
        err = relative_errors(analytic, numeric)
        scale = np.maximum(np.abs(numeric), 1e-4)
        assert np.all(np.abs(analytic - numeric) / scale < 1e-3), (case, err)
        checked += 1


def test_far_box_over_dead_region(toy32):
    # bottom-right corner is far from the object; objectness there is tiny
    b = BBox(28, 28, 31.5, 31.5)
    if float(toy32.objectness[28:32, 28:32].max()) > 0.3:
        pytest.skip("distractor landed in the probe corner for this id")
    ev = toy_loss_and_grad(toy32, b)
    assert ev.iou == 0.0
    assert ev.dice_loss > 0.95


def test_symmetric_instance_has_antisymmetric_gradient():
    inst_mask = square_mask(32, 11, 21)
    gt = inst_mask != 0
    a = object_core(gt)  # symmetric field: no bait
    inst = Instance(
        image_id="sym",
        width=32,
        height=32,
        gt_mask=gt,
        objectness=a,
        gate_weight=a,
        tight=tight_bbox(gt),
    )
    grad = toy_loss_and_grad(inst, inst.tight).grad
    assert grad[0] == pytest.approx(-grad[2], abs=1e-10)
    assert grad[1] == pytest.approx(-grad[3], abs=1e-10)


def test_eval_fields_well_formed(toy32):
    ev = toy_loss_and_grad(toy32, BBox(9, 9, 23, 24))
    assert 0.0 <= ev.dice_loss <= 1.0
    assert 0.0 <= ev.iou <= 1.0
    assert np.all(np.isfinite(ev.grad))


# --- ToyModel ----------------------------------------------------------------


def test_toy_model_eval_clips_before_evaluating(toy32):
    model = ToyModel([toy32])
    raw = BBox(-5, -3, 40, 45)
    clipped = clip_and_order(raw, 32, 32)
    direct = toy_loss_and_grad(toy32, clipped)
    via_model = model.eval("toy32", raw)
    assert via_model.dice_loss == direct.dice_loss
    assert via_model.iou == direct.iou
    np.testing.assert_array_equal(via_model.grad, direct.grad)


def test_toy_model_unknown_image(toy32):
    model = ToyModel([toy32])
    with pytest.raises(InvalidInputError):
        model.eval("nope", BBox(0, 0, 5, 5))


def test_batch_iou_identical_to_eval_loop(toy32):
    model = ToyModel([toy32])
    rng = np.random.default_rng(4)
    boxes = []
    for _ in range(200):
        x1, x2 = np.sort(rng.integers(0, 33, 2))
        y1, y2 = np.sort(rng.integers(0, 33, 2))
        if x2 - x1 >= 1 and y2 - y1 >= 1:
            boxes.append([x1, y1, x2, y2])
    boxes = np.array(boxes, dtype=np.float64)
    batch = model.batch_iou("toy32", boxes)
    single = np.array([model.eval("toy32", BBox.from_array(b)).iou for b in boxes])
    np.testing.assert_array_equal(batch, single)


# --- objectness / instances -----------------------------------------------------


def test_objectness_deterministic_per_image_id():
    mask = square_mask(24, 6, 18)
    a1 = objectness_field("same-id", mask != 0)
    a2 = objectness_field("same-id", mask != 0)
    a3 = objectness_field("other-id", mask != 0)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, a3)


def test_objectness_in_unit_interval_and_positive(toy32):
    assert np.all(toy32.objectness >= 0.0)
    assert np.all(toy32.objectness <= 1.0)
    assert np.all(toy32.objectness > 0.0)  # distractor floor keeps it positive


def test_make_instance_ties_fields_together(toy32):
    assert toy32.width == toy32.height == 32
    assert toy32.tight == tight_bbox(toy32.gt_mask)
    assert toy32.gt_mask.dtype == bool


# --- grad_check ----------------------------------------------------------------


def test_grad_check_small_errors_at_random_box(toy32):
    report = grad_check(toy32, BBox(8.3, 9.1, 24.7, 25.9), step=1e-4)
    assert report.dice_max < 1e-3
    assert report.ciou_max < 1e-3
    assert report.log_pdf_max < 1e-3


def test_grad_check_zero_in_clamp_region(toy32):
    # At the tight box the CIoU loss is 0 < x_clamp: log-pdf side is flat.
    report = grad_check(toy32, toy32.tight, step=1e-6)
    assert report.log_pdf_max == 0.0


def test_relative_errors_flags_corrupted_gradient():
    analytic = np.array([1.0, 2.0, -1.0, 0.5])
    corrupted = analytic * 1.5
    assert np.max(relative_errors(corrupted, analytic)) > 0.1


def test_relative_errors_exact_zero_for_equal_vectors():
    v = np.array([0.0, 1.0, -2.0, 0.0])
    assert np.all(relative_errors(v, v.copy()) == 0.0)
