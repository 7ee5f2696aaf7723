import math

import numpy as np
import pytest

from breps.attack import (
    Adam,
    AttackConfig,
    breps_attack,
    run_attacks,
    scaled_lr,
    sweep_lambda,
)
from breps.errors import AttackAbortedError, BrepsError, InvalidParameterError
from breps.data import make_toy_corpus
from breps.segmodel import ToyModel, make_instance


def square_instance(size=32, lo=10, hi=22, ident="atk"):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[lo:hi, lo:hi] = 1
    return make_instance(ident, mask)


@pytest.fixture(scope="module")
def corpus():
    return make_toy_corpus(8, 32, seed=3)


@pytest.fixture(scope="module")
def model(corpus):
    return ToyModel(corpus)


# --- config / lr ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        AttackConfig(mode="sideways")
    with pytest.raises(InvalidParameterError):
        AttackConfig(steps=0)
    with pytest.raises(InvalidParameterError):
        AttackConfig(lam=-0.1)
    with pytest.raises(InvalidParameterError):
        AttackConfig(base_lr=0.0)


def test_scaled_lr_reference_resolution_exact():
    assert scaled_lr(9.0, 1024, 1024) == 9.0


def test_scaled_lr_half_resolution_exact():
    assert scaled_lr(9.0, 512, 512) == 4.5


def test_scaled_lr_minimum_size():
    assert scaled_lr(9.0, 1, 1) == 9.0 / 1024.0


def test_scaled_lr_formula_against_direct_substitution():
    for w, h in ((640, 480), (100, 300), (2048, 2048)):
        expected = 9.0 * math.sqrt(w * w + h * h) / (1024.0 * math.sqrt(2.0))
        assert scaled_lr(9.0, w, h) == pytest.approx(expected, rel=1e-15)


# --- Adam --------------------------------------------------------------------


def test_adam_matches_scalar_reference():
    # Scalar reference implementation, written independently.
    grads = [
        np.array([1.0, -2.0, 0.5, 0.0]),
        np.array([0.3, 0.3, -0.1, 4.0]),
        np.array([-1.0, 0.0, 0.0, 1.0]),
        np.array([2.0, 2.0, 2.0, 2.0]),
        np.array([0.1, -0.1, 0.1, -0.1]),
    ]
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8

    params_ref = [0.0, 0.0, 0.0, 0.0]
    m = [0.0] * 4
    v = [0.0] * 4
    for t, g in enumerate(grads, start=1):
        for i in range(4):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            m_hat = m[i] / (1 - b1**t)
            v_hat = v[i] / (1 - b2**t)
            params_ref[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)

    adam = Adam(lr, b1, b2, eps)
    params = np.zeros(4)
    for g in grads:
        params = adam.step(params, g)
    np.testing.assert_allclose(params, params_ref, atol=1e-12, rtol=0)


# --- breps_attack ---------------------------------------------------------------


def test_trajectory_length_and_validity(model, corpus):
    inst = corpus[0]
    res = breps_attack(model, inst, AttackConfig(mode="min", steps=17))
    assert len(res.trajectory) == 18
    for p in res.trajectory:
        b = p.bbox
        assert b.is_ordered()
        assert 0 <= b.x1 and b.x2 <= inst.width
        assert 0 <= b.y1 and b.y2 <= inst.height
    assert res.final_bbox == res.trajectory[-1].bbox
    assert res.final_iou == res.trajectory[-1].iou


def test_attack_deterministic(model, corpus):
    inst = corpus[1]
    cfg = AttackConfig(mode="min", lam=0.1)
    a = breps_attack(model, inst, cfg)
    b = breps_attack(model, inst, cfg)
    assert len(a.trajectory) == len(b.trajectory)
    for pa, pb in zip(a.trajectory, b.trajectory):
        assert pa.bbox == pb.bbox
        assert pa.dice_loss == pb.dice_loss
        assert pa.iou == pb.iou
        assert pa.log_pdf == pb.log_pdf


def test_min_attack_does_not_beat_tight(model, corpus):
    for inst in corpus[:4]:
        res = breps_attack(model, inst, AttackConfig(mode="min", lam=0.0))
        tight_iou = model.eval(inst.image_id, inst.tight).iou
        assert res.final_iou <= tight_iou + 1e-12


def test_huge_lambda_pins_box_to_tight(model, corpus):
    inst = corpus[2]
    res = breps_attack(model, inst, AttackConfig(mode="min", lam=1e6))
    deviation = np.max(np.abs(res.final_bbox.as_array() - inst.tight.as_array()))
    assert deviation < 1.0


def test_first_min_step_does_not_reduce_dice():
    inst = square_instance()
    model = ToyModel([inst])
    res = breps_attack(model, inst, AttackConfig(mode="min", lam=0.0, steps=1))
    assert res.trajectory[1].dice_loss >= res.trajectory[0].dice_loss - 1e-12


def test_max_attack_with_zero_lambda_approaches_full_sweep_max():
    from breps.oracle import exhaustive_full

    inst = square_instance(size=24, lo=7, hi=17, ident="atk-max")
    model = ToyModel([inst])
    _, hi = exhaustive_full(model, inst, stride=1)
    res = breps_attack(model, inst, AttackConfig(mode="max", lam=0.0))
    assert res.final_iou >= hi.iou - 0.05


def test_best_iou_reads_trajectory_extreme(model, corpus):
    res = breps_attack(model, corpus[3], AttackConfig(mode="min", lam=0.0))
    assert res.best_iou == min(p.iou for p in res.trajectory)
    res = breps_attack(model, corpus[3], AttackConfig(mode="max", lam=0.0))
    assert res.best_iou == max(p.iou for p in res.trajectory)


class FlakyModel:
    """Fails on the n-th evaluation; for abort-path testing."""

    def __init__(self, inner, fail_at: int):
        self.inner = inner
        self.fail_at = fail_at
        self.count = 0

    def eval(self, image_id, bbox):
        self.count += 1
        if self.count >= self.fail_at:
            raise BrepsError("synthetic failure")
        return self.inner.eval(image_id, bbox)


def test_aborted_attack_carries_partial_trajectory(corpus):
    flaky = FlakyModel(ToyModel(corpus), fail_at=5)
    with pytest.raises(AttackAbortedError) as err:
        breps_attack(flaky, corpus[0], AttackConfig(mode="min"))
    assert len(err.value.trajectory) == 4


def test_attack_result_json_round_trip(model, corpus):
    import json

    res = breps_attack(model, corpus[0], AttackConfig(mode="max", steps=3))
    blob = json.dumps(res.to_json_dict())
    back = json.loads(blob)
    assert back["final_bbox"] == list(res.final_bbox.as_array())
    assert back["final_iou"] == res.final_iou
    assert len(back["trajectory"]) == 4
    assert back["config"]["lambda"] == res.config.lam


# --- run_attacks / workers -------------------------------------------------------


def test_run_attacks_preserves_order_and_matches_serial(model, corpus):
    cfg = AttackConfig(mode="min", lam=0.1, steps=10)
    serial = run_attacks(model, corpus, cfg, workers=1)
    parallel = run_attacks(model, corpus, cfg, workers=2)
    assert len(serial) == len(parallel) == len(corpus)
    for a, b in zip(serial, parallel):
        assert a is not None and b is not None
        for pa, pb in zip(a.trajectory, b.trajectory):
            assert pa.bbox == pb.bbox
            assert pa.dice_loss == pb.dice_loss


# --- sweep_lambda ------------------------------------------------------------------


def test_sweep_single_lambda_is_bit_identical_to_direct_attack(model, corpus):
    instances = corpus[:3]
    cfg = AttackConfig(steps=12)
    (row,) = sweep_lambda(model, instances, [0.1], cfg)
    deltas = []
    lps = []
    from dataclasses import replace

    for inst in instances:
        lo = breps_attack(model, inst, replace(cfg, mode="min", lam=0.1))
        hi = breps_attack(model, inst, replace(cfg, mode="max", lam=0.1))
        deltas.append(hi.final_iou - lo.final_iou)
        lps.extend([lo.final_log_pdf, hi.final_log_pdf])
    assert row.iou_delta == float(np.mean(deltas))
    assert row.log_pdf == float(np.mean(lps))


def test_sweep_lambda_trends(model, corpus):
    rows = sweep_lambda(model, corpus, [0.0, 0.1, 1.0], AttackConfig(steps=25))
    # unregularized attack is at least as strong as the lambda = 0.1 run
    assert rows[0].iou_delta >= rows[1].iou_delta - 1e-9
    # realism improves with lambda across the sweep
    assert rows[0].log_pdf < rows[-1].log_pdf


def test_sweep_rejects_empty_lambda_list(model, corpus):
    with pytest.raises(InvalidParameterError):
        sweep_lambda(model, corpus, [], AttackConfig())


def test_trajectory_always_contains_initial_point_for_best_iou(model, corpus):
    # with lambda = 0 in max mode the best-seen IoU can never drop below the
    # tight-box IoU: the initialization is part of the trajectory record
    for inst in corpus[:4]:
        res = breps_attack(model, inst, AttackConfig(mode="max", lam=0.0))
        assert res.best_iou >= res.trajectory[0].iou - 1e-6


def test_gradient_norm_diagnostic(model, corpus):
    res = breps_attack(model, corpus[0], AttackConfig(mode="min", lam=0.1, steps=30))
    changes = res.gradient_norm_changes()
    assert len(changes) == 29  # per-update transitions; final point has no grad
    assert all(c >= 0 for c in changes)
    import math as _math

    assert _math.isnan(res.trajectory[-1].grad_norm)
    blob = res.to_json_dict()
    assert blob["trajectory"][-1]["grad_norm"] is None
    assert blob["trajectory"][0]["grad_norm"] is not None
