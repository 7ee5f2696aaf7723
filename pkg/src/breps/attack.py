"""Gradient attack in bounding-box prompt space.

One optimization run starts at the tight box and performs plain gradient
DESCENT with Adam on

    J(b) = s * DICE(model(b), gt) - lambda * logPDF(CIoU(b, tight))

with s = -1 in quality-minimizing mode (descending J maximizes the DICE
loss, i.e. degrades the mask) and s = +1 in quality-maximizing mode; both
modes ascend the realism log-density. Coordinates are clipped back into
the image after every update; Adam moments are not reset at clip events.
The reported adversarial box is the final one (the full trajectory is kept
so callers can also read off the best-seen box).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import AttackAbortedError, BrepsError, InvalidParameterError
from .geometry import BBox, ciou_loss, clip_and_order
from .realism import DEFAULT_REALISM, GammaRealismModel, log_pdf, log_pdf_grad_bbox
from .segmodel import Instance

MODES = ("min", "max")


@dataclass(frozen=True)
class AttackConfig:
    mode: str = "min"
    lam: float = 0.1
    steps: int = 50
    base_lr: float = 9.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0  # reserved for stochastic models; the toy model is exact

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise InvalidParameterError(f"steps must be >= 1, got {self.steps}")
        if self.lam < 0.0:
            raise InvalidParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.base_lr <= 0.0:
            raise InvalidParameterError(f"base_lr must be > 0, got {self.base_lr}")


@dataclass(eq=False)
class TrajectoryPoint:
    bbox: BBox
    dice_loss: float
    log_pdf: float
    iou: float
    grad_norm: float = math.nan  # |dJ/dbox| at this point (diagnostic only)


@dataclass(eq=False)
class AttackResult:
    final_bbox: BBox
    final_iou: float
    final_log_pdf: float
    trajectory: list[TrajectoryPoint]
    mode: str
    config: AttackConfig

    @property
    def best_iou(self) -> float:
        """Best-seen IoU along the trajectory (max in max mode, min in min)."""
        ious = [p.iou for p in self.trajectory]
        return max(ious) if self.mode == "max" else min(ious)

    def gradient_norm_changes(self) -> list[float]:
        """Relative step-to-step change of the objective gradient norm.

        Convergence diagnostic only (small late values suggest the step
        budget was enough); never used as a stopping rule.
        """
        norms = [p.grad_norm for p in self.trajectory if not math.isnan(p.grad_norm)]
        out = []
        for prev, cur in zip(norms, norms[1:]):
            out.append(abs(cur - prev) / prev if prev > 0 else math.inf)
        return out

    def to_json_dict(self) -> dict:
        return {
            "final_bbox": list(self.final_bbox.as_array()),
            "final_iou": self.final_iou,
            "final_log_pdf": self.final_log_pdf,
            "mode": self.mode,
            "config": {
                "mode": self.config.mode,
                "lambda": self.config.lam,
                "steps": self.config.steps,
                "base_lr": self.config.base_lr,
                "adam_beta1": self.config.adam_beta1,
                "adam_beta2": self.config.adam_beta2,
                "adam_eps": self.config.adam_eps,
                "seed": self.config.seed,
            },
            "trajectory": [
                {
                    "bbox": list(p.bbox.as_array()),
                    "dice_loss": p.dice_loss,
                    "log_pdf": p.log_pdf,
                    "iou": p.iou,
                    "grad_norm": None if math.isnan(p.grad_norm) else p.grad_norm,
                }
                for p in self.trajectory
            ],
        }


def scaled_lr(base_lr: float, width: float, height: float) -> float:
    """Learning rate rescaled from the 1024x1024 reference resolution:
    LR = base_lr * sqrt(H^2 + W^2) / (1024 * sqrt(2))."""
    if width < 1 or height < 1:
        raise InvalidParameterError(f"image sides must be >= 1, got {width}x{height}")
    ratio = math.sqrt(height * height + width * width) / (1024.0 * math.sqrt(2.0))
    return base_lr * ratio


class Adam:
    """Plain Adam with bias correction; operates on a 4-vector in place."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(4)
        self.v = np.zeros(4)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def breps_attack(
    model,
    inst: Instance,
    cfg: AttackConfig,
    realism: GammaRealismModel = DEFAULT_REALISM,
) -> AttackResult:
    """Run one min- or max-quality attack on an instance.

    Deterministic for a fixed (config, instance, model); the trajectory has
    steps + 1 points including the tight-box initialization.
    """
    sign = -1.0 if cfg.mode == "min" else 1.0
    tight = inst.tight
    width, height = inst.width, inst.height
    lr = scaled_lr(cfg.base_lr, width, height)
    adam = Adam(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    box = clip_and_order(tight, width, height)
    trajectory: list[TrajectoryPoint] = []

    def evaluate(b: BBox):
        try:
            ev = model.eval(inst.image_id, b)
        except (BrepsError, OSError) as exc:
            raise AttackAbortedError(
                f"model evaluation failed at step {len(trajectory)}: {exc}", trajectory
            ) from exc
        lp = log_pdf(realism, ciou_loss(b, tight).total)
        trajectory.append(TrajectoryPoint(bbox=b, dice_loss=ev.dice_loss, log_pdf=lp, iou=ev.iou))
        return ev

    def objective_grad(ev, b: BBox) -> np.ndarray:
        grad_j = sign * ev.grad - cfg.lam * log_pdf_grad_bbox(realism, b, tight)
        trajectory[-1].grad_norm = float(np.linalg.norm(grad_j))
        return grad_j

    ev = evaluate(box)
    params = box.as_array()
    for _ in range(cfg.steps):
        params = adam.step(params, objective_grad(ev, box))
        box = clip_and_order(BBox.from_array(params), width, height)
        params = box.as_array()
        ev = evaluate(box)

    last = trajectory[-1]
    return AttackResult(
        final_bbox=last.bbox,
        final_iou=last.iou,
        final_log_pdf=last.log_pdf,
        trajectory=trajectory,
        mode=cfg.mode,
        config=cfg,
    )


def _attack_worker(args):
    model, inst, cfg, realism = args
    try:
        return breps_attack(model, inst, cfg, realism)
    except AttackAbortedError:
        return None


def run_attacks(
    model,
    instances: Sequence[Instance],
    cfg: AttackConfig,
    realism: GammaRealismModel = DEFAULT_REALISM,
    workers: int = 1,
) -> list[AttackResult | None]:
    """Attack each instance independently; preserves input order.

    Failed attacks (aborted model evaluations) yield None entries. With
    workers > 1 the instances are distributed over a process pool; results
    are merged in input order, so the output is identical to a serial run.
    """
    jobs = [(model, inst, cfg, realism) for inst in instances]
    if workers <= 1 or len(jobs) <= 1:
        return [_attack_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_attack_worker, jobs))


@dataclass(frozen=True)
class LambdaSweepRow:
    lam: float
    iou_delta: float
    log_pdf: float


def sweep_lambda(
    model,
    instances: Sequence[Instance],
    lambdas: Sequence[float],
    cfg: AttackConfig,
    realism: GammaRealismModel = DEFAULT_REALISM,
    workers: int = 1,
) -> list[LambdaSweepRow]:
    """Run min+max attacks per lambda; aggregate the quality gap and realism.

    iou_delta is the mean over instances of (max-attack IoU - min-attack
    IoU); log_pdf is the mean final log-density over both attack runs.
    """
    if len(lambdas) == 0:
        raise InvalidParameterError("lambda list must be nonempty")
    rows = []
    for lam in lambdas:
        mins = run_attacks(model, instances, replace(cfg, mode="min", lam=lam), realism, workers)
        maxs = run_attacks(model, instances, replace(cfg, mode="max", lam=lam), realism, workers)
        deltas = []
        log_pdfs = []
        for lo, hi in zip(mins, maxs):
            if lo is None or hi is None:
                continue
            deltas.append(hi.final_iou - lo.final_iou)
            log_pdfs.append(lo.final_log_pdf)
            log_pdfs.append(hi.final_log_pdf)
        rows.append(
            LambdaSweepRow(
                lam=float(lam),
                iou_delta=float(np.mean(deltas)) if deltas else math.nan,
                log_pdf=float(np.mean(log_pdfs)) if log_pdfs else math.nan,
            )
        )
    return rows
