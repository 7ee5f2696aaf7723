"""Robustness and user-study metrics.

Reports follow the Tight/Min/Max/Delta column layout: IoU at the tight
prompt, IoU at the worst/best adversarial prompts, and their difference as
the robustness score. User-spread rows aggregate per-user IoUs with
population standard deviations (the user set is the whole population).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attack import AttackConfig, run_attacks
from .errors import InsufficientDataError, UndefinedCorrelationError
from .geometry import clip_and_order
from .realism import DEFAULT_REALISM, GammaRealismModel, _average_ranks
from .segmodel import Instance


@dataclass(frozen=True)
class RobustnessRow:
    image_id: str
    iou_tight: float
    iou_min: float
    iou_max: float
    iou_delta: float


@dataclass(frozen=True)
class RobustnessReport:
    rows: tuple[RobustnessRow, ...]
    mean_iou_tight: float
    mean_iou_min: float
    mean_iou_max: float
    mean_iou_delta: float
    n_failed: int


def robustness_report(
    model,
    instances: Sequence[Instance],
    attack_cfg: AttackConfig,
    realism: GammaRealismModel = DEFAULT_REALISM,
    workers: int = 1,
) -> RobustnessReport:
    """Tight/Min/Max/Delta per instance plus unweighted means.

    Instances whose attack aborts are excluded from the rows and counted in
    n_failed.
    """
    if len(instances) == 0:
        raise InsufficientDataError("need at least one instance")
    mins = run_attacks(model, instances, replace(attack_cfg, mode="min"), realism, workers)
    maxs = run_attacks(model, instances, replace(attack_cfg, mode="max"), realism, workers)
    rows = []
    n_failed = 0
    for inst, lo, hi in zip(instances, mins, maxs):
        if lo is None or hi is None:
            n_failed += 1
            continue
        tight_iou = model.eval(inst.image_id, inst.tight).iou
        rows.append(
            RobustnessRow(
                image_id=inst.image_id,
                iou_tight=tight_iou,
                iou_min=lo.final_iou,
                iou_max=hi.final_iou,
                iou_delta=hi.final_iou - lo.final_iou,
            )
        )
    def mean(vals):
        return float(np.mean(vals)) if vals else math.nan

    return RobustnessReport(
        rows=tuple(rows),
        mean_iou_tight=mean([r.iou_tight for r in rows]),
        mean_iou_min=mean([r.iou_min for r in rows]),
        mean_iou_max=mean([r.iou_max for r in rows]),
        mean_iou_delta=mean([r.iou_delta for r in rows]),
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class DeviceStats:
    mean: float
    std: float | None
    n: int


@dataclass(frozen=True)
class UserSpreadRow:
    image_id: str
    ious: tuple[float, ...]
    mean: float
    std: float | None  # population std; absent with fewer than 2 users
    per_device: dict


@dataclass(frozen=True)
class UserSpreadReport:
    rows: tuple[UserSpreadRow, ...]
    mean_iou: float
    mean_std: float | None
    per_device: dict


def user_spread(model, inst: Instance, annotations) -> UserSpreadRow:
    """Model IoU per user box (clipped first), with population spread."""
    if len(annotations) == 0:
        raise InsufficientDataError(f"no annotations for {inst.image_id}")
    ious = []
    by_device: dict[str, list[float]] = {}
    for ann in annotations:
        box = clip_and_order(ann.bbox, inst.width, inst.height)
        iou = model.eval(inst.image_id, box).iou
        ious.append(iou)
        by_device.setdefault(ann.device, []).append(iou)
    arr = np.asarray(ious)
    per_device = {
        dev: DeviceStats(
            mean=float(np.mean(vals)),
            std=float(np.std(vals)) if len(vals) >= 2 else None,
            n=len(vals),
        )
        for dev, vals in sorted(by_device.items())
    }
    return UserSpreadRow(
        image_id=inst.image_id,
        ious=tuple(ious),
        mean=float(arr.mean()),
        std=float(arr.std()) if arr.size >= 2 else None,
        per_device=per_device,
    )


def user_spread_report(model, instances: Sequence[Instance], annotations) -> UserSpreadReport:
    """Per-instance spread rows plus dataset-level aggregates."""
    by_image: dict[str, list] = {}
    for ann in annotations:
        by_image.setdefault(ann.image_id, []).append(ann)
    rows = []
    for inst in instances:
        anns = by_image.get(inst.image_id)
        if not anns:
            continue
        rows.append(user_spread(model, inst, anns))
    if not rows:
        raise InsufficientDataError("no instance has annotations")

    stds = [r.std for r in rows if r.std is not None]
    devices = sorted({dev for r in rows for dev in r.per_device})
    per_device = {}
    for dev in devices:
        means = [r.per_device[dev].mean for r in rows if dev in r.per_device]
        dev_stds = [
            r.per_device[dev].std
            for r in rows
            if dev in r.per_device and r.per_device[dev].std is not None
        ]
        per_device[dev] = DeviceStats(
            mean=float(np.mean(means)),
            std=float(np.mean(dev_stds)) if dev_stds else None,
            n=sum(r.per_device[dev].n for r in rows if dev in r.per_device),
        )
    return UserSpreadReport(
        rows=tuple(rows),
        mean_iou=float(np.mean([r.mean for r in rows])),
        mean_std=float(np.mean(stds)) if stds else None,
        per_device=per_device,
    )


def correlations(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """(Spearman, Pearson) correlation; Spearman is Pearson on average ranks."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise InsufficientDataError("samples must be 1-D and equally long")
    if xa.size < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {xa.size}")
    pearson = _pearson(xa, ya)
    spearman = _pearson(_average_ranks(xa), _average_ranks(ya))
    return spearman, pearson


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance in one of the variables")
    return float((xc * yc).sum() / (sx * sy))
