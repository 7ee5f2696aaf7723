"""Bounding-box prompt robustness evaluation toolkit."""

__version__ = "0.1.0"

from .geometry import BBox, CIoUBreakdown, ciou_grad, ciou_loss, clip_and_order, iou, tight_bbox
from .realism import (
    DEFAULT_REALISM,
    GammaRealismModel,
    StatTestResult,
    fit_gamma,
    jitter_baseline,
    ks_test_1d,
    log_pdf,
    log_pdf_grad_bbox,
    mala_sample,
    u_test,
)
from .segmodel import Instance, ModelEval, SoftMask, ToyModel, dice_loss, grad_check, make_instance, toy_predict
from .attack import AttackConfig, AttackResult, breps_attack, scaled_lr, sweep_lambda
from .oracle import Heatmap, exhaustive_centered, exhaustive_full, render_heatmap
from .metrics import RobustnessReport, UserSpreadReport, correlations, robustness_report, user_spread
from .data import UserAnnotation, downscale_longest, load_annotations, load_corpus, load_instance, make_toy_corpus
from .bridge import BridgeClient, BridgeEndpoint
