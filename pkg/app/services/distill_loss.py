"""Supervised + distillation heatmap MSE and its gradient w.r.t. the prediction."""
import logging
import math
from dataclasses import dataclass

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigError
from app.models.schemas import LossReport

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = settings.DISTILL_ALPHA  # distillation weight

    def __post_init__(self):
        if not math.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")


def _check(*maps: np.ndarray) -> list[np.ndarray]:
    arrays = [np.asarray(m, dtype=np.float64) for m in maps]
    for i, a in enumerate(arrays[1:], start=1):
        if a.shape != arrays[0].shape:
            raise ConfigError(f"heatmap shape mismatch: argument {i} has {a.shape}, expected {arrays[0].shape}")
    if arrays[0].size == 0:
        raise ConfigError("heatmaps are empty")
    return arrays


def _keypoint_weights(weights, shape: tuple[int, ...]) -> np.ndarray | float:
    """Broadcast per-keypoint weights over the trailing (h, w) axes."""
    if weights is None:
        return 1.0
    w = np.asarray(weights, dtype=np.float64)
    k_axis = len(shape) - 3
    if k_axis < 0 or w.shape not in ((shape[k_axis],), tuple(shape[:k_axis + 1])):
        raise ConfigError(f"target weights shape {w.shape} does not match keypoint axis of {shape}")
    return w.reshape(w.shape + (1, 1))


def mse_heatmap_loss(pred, target, target_weights=None) -> float:
    """Mean over all elements of (w_k * (pred - target))**2; weights default to ones."""
    p, t = _check(pred, target)
    w = _keypoint_weights(target_weights, p.shape)
    return float(np.mean((w * (p - t)) ** 2))


def combined_loss(pred, gt, teacher, cfg: LossConfig = LossConfig(), target_weights=None) -> float:
    _check(pred, gt, teacher)
    return mse_heatmap_loss(pred, gt, target_weights) + cfg.alpha * mse_heatmap_loss(pred, teacher, target_weights)


def combined_loss_grad(pred, gt, teacher, cfg: LossConfig = LossConfig(), target_weights=None) -> np.ndarray:
    p, g, t = _check(pred, gt, teacher)
    w2 = np.asarray(_keypoint_weights(target_weights, p.shape)) ** 2
    n = p.size
    grad = (2.0 / n) * w2 * (p - g) + cfg.alpha * (2.0 / n) * w2 * (p - t)
    return grad.astype(np.float32)


def loss_report(pred, gt, teacher, cfg: LossConfig = LossConfig(), target_weights=None) -> LossReport:
    supervised = mse_heatmap_loss(pred, gt, target_weights)
    distillation = mse_heatmap_loss(pred, teacher, target_weights)
    report = LossReport(
        loss=supervised + cfg.alpha * distillation,
        supervised=supervised,
        distillation=distillation,
        alpha=cfg.alpha,
        num_elements=int(np.asarray(pred).size),
    )
    logger.info(f"Loss [alpha={cfg.alpha}] total={report.loss:.6g} supervised={supervised:.6g} distill={distillation:.6g}")
    return report
