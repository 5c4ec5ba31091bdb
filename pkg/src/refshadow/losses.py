"""Referring loss: weighted box terms (L1 + GIoU) plus mask terms (dice + focal).

Boxes are center-size normalized (cx, cy, w, h) in [0, 1]. Predictions are
Tensors so gradients flow; ground truth is plain numpy.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha_box: float = 1.0
    beta_mask: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_dice: float = 5.0
    lambda_focal: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_eps: float = 1.0

    def __post_init__(self):
        weights = (self.alpha_box, self.beta_mask, self.lambda_l1,
                   self.lambda_giou, self.lambda_dice, self.lambda_focal)
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be nonnegative")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be nonnegative")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be positive")


@dataclass
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ConfigError("box width/height must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _box4(x) -> Tensor:
    t = x if isinstance(x, Tensor) else as_tensor(np.asarray(x, dtype=np.float64))
    if t.data.shape != (4,):
        raise ShapeError(f"expected a 4-vector box, got {t.data.shape}")
    return t


def l1_box(pred, gt) -> Tensor:
    """Mean absolute coordinate difference."""
    p, g = _box4(pred), _box4(gt)
    return T.mean(T.abs_(p - g))


def _corners(b: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy = T.narrow(b, 0, 0, 1), T.narrow(b, 0, 1, 1)
    w, h = T.narrow(b, 0, 2, 1), T.narrow(b, 0, 3, 1)
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_loss(pred, gt) -> Tensor:
    """1 - GIoU; GIoU = IoU - |C \\ (A u B)| / |C| with C the enclosing box.

    When both boxes have zero area the loss is defined as 1 (IoU taken as 0,
    enclosing term 0); no gradient flows in that degenerate branch.
    """
    p, g = _box4(pred), _box4(gt)
    px1, py1, px2, py2 = _corners(p)
    gx1, gy1, gx2, gy2 = _corners(g)
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    if area_p.item() == 0.0 and area_g.item() == 0.0:
        return as_tensor(np.array([1.0]))
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = area_p + area_g - inter
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c_area = cw * ch
    giou = inter / union - (c_area - union) / c_area
    return 1.0 - giou


def dice_loss(pred_prob: Tensor, gt: np.ndarray, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    pred_prob = as_tensor(pred_prob)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_prob.data.shape != gt.shape:
        raise ShapeError(f"dice shapes {pred_prob.data.shape} vs {gt.shape}")
    num = 2.0 * T.sum_(pred_prob * gt) + eps
    den = T.sum_(pred_prob) + float(gt.sum()) + eps
    return 1.0 - num / den


def focal_loss(pred_logits: Tensor, gt: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t) over pixels."""
    pred_logits = as_tensor(pred_logits)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_logits.data.shape != gt.shape:
        raise ShapeError(f"focal shapes {pred_logits.data.shape} vs {gt.shape}")
    p = T.clip(T.sigmoid(pred_logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = p * gt + (1.0 - p) * (1.0 - gt)
    alpha_t = alpha * gt + (1.0 - alpha) * (1.0 - gt)  # plain numpy weights
    nll = -T.log(p_t)
    if gamma == 0.0:
        return T.mean(nll * alpha_t)
    return T.mean(T.power(1.0 - p_t, gamma) * nll * alpha_t)


def refer_loss(pred_box, gt_box, pred_mask_logits: Tensor, gt_mask: np.ndarray,
               cfg: LossConfig) -> Tensor:
    """Weighted sum of the four components for the matched query."""
    box_term = cfg.lambda_l1 * l1_box(pred_box, gt_box) \
        + cfg.lambda_giou * giou_loss(pred_box, gt_box)
    prob = T.sigmoid(pred_mask_logits)
    mask_term = cfg.lambda_dice * dice_loss(prob, gt_mask, cfg.dice_eps) \
        + cfg.lambda_focal * focal_loss(pred_mask_logits, gt_mask,
                                        cfg.focal_alpha, cfg.focal_gamma)
    return cfg.alpha_box * box_term + cfg.beta_mask * mask_term
