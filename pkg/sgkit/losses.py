"""
Supervised fine-tuning objectives with analytic gradients:

- focal_loss: per-class sigmoid focal loss for entity classification
- bce_relation_loss: multi-label binary cross-entropy for relation scores
- box_regression_loss: center-format L1 and GIoU losses for box regression

Every function returns the loss together with its gradient. Logits are clamped
to +/-LOGIT_CLAMP before exponentiation; the gradient is zero outside the clamp.
"""

from typing import Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from sgkit.core import BoundingBox
from sgkit.errors import DimensionError, InvariantError
from sgkit.geometry import HULL_EPS

LOGIT_CLAMP = 30.0

BoxLike = Union[BoundingBox, Sequence[float], np.ndarray]


class LossConfig(BaseModel):
    """Focal-loss hyperparameters and the reduction over classes."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    reduction: Literal['mean', 'sum'] = 'sum'


def _as_logits(values: Sequence[float], what: str) -> np.ndarray:
    z = np.asarray(values, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"{what} must be a 1-D vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvariantError(f"{what} has non-finite entries")
    return z


def focal_loss(
    logits: Sequence[float],
    target_class: Optional[int],
    cfg: LossConfig = LossConfig(),
) -> Tuple[float, np.ndarray]:
    """
    Sigmoid focal loss over classes.

    Positive class: -alpha * (1 - p)^gamma * log(p)
    Negative classes: -(1 - alpha) * p^gamma * log(1 - p)

    Args:
        logits: one logit per class
        target_class: index of the true class, or None for an unmatched query
            (every class is then a negative)
        cfg: alpha, gamma and reduction over classes

    Returns:
        (loss, gradient with respect to logits)
    """
    z = _as_logits(logits, 'logits')
    n = z.shape[0]
    if target_class is not None and not 0 <= target_class < n:
        raise InvariantError(f"target class {target_class} outside [0, {n})")

    in_range = (np.abs(z) <= LOGIT_CLAMP).astype(np.float64)
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    p = expit(zc)
    log_p = -np.logaddexp(0.0, -zc)
    log_1mp = -np.logaddexp(0.0, zc)

    alpha, gamma = cfg.focal_alpha, cfg.focal_gamma
    positive = np.zeros(n, dtype=bool)
    if target_class is not None:
        positive[target_class] = True

    pos_weight = (1.0 - p) ** gamma
    neg_weight = p ** gamma
    loss_pos = -alpha * pos_weight * log_p
    loss_neg = -(1.0 - alpha) * neg_weight * log_1mp
    grad_pos = alpha * pos_weight * (gamma * p * log_p - (1.0 - p))
    grad_neg = (1.0 - alpha) * neg_weight * (p - gamma * (1.0 - p) * log_1mp)

    per_class = np.where(positive, loss_pos, loss_neg)
    grad = np.where(positive, grad_pos, grad_neg) * in_range
    if cfg.reduction == 'mean' and n > 0:
        return float(per_class.sum() / n), grad / n
    return float(per_class.sum()), grad


def bce_relation_loss(scores: Sequence[float], targets: Sequence[bool]) -> Tuple[float, np.ndarray]:
    """
    Mean binary cross-entropy with logits over relation classes.

    Returns:
        (loss, gradient with respect to scores)
    """
    z = _as_logits(scores, 'scores')
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"{z.shape[0]} scores but {t.reshape(-1).shape[0]} targets")
    n = z.shape[0]
    if n == 0:
        return 0.0, np.zeros(0)

    in_range = (np.abs(z) <= LOGIT_CLAMP).astype(np.float64)
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    loss = np.logaddexp(0.0, zc) - t * zc
    grad = (expit(zc) - t) / n * in_range
    return float(loss.mean()), grad


class BoxRegressionLoss(NamedTuple):
    l1_loss: float
    giou_loss: float
    l1_grad: np.ndarray
    giou_grad: np.ndarray


def _box_params(box: BoxLike) -> np.ndarray:
    if isinstance(box, BoundingBox):
        return box.as_array()
    params = np.asarray(box, dtype=np.float64).reshape(-1)
    if params.shape != (4,):
        raise DimensionError(f"box needs 4 parameters (cx, cy, w, h), got {params.shape[0]}")
    return params


def giou_with_grad(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    GIoU of two center-format boxes and its gradient with respect to `pred`.

    At ties between a predicted and a GT edge the intersection and the hull
    both follow the predicted edge, so the gradient at pred == gt is zero.
    """
    cx, cy, w, h = pred
    a1, a2 = cx - w / 2.0, cx + w / 2.0
    b1, b2 = cy - h / 2.0, cy + h / 2.0
    g1, g2 = gt[0] - gt[2] / 2.0, gt[0] + gt[2] / 2.0
    k1, k2 = gt[1] - gt[3] / 2.0, gt[1] + gt[3] / 2.0

    # intersection
    d_ix1 = 1.0 if a1 >= g1 else 0.0
    d_ix2 = 1.0 if a2 <= g2 else 0.0
    d_iy1 = 1.0 if b1 >= k1 else 0.0
    d_iy2 = 1.0 if b2 <= k2 else 0.0
    iw_raw = min(a2, g2) - max(a1, g1)
    ih_raw = min(b2, k2) - max(b1, k1)
    iw, ih = max(0.0, iw_raw), max(0.0, ih_raw)
    act_w = 1.0 if iw_raw > 0.0 else 0.0
    act_h = 1.0 if ih_raw > 0.0 else 0.0
    inter = iw * ih
    d_inter = np.array([
        -act_w * d_ix1 * ih,
        act_w * d_ix2 * ih,
        -act_h * d_iy1 * iw,
        act_h * d_iy2 * iw,
    ])

    # areas
    pw, ph = a2 - a1, b2 - b1
    area_p = pw * ph
    area_g = (g2 - g1) * (k2 - k1)
    d_area = np.array([-ph, ph, -pw, pw])
    union = area_p + area_g - inter

    # enclosing hull
    d_cx1 = 1.0 if a1 <= g1 else 0.0
    d_cx2 = 1.0 if a2 >= g2 else 0.0
    d_cy1 = 1.0 if b1 <= k1 else 0.0
    d_cy2 = 1.0 if b2 >= k2 else 0.0
    cw = max(a2, g2) - min(a1, g1)
    ch = max(b2, k2) - min(b1, k1)
    hull = max(cw * ch, HULL_EPS)
    d_hull = np.array([-d_cx1 * ch, d_cx2 * ch, -d_cy1 * cw, d_cy2 * cw])

    value = inter / union - (hull - union) / hull
    d_corners = (d_inter / union
                 + (-inter / union ** 2 + 1.0 / hull) * (d_area - d_inter)
                 - (union / hull ** 2) * d_hull)

    # (a1, a2, b1, b2) -> (cx, cy, w, h)
    grad = np.array([
        d_corners[0] + d_corners[1],
        d_corners[2] + d_corners[3],
        (d_corners[1] - d_corners[0]) / 2.0,
        (d_corners[3] - d_corners[2]) / 2.0,
    ])
    return float(value), grad


def box_regression_loss(pred: BoxLike, gt: BoxLike) -> BoxRegressionLoss:
    """
    L1 (mean over the four center-format coordinates) and GIoU losses.

    Returns:
        BoxRegressionLoss(l1_loss, giou_loss, l1_grad, giou_grad); gradients are
        with respect to the predicted (cx, cy, w, h).
    """
    p = _box_params(pred)
    g = _box_params(gt)
    diff = p - g
    l1_loss = float(np.abs(diff).mean())
    l1_grad = np.sign(diff) / 4.0
    value, grad = giou_with_grad(p, g)
    return BoxRegressionLoss(l1_loss, 1.0 - value, l1_grad, -grad)
