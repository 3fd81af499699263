"""
Box algebra: IoU, GIoU, format conversions and the pairwise box-cost terms
shared by matching, target generation and evaluation.

Scalar functions take BoundingBox values and are the reference definitions.
The pairwise_* functions are vectorised over (N, 4) center-format arrays and
must agree with the scalar ones cell by cell.
"""

from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from sgkit.core import BoundingBox

HULL_EPS = 1e-12


class BoxPairCost(BaseModel):
    model_config = ConfigDict(frozen=True)

    l1: float = Field(ge=0.0, description="Mean absolute center-format coordinate difference")
    giou_cost: float = Field(ge=0.0, le=2.0, description="1 - GIoU")


def _overlap(a: BoundingBox, b: BoundingBox) -> Tuple[float, float, float]:
    """(intersection, union, hull) areas computed from corners."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in [0, 1]; zero-area pairs are 1 only when identical."""
    inter, union, _ = _overlap(a, b)
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU in [-1, 1]: IoU - (hull - union) / hull."""
    inter, union, hull = _overlap(a, b)
    if union <= 0.0:
        base = 1.0 if a == b else 0.0
    else:
        base = inter / union
    slack = max(0.0, hull - union)
    return max(-1.0, base - slack / max(hull, HULL_EPS))


def l1_distance(a: BoundingBox, b: BoundingBox) -> float:
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)) / 4.0


def box_pair_cost(pred: BoundingBox, gt: BoundingBox) -> BoxPairCost:
    return BoxPairCost(
        l1=l1_distance(pred, gt),
        giou_cost=min(2.0, max(0.0, 1.0 - giou(pred, gt))),
    )


# ---------------------------------------------------------------------------
# Vectorised forms
# ---------------------------------------------------------------------------

def boxes_to_array(boxes) -> np.ndarray:
    """Stack BoundingBox values into an (N, 4) center-format array."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2.0
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([(boxes[:, :2] + boxes[:, 2:]) / 2.0, boxes[:, 2:] - boxes[:, :2]], axis=1)


def _pairwise_areas(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ca = cxcywh_to_xyxy(a)[:, None, :]
    cb = cxcywh_to_xyxy(b)[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    hull = ((np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0]))
            * (np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])))
    return inter, union, hull


def _degenerate_iou(a: np.ndarray, b: np.ndarray, union: np.ndarray) -> np.ndarray:
    identical = np.all(a[:, None, :] == b[None, :, :], axis=-1)
    return np.where(identical, 1.0, 0.0) * (union <= 0.0)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU matrix between two center-format box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, _ = _pairwise_areas(a, b)
    safe = np.where(union > 0.0, union, 1.0)
    return np.where(union > 0.0, inter / safe, _degenerate_iou(a, b, union))


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) GIoU matrix between two center-format box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter, union, hull = _pairwise_areas(a, b)
    safe = np.where(union > 0.0, union, 1.0)
    base = np.where(union > 0.0, inter / safe, _degenerate_iou(a, b, union))
    slack = np.clip(hull - union, 0.0, None)
    return np.maximum(-1.0, base - slack / np.maximum(hull, HULL_EPS))


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) mean absolute coordinate difference in center format."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).mean(axis=-1)
