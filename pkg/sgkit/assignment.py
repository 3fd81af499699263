"""
Bipartite matching of predicted queries to ground-truth entities.

The cost of pairing prediction i with GT node j combines semantic similarity
(class score of the GT class) and spatial alignment (L1 + GIoU):

    cost[i][j] = -w_cls * score_i[class_j] + w_l1 * l1(box_i, box_j) + w_giou * (1 - giou(box_i, box_j))

The assignment itself is solved exactly by scipy's linear_sum_assignment.
"""

from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment

from sgkit.core import BoundingBox, EmbeddingMatrix, Node
from sgkit.errors import DimensionError, InvariantError
from sgkit.geometry import boxes_to_array, pairwise_giou, pairwise_l1
from sgkit.logger import get_logger

logger = get_logger(__name__)


class MatchWeights(BaseModel):
    """Cost weights; DETR-family defaults."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    w_cls: float = Field(default=2.0, ge=0.0)
    w_l1: float = Field(default=5.0, ge=0.0)
    w_giou: float = Field(default=2.0, ge=0.0)


class CostMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    data: np.ndarray

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])

    @classmethod
    def of(cls, values) -> 'CostMatrix':
        array = np.array(values, dtype=np.float64)
        if array.ndim == 1 and array.size == 0:
            array = array.reshape(0, 0)
        if array.ndim != 2:
            raise DimensionError(f"cost matrix must be 2-D, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise InvariantError("cost matrix has non-finite entries")
        array.setflags(write=False)
        return cls(data=array)


class Matching(BaseModel):
    model_config = ConfigDict(frozen=True)

    pairs: Tuple[Tuple[int, int], ...] = ()
    total_cost: float = 0.0

    def pred_to_gt(self) -> dict:
        return {p: g for p, g in self.pairs}

    def to_dict(self) -> dict:
        return {'pairs': [list(p) for p in self.pairs], 'total_cost': self.total_cost}


def build_cost(
    pred_boxes: Sequence[BoundingBox],
    pred_class_scores: EmbeddingMatrix,
    gt_nodes: Sequence[Node],
    weights: MatchWeights = MatchWeights(),
) -> CostMatrix:
    """
    Combined semantic + spatial matching cost between predictions and GT nodes.

    Args:
        pred_boxes: one box per prediction (query)
        pred_class_scores: predictions x vocabulary-size score matrix
        gt_nodes: ground-truth nodes (box + class)
        weights: (w_cls, w_l1, w_giou)

    Returns:
        CostMatrix with predictions as rows and GT nodes as columns
    """
    if pred_class_scores.rows != len(pred_boxes):
        raise DimensionError(
            f"{pred_class_scores.rows} score rows for {len(pred_boxes)} predicted boxes")
    for j, node in enumerate(gt_nodes):
        if node.class_id >= pred_class_scores.dim:
            raise DimensionError(
                f"GT node {j} has class {node.class_id} but score rows cover {pred_class_scores.dim} classes")

    if len(pred_boxes) == 0 or len(gt_nodes) == 0:
        return CostMatrix.of(np.zeros((len(pred_boxes), len(gt_nodes))))

    pred = boxes_to_array(pred_boxes)
    gt = boxes_to_array([n.box for n in gt_nodes])
    classes = [n.class_id for n in gt_nodes]

    cls_term = pred_class_scores.data[:, classes]
    cost = (-weights.w_cls * cls_term
            + weights.w_l1 * pairwise_l1(pred, gt)
            + weights.w_giou * (1.0 - pairwise_giou(pred, gt)))
    return CostMatrix.of(cost)


def hungarian(cost: CostMatrix) -> Matching:
    """
    Minimum-cost one-to-one assignment covering the smaller side.

    Empty matrices give an empty matching. Pairs are sorted by prediction index.
    """
    if cost.rows == 0 or cost.cols == 0:
        return Matching()
    row_ind, col_ind = linear_sum_assignment(cost.data)
    pairs: List[Tuple[int, int]] = sorted((int(r), int(c)) for r, c in zip(row_ind, col_ind))
    total = float(sum(cost.data[r, c] for r, c in pairs))
    return Matching(pairs=tuple(pairs), total_cost=total)


def match_image(
    pred_boxes: Sequence[BoundingBox],
    pred_class_scores: EmbeddingMatrix,
    gt_nodes: Sequence[Node],
    weights: MatchWeights = MatchWeights(),
) -> Matching:
    matching = hungarian(build_cost(pred_boxes, pred_class_scores, gt_nodes, weights))
    logger.debug(f"Matched {len(matching.pairs)} of {len(gt_nodes)} GT nodes, cost {matching.total_cost:.6f}")
    return matching
