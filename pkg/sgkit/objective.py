"""
Combined fine-tuning objective on toy images, minimised by gradient descent.

Each toy image has a few GT nodes joined by a chain of relations. The
"student" parameters are plain arrays, one set per image:

    boxes      (Q, 4)          query boxes, center format
    entity     (Q, C_o)        object-class logits per query
    relation   (P, C_r)        relation logits per ordered query pair
    edges      (P, d)          edge features per ordered query pair

where P = Q * (Q - 1). A frozen teacher provides the edge features that the
distillation terms retain on negative pairs (pairs with no GT relation).

Every step re-matches queries to GT nodes with the Hungarian solver, then
takes one plain gradient step on the sum of

    reg + giou + obj + rel + beta1 * vrd + beta2 * rrd

The demo passes when the mean loss over images drops by at least
min_reduction of its initial value.
"""

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from sgkit.assignment import Matching, MatchWeights, match_image
from sgkit.core import BoundingBox, EmbeddingMatrix, Node
from sgkit.distillation import DistillConfig, EdgeFeatureSet, LossParts, rrd_loss, total_loss, vrd_loss
from sgkit.logger import get_logger
from sgkit.losses import LossConfig, bce_relation_loss, box_regression_loss, focal_loss
from sgkit.scene_model import EdgeCombiner, GlobalRelationEmbedding, edge_features

logger = get_logger(__name__)

MIN_BOX_SIZE = 0.01


class DescentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int = Field(default=0, ge=0)
    n_images: int = Field(default=5, ge=1)
    num_queries: int = Field(default=6, ge=2)
    num_gt: int = Field(default=3, ge=2)
    num_objects: int = Field(default=8, ge=1)
    num_relations: int = Field(default=6, ge=1)
    dim: int = Field(default=8, ge=2)
    steps: int = Field(default=200, ge=1)
    lr_box: float = Field(default=0.002, gt=0.0)
    lr_entity: float = Field(default=10.0, gt=0.0)
    lr_relation: float = Field(default=100.0, gt=0.0)
    lr_edge: float = Field(default=0.05, gt=0.0)
    box_noise: float = Field(default=0.02, ge=0.0, description="Std of the initial offset of matched query boxes")
    edge_noise: float = Field(default=0.05, ge=0.0, description="Std of the initial student edge-feature offset")
    min_reduction: float = Field(default=0.5, ge=0.0, le=1.0)

    @model_validator(mode='after')
    def _check_queries(self) -> 'DescentConfig':
        if self.num_gt > self.num_queries:
            raise ValueError(f"num_gt ({self.num_gt}) cannot exceed num_queries ({self.num_queries})")
        return self


class ToyImage(NamedTuple):
    gt_nodes: List[Node]
    gt_edges: List[Tuple[int, int, int]]
    teacher_edges: np.ndarray


@dataclass
class StudentParams:
    boxes: np.ndarray
    entity: np.ndarray
    relation: np.ndarray
    edges: np.ndarray


class ParamGrads(NamedTuple):
    boxes: np.ndarray
    entity: np.ndarray
    relation: np.ndarray
    edges: np.ndarray


class ObjectiveResult(NamedTuple):
    parts: LossParts
    total: float
    grads: ParamGrads


class DescentResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    initial_loss: float
    final_loss: float
    reduction: float
    curve: List[float]
    initial_parts: Dict[str, float]
    final_parts: Dict[str, float]

    def to_dict(self) -> Dict[str, object]:
        return self.model_dump()


def query_pairs(num_queries: int) -> List[Tuple[int, int]]:
    return [(a, b) for a in range(num_queries) for b in range(num_queries) if a != b]


def _random_box(rng: np.random.Generator) -> np.ndarray:
    w, h = rng.uniform(0.15, 0.35, size=2)
    return np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])


def clip_boxes(boxes: np.ndarray) -> np.ndarray:
    out = boxes.copy()
    out[:, :2] = np.clip(out[:, :2], 0.0, 1.0)
    out[:, 2:] = np.clip(out[:, 2:], MIN_BOX_SIZE, 1.0)
    return out


def make_image(cfg: DescentConfig, rng: np.random.Generator) -> Tuple[ToyImage, StudentParams]:
    """A toy image and a student initialised near, not at, its optimum."""
    Q = cfg.num_queries
    gt_nodes = [Node(box=BoundingBox.from_list(_random_box(rng)), class_id=int(rng.integers(cfg.num_objects)))
                for _ in range(cfg.num_gt)]
    gt_edges = [(k, k + 1, int(rng.integers(cfg.num_relations))) for k in range(cfg.num_gt - 1)]

    pairs = query_pairs(Q)
    combiner = EdgeCombiner.from_seed(cfg.dim, seed=int(rng.integers(2 ** 31)))
    e_rln = GlobalRelationEmbedding.from_seed(cfg.dim, seed=int(rng.integers(2 ** 31)))
    node_embeddings = rng.standard_normal((Q, cfg.dim))
    node_embeddings /= np.linalg.norm(node_embeddings, axis=1, keepdims=True)
    teacher = edge_features(combiner, e_rln, EmbeddingMatrix(node_embeddings), pairs).data

    boxes = np.stack([_random_box(rng) for _ in range(Q)])
    owners = rng.permutation(Q)[:cfg.num_gt]
    for g, q in enumerate(owners):
        boxes[q] = gt_nodes[g].box.as_array() + cfg.box_noise * rng.standard_normal(4)

    params = StudentParams(
        boxes=clip_boxes(boxes),
        entity=rng.standard_normal((Q, cfg.num_objects)),
        relation=rng.standard_normal((len(pairs), cfg.num_relations)),
        edges=teacher + cfg.edge_noise * rng.standard_normal(teacher.shape),
    )
    return ToyImage(gt_nodes, gt_edges, teacher), params


def match_queries(params: StudentParams, image: ToyImage, weights: MatchWeights = MatchWeights()) -> Matching:
    boxes = [BoundingBox.from_list(b) for b in params.boxes]
    return match_image(boxes, EmbeddingMatrix(expit(params.entity)), image.gt_nodes, weights)


def image_objective(
    params: StudentParams,
    image: ToyImage,
    matching: Matching,
    loss_cfg: LossConfig = LossConfig(),
    distill_cfg: DistillConfig = DistillConfig(),
) -> ObjectiveResult:
    """Loss parts, weighted total and gradients for one image at a fixed matching."""
    Q = params.boxes.shape[0]
    pairs = query_pairs(Q)
    assigned = matching.pred_to_gt()

    d_boxes = np.zeros_like(params.boxes)
    reg = giou = 0.0
    if assigned:
        for q, g in assigned.items():
            box = box_regression_loss(params.boxes[q], image.gt_nodes[g].box)
            reg += box.l1_loss / len(assigned)
            giou += box.giou_loss / len(assigned)
            d_boxes[q] = (box.l1_grad + box.giou_grad) / len(assigned)

    d_entity = np.zeros_like(params.entity)
    obj = 0.0
    for q in range(Q):
        target = image.gt_nodes[assigned[q]].class_id if q in assigned else None
        loss, grad = focal_loss(params.entity[q], target, loss_cfg)
        obj += loss / Q
        d_entity[q] = grad / Q

    relations_between: Dict[Tuple[int, int], set] = {}
    for s, o, r in image.gt_edges:
        relations_between.setdefault((s, o), set()).add(r)

    d_relation = np.zeros_like(params.relation)
    rel = 0.0
    negative_mask = []
    num_relations = params.relation.shape[1]
    for k, (a, b) in enumerate(pairs):
        positives = set()
        if a in assigned and b in assigned:
            positives = relations_between.get((assigned[a], assigned[b]), set())
        targets = [r in positives for r in range(num_relations)]
        loss, grad = bce_relation_loss(params.relation[k], targets)
        rel += loss / len(pairs)
        d_relation[k] = grad / len(pairs)
        negative_mask.append(not positives)

    student = EdgeFeatureSet.of(params.edges, negative_mask)
    teacher = EdgeFeatureSet.of(image.teacher_edges, negative_mask)
    vrd, d_vrd = vrd_loss(student, teacher)
    rrd, d_rrd = rrd_loss(student, teacher)

    parts = LossParts(reg=reg, giou=giou, obj=obj, rel=rel, vrd=vrd, rrd=rrd)
    grads = ParamGrads(
        boxes=d_boxes,
        entity=d_entity,
        relation=d_relation,
        edges=distill_cfg.beta1 * d_vrd + distill_cfg.beta2 * d_rrd,
    )
    return ObjectiveResult(parts, total_loss(parts, distill_cfg), grads)


def _mean_parts(parts: List[LossParts]) -> Dict[str, float]:
    return {name: float(np.mean([getattr(p, name) for p in parts])) for name in LossParts.model_fields}


def descend(
    cfg: DescentConfig = DescentConfig(),
    loss_cfg: LossConfig = LossConfig(),
    distill_cfg: DistillConfig = DistillConfig(),
    weights: MatchWeights = MatchWeights(),
) -> DescentResult:
    """
    Plain gradient descent over cfg.n_images toy images.

    The curve holds the mean total loss over images before each step and
    after the last one (cfg.steps + 1 values).
    """
    rng = np.random.default_rng(cfg.seed)
    problems = [make_image(cfg, rng) for _ in range(cfg.n_images)]

    curve: List[float] = []
    first_parts: List[LossParts] = []
    last_parts: List[LossParts] = []
    for step in range(cfg.steps + 1):
        totals = []
        step_parts = []
        for image, params in problems:
            result = image_objective(params, image, match_queries(params, image, weights), loss_cfg, distill_cfg)
            totals.append(result.total)
            step_parts.append(result.parts)
            if step < cfg.steps:
                params.boxes = clip_boxes(params.boxes - cfg.lr_box * result.grads.boxes)
                params.entity = params.entity - cfg.lr_entity * result.grads.entity
                params.relation = params.relation - cfg.lr_relation * result.grads.relation
                params.edges = params.edges - cfg.lr_edge * result.grads.edges
        curve.append(float(np.mean(totals)))
        if step == 0:
            first_parts = step_parts
        last_parts = step_parts
        if step % 50 == 0:
            logger.debug(f"Step {step}: loss {curve[-1]:.6f}")

    initial, final = curve[0], curve[-1]
    reduction = 1.0 - final / initial if initial > 0 else 0.0
    logger.info(f"Descent: {initial:.4f} -> {final:.4f} ({reduction:.1%} reduction) over {cfg.steps} steps")
    return DescentResult(initial_loss=initial, final_loss=final, reduction=reduction, curve=curve,
                         initial_parts=_mean_parts(first_parts), final_parts=_mean_parts(last_parts))
