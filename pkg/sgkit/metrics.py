"""
SGDET evaluation: triplet recall R@K and mean recall mR@K.

A GT triplet is recalled at K when one of the K best-scored predicted edges
has the same (subject class, relation, object class) and both of its boxes
overlap the GT boxes with IoU >= iou_threshold. Each prediction recalls at
most one GT triplet.

Results are reported per open-vocabulary split:

    all                 every GT triplet (Base + Novel)
    base                only base classes
    novel-object        a novel subject or object class, base relation
    novel-relation      a novel relation, base endpoints
    novel-both          a novel relation and a novel endpoint
    novel-object-any    novel-object or novel-both
    novel-relation-any  novel-relation or novel-both
"""

from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from sgkit.core import SceneGraph, SplitTag, Vocabulary, edge_triplet_score, split_report
from sgkit.errors import InvariantError
from sgkit.geometry import iou
from sgkit.logger import get_logger

logger = get_logger(__name__)

ALL_TAGS: FrozenSet[SplitTag] = frozenset(SplitTag)

SPLITS: Dict[str, FrozenSet[SplitTag]] = {
    'all': ALL_TAGS,
    'base': frozenset({SplitTag.BASE}),
    'novel-object': frozenset({SplitTag.NOVEL_OBJECT}),
    'novel-relation': frozenset({SplitTag.NOVEL_RELATION}),
    'novel-both': frozenset({SplitTag.NOVEL_BOTH}),
    'novel-object-any': frozenset({SplitTag.NOVEL_OBJECT, SplitTag.NOVEL_BOTH}),
    'novel-relation-any': frozenset({SplitTag.NOVEL_RELATION, SplitTag.NOVEL_BOTH}),
}

PROTOCOL_SPLITS: Dict[str, Tuple[str, ...]] = {
    'full': tuple(SPLITS),
    'ovr': ('all', 'novel-relation-any'),
    'ovdr': ('all', 'novel-object-any', 'novel-relation-any'),
}


class EvalConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    ks: Tuple[int, ...] = Field(default=(20, 50, 100), description="Recall cut-offs, ascending")
    iou_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    graph_constraint: bool = Field(default=False, description="Count one relation per ordered node pair")
    protocol: Literal['full', 'ovr', 'ovdr'] = 'full'

    @field_validator('ks')
    @classmethod
    def _ascending(cls, ks: Tuple[int, ...]) -> Tuple[int, ...]:
        if not ks:
            raise ValueError("at least one cut-off is required")
        if any(k < 1 for k in ks):
            raise ValueError("cut-offs must be positive")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError(f"cut-offs must be strictly ascending, got {list(ks)}")
        return ks


def ranked_edges(pred: SceneGraph, graph_constraint: bool = False) -> List[int]:
    """Predicted edge indices by descending triplet score, lower index first on ties."""
    scores = np.array([edge_triplet_score(pred, e) for e in range(len(pred.edges))], dtype=np.float64)
    order = [int(e) for e in np.argsort(-scores, kind='stable')]
    if not graph_constraint:
        return order
    seen = set()
    kept = []
    for e in order:
        pair = (pred.edges[e].sub, pred.edges[e].obj)
        if pair in seen:
            continue
        seen.add(pair)
        kept.append(e)
    return kept


def _edge_matches(pred: SceneGraph, p: int, gt: SceneGraph, g: int, threshold: float) -> bool:
    if pred.class_triple(p) != gt.class_triple(g):
        return False
    pe, ge = pred.edges[p], gt.edges[g]
    return (iou(pred.nodes[pe.sub].box, gt.nodes[ge.sub].box) >= threshold
            and iou(pred.nodes[pe.obj].box, gt.nodes[ge.obj].box) >= threshold)


def match_triplets(pred: SceneGraph, gt: SceneGraph, cfg: EvalConfig, K: int) -> FrozenSet[int]:
    """
    GT edge indices recalled by the top-K predicted edges.

    Predictions are visited best first; each consumes the lowest-index GT
    edge it matches that no earlier prediction consumed.
    """
    hits = set()
    for p in ranked_edges(pred, cfg.graph_constraint)[:K]:
        for g in range(len(gt.edges)):
            if g not in hits and _edge_matches(pred, p, gt, g, cfg.iou_threshold):
                hits.add(g)
                break
    return frozenset(hits)


class SplitReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = Field(ge=0, description="GT triplets in the split")
    hits: Dict[int, int] = Field(default_factory=dict)
    recall: Dict[int, Optional[float]] = Field(default_factory=dict)
    mean_recall: Dict[int, Optional[float]] = Field(default_factory=dict)
    per_class_recall: Dict[int, Dict[str, Optional[float]]] = Field(default_factory=dict)


class EvalReport(BaseModel):
    """Per-split R@K / mR@K plus GT counts."""
    model_config = ConfigDict(frozen=True)

    ks: Tuple[int, ...]
    splits: Dict[str, SplitReport]

    def recall(self, split: str, K: int) -> Optional[float]:
        return self.splits[split].recall[K]

    def mean_recall(self, split: str, K: int) -> Optional[float]:
        return self.splits[split].mean_recall[K]

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for name, rep in self.splits.items():
            section: Dict[str, object] = {}
            for K in self.ks:
                section[f"R@{K}"] = rep.recall[K]
                section[f"mR@{K}"] = rep.mean_recall[K]
                section[f"hits@{K}"] = rep.hits[K]
            section['per_class'] = {f"R@{K}": rep.per_class_recall[K] for K in self.ks}
            out[name] = section
        for K in self.ks:
            out[f"mR@{K}"] = self.splits['all'].mean_recall[K]
        out['counts'] = {name: rep.count for name, rep in self.splits.items()}
        return out


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def evaluate(preds: Sequence[SceneGraph], gts: Sequence[SceneGraph], vocab: Vocabulary,
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """
    R@K over all images per split, and mR@K as the mean per-relation-class
    recall over classes with at least one GT triplet in the split. Splits
    without GT triplets report None.
    """
    if len(preds) != len(gts):
        raise InvariantError(f"{len(preds)} prediction graph(s) for {len(gts)} GT graph(s)")

    # (tag, relation class, hit per K) for every GT triplet
    records: List[Tuple[SplitTag, int, Tuple[bool, ...]]] = []
    for image, (pred, gt) in enumerate(zip(preds, gts)):
        tags = split_report(gt, vocab)
        for e, edge in enumerate(pred.edges):
            if edge.rel >= vocab.num_relations:
                raise InvariantError(f"prediction {image} edge {e} has relation {edge.rel} outside vocabulary")
        hit_sets = [match_triplets(pred, gt, cfg, K) for K in cfg.ks]
        for g, edge in enumerate(gt.edges):
            records.append((tags[g], edge.rel, tuple(g in hits for hits in hit_sets)))
        logger.debug(f"Image {image}: {len(gt.edges)} GT triplet(s), hits {[len(h) for h in hit_sets]}")

    splits: Dict[str, SplitReport] = {}
    for name in PROTOCOL_SPLITS[cfg.protocol]:
        members = [r for r in records if r[0] in SPLITS[name]]
        hits: Dict[int, int] = {}
        recall: Dict[int, Optional[float]] = {}
        mean_recall: Dict[int, Optional[float]] = {}
        per_class: Dict[int, Dict[str, Optional[float]]] = {}
        for k_idx, K in enumerate(cfg.ks):
            hits[K] = sum(1 for r in members if r[2][k_idx])
            recall[K] = _ratio(hits[K], len(members))
            class_recall: Dict[str, Optional[float]] = {}
            for rel in range(vocab.num_relations):
                of_class = [r for r in members if r[1] == rel]
                if of_class:
                    class_recall[vocab.relation_classes[rel]] = _ratio(
                        sum(1 for r in of_class if r[2][k_idx]), len(of_class))
            per_class[K] = class_recall
            values = [v for v in class_recall.values() if v is not None]
            mean_recall[K] = sum(values) / len(values) if values else None
        splits[name] = SplitReport(count=len(members), hits=hits, recall=recall,
                                   mean_recall=mean_recall, per_class_recall=per_class)
    return EvalReport(ks=cfg.ks, splits=splits)
