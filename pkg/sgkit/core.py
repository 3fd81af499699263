"""
Core domain types for sgkit: boxes, vocabularies with base/novel splits,
embedding matrices, scene graphs and triplet candidates, plus the JSON fixture
format that every command reads and writes.

All types are immutable after construction. Real values are double precision.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sgkit.errors import DimensionError, FixtureError, InvariantError, describe_validation_error
from sgkit.logger import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


class BoundingBox(BaseModel):
    """Center-format box in unitless image fractions."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    cx: float = Field(ge=0.0, le=1.0, description="Box center x as a fraction of image width")
    cy: float = Field(ge=0.0, le=1.0, description="Box center y as a fraction of image height")
    w: float = Field(gt=0.0, le=1.0, description="Box width as a fraction of image width")
    h: float = Field(gt=0.0, le=1.0, description="Box height as a fraction of image height")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> 'BoundingBox':
        if len(values) != 4:
            raise ValueError(f"box needs 4 values [cx, cy, w, h], got {len(values)}")
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx=cx, cy=cy, w=w, h=h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> 'BoundingBox':
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    def to_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]

    def as_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    def corners(self) -> Tuple[float, float, float, float]:
        """(x1, y1, x2, y2)"""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h


def coerce_box(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        if len(value) != 4:
            raise ValueError(f"box needs 4 values [cx, cy, w, h], got {len(value)}")
        return {'cx': value[0], 'cy': value[1], 'w': value[2], 'h': value[3]}
    return value


def _check_unique(names: Sequence[str], what: str) -> None:
    seen = set()
    for idx, name in enumerate(names):
        if not name:
            raise ValueError(f"{what}[{idx}] is empty")
        if name in seen:
            raise ValueError(f"{what}[{idx}] duplicates name {name!r}")
        seen.add(name)


class Vocabulary(BaseModel):
    """Object and relation class names with their base (seen) subsets."""
    model_config = ConfigDict(frozen=True, extra='forbid', populate_by_name=True)

    object_classes: Tuple[str, ...] = Field(alias='objects')
    relation_classes: Tuple[str, ...] = Field(alias='relations')
    base_object_ids: Tuple[int, ...] = Field(alias='base_objects')
    base_relation_ids: Tuple[int, ...] = Field(alias='base_relations')

    @model_validator(mode='after')
    def _check(self) -> 'Vocabulary':
        _check_unique(self.object_classes, 'objects')
        _check_unique(self.relation_classes, 'relations')
        for name, ids, size in (('base_objects', self.base_object_ids, len(self.object_classes)),
                                ('base_relations', self.base_relation_ids, len(self.relation_classes))):
            if len(set(ids)) != len(ids):
                raise ValueError(f"{name} contains duplicate ids")
            for idx, class_id in enumerate(ids):
                if not 0 <= class_id < size:
                    raise ValueError(f"{name}[{idx}] = {class_id} outside [0, {size})")
        return self

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_relations(self) -> int:
        return len(self.relation_classes)

    @property
    def novel_object_ids(self) -> Tuple[int, ...]:
        base = set(self.base_object_ids)
        return tuple(i for i in range(self.num_objects) if i not in base)

    @property
    def novel_relation_ids(self) -> Tuple[int, ...]:
        base = set(self.base_relation_ids)
        return tuple(i for i in range(self.num_relations) if i not in base)

    def is_novel_object(self, class_id: int) -> bool:
        self._check_object(class_id)
        return class_id not in self.base_object_ids

    def is_novel_relation(self, class_id: int) -> bool:
        self._check_relation(class_id)
        return class_id not in self.base_relation_ids

    def object_id(self, name: str) -> int:
        return self.object_classes.index(name)

    def relation_id(self, name: str) -> int:
        return self.relation_classes.index(name)

    def _check_object(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_objects:
            raise InvariantError(f"object class id {class_id} outside [0, {self.num_objects})")

    def _check_relation(self, class_id: int) -> None:
        if not 0 <= class_id < self.num_relations:
            raise InvariantError(f"relation class id {class_id} outside [0, {self.num_relations})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'objects': list(self.object_classes),
            'relations': list(self.relation_classes),
            'base_objects': list(self.base_object_ids),
            'base_relations': list(self.base_relation_ids),
        }


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """
    Row-major rows x dim matrix of finite doubles.

    The wrapped array is a private read-only copy.
    """
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        array = np.array(self.data, dtype=np.float64, copy=True)
        if array.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-D, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise InvariantError("embedding matrix has non-finite entries")
        array.setflags(write=False)
        object.__setattr__(self, 'data', array)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], dim: Optional[int] = None) -> 'EmbeddingMatrix':
        if len(rows) == 0:
            if dim is None:
                raise DimensionError("cannot infer dim of an empty matrix")
            return cls(np.zeros((0, dim)))
        array = np.asarray(rows, dtype=np.float64)
        if dim is not None and (array.ndim != 2 or array.shape[1] != dim):
            raise DimensionError(f"rows do not have dim {dim}")
        return cls(array)

    @classmethod
    def empty(cls, dim: int) -> 'EmbeddingMatrix':
        return cls(np.zeros((0, dim)))

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def take(self, indices: Sequence[int]) -> 'EmbeddingMatrix':
        return EmbeddingMatrix(self.data[list(indices)].reshape(len(indices), self.dim))

    def to_dict(self) -> Dict[str, Any]:
        return {'dim': self.dim, 'rows': [[float(v) for v in row] for row in self.data]}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(rows={self.rows}, dim={self.dim})"


def require_same_dim(*matrices: EmbeddingMatrix) -> int:
    """Common dim of the given matrices; DimensionError when they disagree."""
    dims = {m.dim for m in matrices}
    if len(dims) != 1:
        raise DimensionError(f"embedding dims disagree: {sorted(dims)}")
    return dims.pop()


class Node(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid', populate_by_name=True)

    box: BoundingBox
    class_id: int = Field(alias='class', ge=0)
    score: float = Field(default=1.0, ge=0.0, le=1.0)

    @field_validator('box', mode='before')
    @classmethod
    def _box_from_list(cls, value: Any) -> Any:
        return coerce_box(value)

    def to_dict(self) -> Dict[str, Any]:
        return {'box': self.box.to_list(), 'class': self.class_id, 'score': self.score}


class Edge(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    sub: int = Field(ge=0, description="Subject node index")
    obj: int = Field(ge=0, description="Object node index")
    rel: int = Field(ge=0, description="Relation class id")
    score: float = Field(default=1.0, ge=0.0, le=1.0)

    def to_dict(self) -> Dict[str, Any]:
        return {'sub': self.sub, 'obj': self.obj, 'rel': self.rel, 'score': self.score}


class SceneGraph(BaseModel):
    """Nodes (box + class + score) and directed labelled edges."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    nodes: Tuple[Node, ...] = ()
    edges: Tuple[Edge, ...] = ()

    @model_validator(mode='after')
    def _check_edges(self) -> 'SceneGraph':
        n = len(self.nodes)
        for k, edge in enumerate(self.edges):
            if edge.sub >= n:
                raise ValueError(f"edges[{k}].subject (sub={edge.sub}) references a missing node; graph has {n} nodes")
            if edge.obj >= n:
                raise ValueError(f"edges[{k}].object (obj={edge.obj}) references a missing node; graph has {n} nodes")
            if edge.sub == edge.obj:
                raise ValueError(f"edges[{k}] is a self-relation on node {edge.sub}")
        return self

    def triplet_score(self, edge_idx: int) -> float:
        """Subject score x relation score x object score."""
        edge = self.edges[edge_idx]
        return self.nodes[edge.sub].score * edge.score * self.nodes[edge.obj].score

    def class_triple(self, edge_idx: int) -> Tuple[int, int, int]:
        edge = self.edges[edge_idx]
        return (self.nodes[edge.sub].class_id, edge.rel, self.nodes[edge.obj].class_id)

    def to_dict(self) -> Dict[str, Any]:
        return {'nodes': [n.to_dict() for n in self.nodes], 'edges': [e.to_dict() for e in self.edges]}


def edge_triplet_score(graph: SceneGraph, edge_idx: int) -> float:
    return graph.triplet_score(edge_idx)


class TripletCandidate(BaseModel):
    """A grounded <subject, predicate, object> used as pseudo supervision."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    subject_label: str = Field(min_length=1)
    relation_label: str = Field(min_length=1)
    object_label: str = Field(min_length=1)
    subject_box: BoundingBox
    object_box: BoundingBox
    confidence: float = Field(ge=0.0, le=1.0)

    @field_validator('subject_box', 'object_box', mode='before')
    @classmethod
    def _boxes_from_list(cls, value: Any) -> Any:
        return coerce_box(value)

    @property
    def labels(self) -> Tuple[str, str, str]:
        return (self.subject_label, self.relation_label, self.object_label)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'subject': self.subject_label,
            'predicate': self.relation_label,
            'object': self.object_label,
            'subject_box': self.subject_box.to_list(),
            'object_box': self.object_box.to_list(),
            'confidence': self.confidence,
        }


class SplitTag(str, Enum):
    BASE = 'base'
    NOVEL_OBJECT = 'novel-object'
    NOVEL_RELATION = 'novel-relation'
    NOVEL_BOTH = 'novel-both'


def split_report(graph: SceneGraph, vocab: Vocabulary) -> List[SplitTag]:
    """
    Tag every edge by the open-vocabulary split it belongs to.

    novel-object when the subject or object class is novel, novel-relation when
    the relation class is novel, novel-both when both hold, base otherwise.
    """
    tags = []
    for edge in graph.edges:
        novel_obj = (vocab.is_novel_object(graph.nodes[edge.sub].class_id)
                     or vocab.is_novel_object(graph.nodes[edge.obj].class_id))
        novel_rel = vocab.is_novel_relation(edge.rel)
        if novel_obj and novel_rel:
            tags.append(SplitTag.NOVEL_BOTH)
        elif novel_obj:
            tags.append(SplitTag.NOVEL_OBJECT)
        elif novel_rel:
            tags.append(SplitTag.NOVEL_RELATION)
        else:
            tags.append(SplitTag.BASE)
    return tags


# ---------------------------------------------------------------------------
# Fixture file format
# ---------------------------------------------------------------------------

class _EmbeddingEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')

    dim: int = Field(ge=1)
    rows: List[List[float]] = Field(default_factory=list)

    @model_validator(mode='after')
    def _check_rows(self) -> '_EmbeddingEntry':
        for idx, row in enumerate(self.rows):
            if len(row) != self.dim:
                raise ValueError(f"rows[{idx}] has {len(row)} values, expected dim {self.dim}")
        return self


class _FixtureFile(BaseModel):
    model_config = ConfigDict(extra='forbid')

    vocabulary: Vocabulary
    graphs: List[SceneGraph] = Field(default_factory=list)
    embeddings: Dict[str, _EmbeddingEntry] = Field(default_factory=dict)

    @model_validator(mode='after')
    def _check_class_ranges(self) -> '_FixtureFile':
        n_obj = self.vocabulary.num_objects
        n_rel = self.vocabulary.num_relations
        for gi, graph in enumerate(self.graphs):
            for ni, node in enumerate(graph.nodes):
                if node.class_id >= n_obj:
                    raise ValueError(f"graphs[{gi}].nodes[{ni}].class = {node.class_id} outside [0, {n_obj})")
            for ei, edge in enumerate(graph.edges):
                if edge.rel >= n_rel:
                    raise ValueError(f"graphs[{gi}].edges[{ei}].rel = {edge.rel} outside [0, {n_rel})")
        return self


class Fixture(NamedTuple):
    vocabulary: Vocabulary
    graphs: List[SceneGraph]
    embeddings: Dict[str, EmbeddingMatrix]


def read_json(path: PathLike) -> Any:
    """Parse a UTF-8 JSON file, raising FixtureError on a missing or broken file."""
    path = Path(path)
    if not path.is_file():
        raise FixtureError("file not found", path=str(path))
    try:
        with path.open('r', encoding='utf-8') as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FixtureError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}", path=str(path)) from e


def dumps_canonical(payload: Any) -> str:
    """Key-sorted, two-space indented JSON with a trailing newline."""
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json_atomic(path: PathLike, payload: Any) -> Path:
    """Write JSON through a temp file in the target directory and rename it in place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = dumps_canonical(payload)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.tmp', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'w', encoding='utf-8') as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def parse_fixture(raw: Any, source: Optional[str] = None) -> Fixture:
    """Validate an already-parsed fixture document."""
    try:
        parsed = _FixtureFile.model_validate(raw)
    except ValidationError as e:
        raise FixtureError(describe_validation_error(e), path=source) from e

    embeddings: Dict[str, EmbeddingMatrix] = {}
    for name, entry in parsed.embeddings.items():
        try:
            embeddings[name] = EmbeddingMatrix.from_rows(entry.rows, dim=entry.dim)
        except (DimensionError, InvariantError) as e:
            raise FixtureError(str(e), path=source, field=f"embeddings.{name}") from e
    return Fixture(parsed.vocabulary, list(parsed.graphs), embeddings)


def load_fixture(path: PathLike) -> Fixture:
    """
    Load and validate a JSON fixture file.

    Returns (vocabulary, graphs, embeddings). Any schema or invariant violation
    raises FixtureError naming the offending field.
    """
    raw = read_json(path)
    fixture = parse_fixture(raw, source=str(path))
    logger.debug(f"Loaded fixture {path}: {len(fixture.graphs)} graph(s), "
                 f"{len(fixture.embeddings)} embedding matrix(es)")
    return fixture


def fixture_to_dict(
    vocab: Vocabulary,
    graphs: Sequence[SceneGraph],
    embeddings: Optional[Dict[str, EmbeddingMatrix]] = None
) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        'vocabulary': vocab.to_dict(),
        'graphs': [g.to_dict() for g in graphs],
    }
    if embeddings:
        payload['embeddings'] = {name: m.to_dict() for name, m in embeddings.items()}
    return payload


def save_fixture(
    path: PathLike,
    vocab: Vocabulary,
    graphs: Sequence[SceneGraph],
    embeddings: Optional[Dict[str, EmbeddingMatrix]] = None
) -> Path:
    """Write a fixture atomically; load_fixture() of the result is the identity."""
    return write_json_atomic(path, fixture_to_dict(vocab, graphs, embeddings))
