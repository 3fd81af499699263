"""
Deterministic stand-in for the vision-language model.

- StubEncoder: seeded hash-to-Gaussian text embeddings (compositional over words)
- EdgeCombiner / GlobalRelationEmbedding: the two-layer edge-feature map
  e_ij = W2 tanh(W1 [e_rln; e_i; e_j] + b1) + b2
- classify: sigmoid(temperature * cosine) scores against class embeddings
- class_prompt / encode_class_prompt: "[CLS] man. horse. [SEP] riding. above."
- predict_triplets: pass-1 triplet guesses from selected visual tokens
- synth_visual_tokens: visual tokens for a synthetic scene graph

Nothing here is learned; every output is a pure function of its seed.
"""

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from sgkit.core import BoundingBox, EmbeddingMatrix, SceneGraph, TripletCandidate, Vocabulary, require_same_dim
from sgkit.errors import DimensionError, InvariantError
from sgkit.logger import get_logger

logger = get_logger(__name__)

DEFAULT_TEMPERATURE = 10.0
PHRASE_WEIGHT = 0.5
CLS_TOKEN = '[CLS]'
SEP_TOKEN = '[SEP]'
FULL_FRAME = BoundingBox(cx=0.5, cy=0.5, w=1.0, h=1.0)


def _normalize(vector: np.ndarray) -> np.ndarray:
    return vector / np.linalg.norm(vector)


class StubEncoder:
    """
    Seeded text embedding provider.

    A single word maps to a unit Gaussian vector drawn from an RNG seeded by a
    hash of (seed, word). A multi-word string maps to the normalised sum of its
    word vectors plus PHRASE_WEIGHT times the hash vector of the whole string,
    so word order still matters. Results are cached; the cache is guarded by a
    lock so one encoder can be shared between threads.
    """

    def __init__(self, seed: int = 0, dim: int = 64):
        if dim < 1:
            raise DimensionError(f"embedding dim must be positive, got {dim}")
        self.seed = seed
        self.dim = dim
        self._cache: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _hash_vector(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}:{text}".encode('utf-8'), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, 'little'))
        return _normalize(rng.standard_normal(self.dim))

    def embed(self, text: str) -> np.ndarray:
        words = text.split()
        if not words:
            raise InvariantError("cannot embed an empty string")
        key = ' '.join(words)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached

        if len(words) == 1:
            vector = self._hash_vector(key)
        else:
            total = sum(self._hash_vector(w) for w in words) + PHRASE_WEIGHT * self._hash_vector(key)
            vector = _normalize(total)
        vector.setflags(write=False)
        with self._lock:
            self._cache.setdefault(key, vector)
        return vector


def encode_tokens(encoder: StubEncoder, strings: Sequence[str]) -> EmbeddingMatrix:
    """One unit-norm row per string; identical inputs give identical matrices."""
    for idx, text in enumerate(strings):
        if not text or not text.strip():
            raise InvariantError(f"strings[{idx}] is empty")
    if len(strings) == 0:
        return EmbeddingMatrix.empty(encoder.dim)
    return EmbeddingMatrix(np.stack([encoder.embed(s) for s in strings]))


# ---------------------------------------------------------------------------
# Edge features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalRelationEmbedding:
    vector: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vector = np.array(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vector)):
            raise InvariantError("relation embedding has non-finite entries")
        vector.setflags(write=False)
        object.__setattr__(self, 'vector', vector)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    @classmethod
    def from_seed(cls, dim: int, seed: int = 0) -> 'GlobalRelationEmbedding':
        rng = np.random.default_rng(seed)
        return cls(_normalize(rng.standard_normal(dim)))


@dataclass(frozen=True)
class EdgeCombiner:
    """Weights of the 3d -> h -> d map; tanh keeps it smooth everywhere."""
    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        for name in ('w1', 'b1', 'w2', 'b2'):
            value = np.array(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(value)):
                raise InvariantError(f"combiner {name} has non-finite entries")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        hidden, in_dim = self.w1.shape
        if in_dim % 3 != 0 or self.b1.shape != (hidden,) or self.w2.shape[1] != hidden \
                or self.b2.shape != (self.w2.shape[0],):
            raise DimensionError("combiner weight shapes are inconsistent")

    @property
    def dim(self) -> int:
        return int(self.w2.shape[0])

    @property
    def hidden(self) -> int:
        return int(self.w1.shape[0])

    @classmethod
    def from_seed(cls, dim: int, seed: int = 0, hidden: Optional[int] = None) -> 'EdgeCombiner':
        """N(0, 1/fan_in) weights, small Gaussian biases; hidden defaults to 2 * dim."""
        hidden = hidden or 2 * dim
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(0.0, np.sqrt(1.0 / (3 * dim)), size=(hidden, 3 * dim)),
            b1=rng.normal(0.0, 0.1, size=hidden),
            w2=rng.normal(0.0, np.sqrt(1.0 / hidden), size=(dim, hidden)),
            b2=rng.normal(0.0, 0.1, size=dim),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: Optional[int] = None) -> 'EdgeCombiner':
        hidden = hidden or 2 * dim
        return cls(np.zeros((hidden, 3 * dim)), np.zeros(hidden), np.zeros((dim, hidden)), np.zeros(dim))


def _edge_input(combiner: EdgeCombiner, e_rln: GlobalRelationEmbedding,
                e_i: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    e_i = np.asarray(e_i, dtype=np.float64).reshape(-1)
    e_j = np.asarray(e_j, dtype=np.float64).reshape(-1)
    d = combiner.dim
    if e_rln.dim != d or e_i.shape[0] != d or e_j.shape[0] != d or combiner.w1.shape[1] != 3 * d:
        raise DimensionError(
            f"edge inputs have dims ({e_rln.dim}, {e_i.shape[0]}, {e_j.shape[0]}), combiner expects {d}")
    return np.concatenate([e_rln.vector, e_i, e_j])


def edge_feature(combiner: EdgeCombiner, e_rln: GlobalRelationEmbedding,
                 e_i: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    """e_ij = W2 tanh(W1 [e_rln; e_i; e_j] + b1) + b2; asymmetric in (i, j)."""
    x = _edge_input(combiner, e_rln, e_i, e_j)
    return combiner.w2 @ np.tanh(combiner.w1 @ x + combiner.b1) + combiner.b2


class EdgeFeatureGrads(NamedTuple):
    d_rln: np.ndarray
    d_i: np.ndarray
    d_j: np.ndarray


def edge_feature_backward(combiner: EdgeCombiner, e_rln: GlobalRelationEmbedding,
                          e_i: np.ndarray, e_j: np.ndarray, upstream: np.ndarray) -> EdgeFeatureGrads:
    """Gradients of <upstream, edge_feature(...)> with respect to e_rln, e_i and e_j."""
    x = _edge_input(combiner, e_rln, e_i, e_j)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.shape[0] != combiner.dim:
        raise DimensionError(f"upstream gradient has dim {upstream.shape[0]}, expected {combiner.dim}")
    hidden = np.tanh(combiner.w1 @ x + combiner.b1)
    d_pre = (combiner.w2.T @ upstream) * (1.0 - hidden ** 2)
    d_x = combiner.w1.T @ d_pre
    d = combiner.dim
    return EdgeFeatureGrads(d_x[:d], d_x[d:2 * d], d_x[2 * d:])


def edge_features(combiner: EdgeCombiner, e_rln: GlobalRelationEmbedding,
                  nodes: EmbeddingMatrix, pairs: Sequence[Tuple[int, int]]) -> EmbeddingMatrix:
    """Edge features for the ordered node pairs, one row per pair."""
    if len(pairs) == 0:
        return EmbeddingMatrix.empty(combiner.dim)
    rows = [edge_feature(combiner, e_rln, nodes.data[i], nodes.data[j]) for i, j in pairs]
    return EmbeddingMatrix(np.stack(rows))


# ---------------------------------------------------------------------------
# Classification and prompts
# ---------------------------------------------------------------------------

def cosine_matrix(features: EmbeddingMatrix, class_embeddings: EmbeddingMatrix) -> np.ndarray:
    require_same_dim(features, class_embeddings)
    f_norm = np.maximum(np.linalg.norm(features.data, axis=1, keepdims=True), 1e-12)
    c_norm = np.maximum(np.linalg.norm(class_embeddings.data, axis=1, keepdims=True), 1e-12)
    return (features.data / f_norm) @ (class_embeddings.data / c_norm).T


def classify(features: EmbeddingMatrix, class_embeddings: EmbeddingMatrix,
             temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """rows x classes matrix of sigmoid(temperature * cosine)."""
    return expit(temperature * cosine_matrix(features, class_embeddings))


def class_prompt(vocab: Vocabulary) -> str:
    """Category prompt such as "[CLS] man. horse. [SEP] riding. above."."""
    objects = ' '.join(f"{name}." for name in vocab.object_classes)
    relations = ' '.join(f"{name}." for name in vocab.relation_classes)
    return f"{CLS_TOKEN} {objects} {SEP_TOKEN} {relations}"


def split_class_prompt(prompt: str) -> Tuple[List[str], List[str]]:
    text = prompt.strip()
    if not text.startswith(CLS_TOKEN) or text.count(SEP_TOKEN) != 1:
        raise InvariantError(f"class prompt must look like '{CLS_TOKEN} a. b. {SEP_TOKEN} r.', got {prompt!r}")
    objects, relations = text[len(CLS_TOKEN):].split(SEP_TOKEN)

    def segments(part: str) -> List[str]:
        return [s.strip() for s in part.split('.') if s.strip()]

    return segments(objects), segments(relations)


def encode_class_prompt(encoder: StubEncoder, prompt: str) -> Tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """(T_o, T_r): one row per object segment and per relation segment."""
    objects, relations = split_class_prompt(prompt)
    return encode_tokens(encoder, objects), encode_tokens(encoder, relations)


def predict_triplets(
    V: EmbeddingMatrix,
    indices: Sequence[int],
    T_o: EmbeddingMatrix,
    T_r: EmbeddingMatrix,
    vocab: Vocabulary,
    max_triplets: int = 10,
    min_relation_similarity: float = 0.25,
    token_boxes: Optional[Sequence[BoundingBox]] = None,
    temperature: float = DEFAULT_TEMPERATURE,
) -> List[TripletCandidate]:
    """
    Pass-1 triplet guesses from the selected visual tokens.

    Every selected token is labelled with its arg-max object and relation
    class. Ordered token pairs that share a relation label, both with cosine
    similarity at or above `min_relation_similarity`, and carry different
    object labels become <object_i, relation, object_j> triplets scored by the
    product of the four classify() probabilities at `temperature`. Duplicate
    label triples keep their best score; the top `max_triplets` are returned,
    best first.
    """
    require_same_dim(V, T_o, T_r)
    if T_o.rows != vocab.num_objects or T_r.rows != vocab.num_relations:
        raise DimensionError(
            f"class embeddings have {T_o.rows}/{T_r.rows} rows, vocabulary has "
            f"{vocab.num_objects}/{vocab.num_relations} classes")
    if token_boxes is not None and len(token_boxes) != V.rows:
        raise DimensionError(f"{len(token_boxes)} token boxes for {V.rows} visual tokens")
    if len(indices) == 0:
        return []

    selected = V.take(indices)
    obj_sim = cosine_matrix(selected, T_o)
    rel_sim = cosine_matrix(selected, T_r)
    obj_label = np.argmax(obj_sim, axis=1)
    rel_label = np.argmax(rel_sim, axis=1)
    rel_best = rel_sim.max(axis=1)
    obj_prob = classify(selected, T_o, temperature).max(axis=1)
    rel_prob = classify(selected, T_r, temperature).max(axis=1)

    best: Dict[Tuple[int, int, int], Tuple[float, int, int]] = {}
    for a in range(len(indices)):
        if rel_best[a] < min_relation_similarity:
            continue
        for b in range(len(indices)):
            if a == b or rel_label[a] != rel_label[b] or obj_label[a] == obj_label[b]:
                continue
            if rel_best[b] < min_relation_similarity:
                continue
            key = (int(obj_label[a]), int(rel_label[a]), int(obj_label[b]))
            score = float(obj_prob[a] * rel_prob[a] * obj_prob[b] * rel_prob[b])
            if key not in best or score > best[key][0]:
                best[key] = (score, a, b)

    ranked = sorted(best.items(), key=lambda item: (-item[1][0], item[0]))[:max_triplets]
    out = []
    for (s, r, o), (score, a, b) in ranked:
        sub_box = token_boxes[indices[a]] if token_boxes is not None else FULL_FRAME
        obj_box = token_boxes[indices[b]] if token_boxes is not None else FULL_FRAME
        out.append(TripletCandidate(
            subject_label=vocab.object_classes[s],
            relation_label=vocab.relation_classes[r],
            object_label=vocab.object_classes[o],
            subject_box=sub_box,
            object_box=obj_box,
            confidence=score,
        ))
    logger.debug(f"Predicted {len(out)} triplet(s) from {len(indices)} selected token(s)")
    return out


# ---------------------------------------------------------------------------
# Synthetic visual tokens
# ---------------------------------------------------------------------------

class VisualTokens(NamedTuple):
    tokens: EmbeddingMatrix
    token_owner: List[int]


def synth_visual_tokens(
    graph: SceneGraph,
    T_o: EmbeddingMatrix,
    T_r: EmbeddingMatrix,
    tokens_per_node: int,
    background_tokens: int,
    noise: float,
    rng: np.random.Generator,
) -> VisualTokens:
    """
    Visual tokens for a scene graph.

    A node that takes part in an edge gets tokens normalize(class + its
    relations + noise); a node without edges gets normalize(class + noise);
    background tokens are pure noise. Node tokens come first in node order,
    then background; token_owner holds the node index or -1.
    """
    dim = require_same_dim(T_o, T_r)
    relation_sum = np.zeros((len(graph.nodes), dim))
    for edge in graph.edges:
        relation_sum[edge.sub] += T_r.data[edge.rel]
        relation_sum[edge.obj] += T_r.data[edge.rel]

    rows: List[np.ndarray] = []
    owner: List[int] = []
    for n, node in enumerate(graph.nodes):
        base = T_o.data[node.class_id] + relation_sum[n]
        for _ in range(tokens_per_node):
            rows.append(_normalize(base + noise * rng.standard_normal(dim)))
            owner.append(n)
    for _ in range(background_tokens):
        rows.append(_normalize(rng.standard_normal(dim)))
        owner.append(-1)

    if not rows:
        return VisualTokens(EmbeddingMatrix.empty(dim), [])
    return VisualTokens(EmbeddingMatrix(np.stack(rows)), owner)
