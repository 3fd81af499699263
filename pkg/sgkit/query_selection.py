"""
Two-step interaction-guided query selection.

Step I scores every visual token by its relevance to the category prompt,

    s_i = (max_j v_i . t_o_j)^gamma * (max_k v_i . t_r_k)^(1 - gamma)

and keeps the top K. The stub model turns those queries into triplets, which
are decomposed into interaction pairs ("man riding", "riding horse").

Step II picks the L tokens most similar to any interaction pair, then fills
the remaining K - L slots with the best object-relevant tokens not already
taken. The final query set is the union of the two.
"""

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from sgkit.core import EmbeddingMatrix, TripletCandidate, require_same_dim
from sgkit.errors import InvariantError
from sgkit.logger import get_logger

logger = get_logger(__name__)

SIMILARITY_FLOOR = 1e-6


class SelectionConfig(BaseModel):
    """Query budget K, interaction budget L (default max(1, K // 2)) and gamma."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    K: int = Field(default=10, ge=1, description="Total number of selected queries")
    L: Optional[int] = Field(default=None, ge=1, description="Queries reserved for interaction tokens")
    gamma: float = Field(default=0.5, ge=0.0, le=1.0, description="Object vs relation balance")

    @model_validator(mode='after')
    def _check_budget(self) -> 'SelectionConfig':
        if self.L is not None and self.L > self.K:
            raise ValueError(f"L = {self.L} exceeds K = {self.K}")
        return self

    @property
    def interaction_budget(self) -> int:
        return self.L if self.L is not None else max(1, self.K // 2)


class SelectionResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    indices_interaction: Tuple[int, ...] = ()
    indices_missing: Tuple[int, ...] = ()
    indices_all: Tuple[int, ...] = ()
    scores: Tuple[float, ...] = Field(default=(), description="Score of each entry of indices_all")

    def to_dict(self) -> Dict[str, list]:
        return {
            'indices_interaction': list(self.indices_interaction),
            'indices_missing': list(self.indices_missing),
            'indices_all': list(self.indices_all),
            'scores': list(self.scores),
        }


class InteractionPromptSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    pairs: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)


def _max_similarity(V: EmbeddingMatrix, T: EmbeddingMatrix) -> np.ndarray:
    return (V.data @ T.data.T).max(axis=1)


def object_relevance(V: EmbeddingMatrix, T_o: EmbeddingMatrix) -> np.ndarray:
    """s_i^o = max_j v_i . t_o_j"""
    require_same_dim(V, T_o)
    if T_o.rows == 0:
        raise InvariantError("object class embeddings are empty")
    return _max_similarity(V, T_o)


def relevance_scores(V: EmbeddingMatrix, T_o: EmbeddingMatrix, T_r: EmbeddingMatrix, gamma: float) -> np.ndarray:
    """
    Category relevance of every visual token.

    The two max-similarities are clamped to SIMILARITY_FLOOR before powering.
    gamma = 1 reduces to the (clamped) object term, gamma = 0 to the relation term.
    """
    require_same_dim(V, T_o, T_r)
    if not 0.0 <= gamma <= 1.0:
        raise InvariantError(f"gamma = {gamma} outside [0, 1]")
    if T_o.rows == 0 or T_r.rows == 0:
        raise InvariantError("class embeddings are empty")
    obj = _max_similarity(V, T_o)
    rel = _max_similarity(V, T_r)
    clamped = int(np.sum(obj < SIMILARITY_FLOOR) + np.sum(rel < SIMILARITY_FLOOR))
    if clamped:
        logger.debug(f"Clamped {clamped} non-positive similarity value(s) to {SIMILARITY_FLOOR}")
    obj = np.maximum(obj, SIMILARITY_FLOOR)
    rel = np.maximum(rel, SIMILARITY_FLOOR)
    return np.power(obj, gamma) * np.power(rel, 1.0 - gamma)


def top_k(scores: Sequence[float], K: int) -> List[int]:
    """Indices of the K largest scores, best first; ties go to the lower index."""
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if K < 0 or K > values.shape[0]:
        raise InvariantError(f"cannot select K = {K} of {values.shape[0]} scores")
    order = np.argsort(-values, kind='stable')
    return [int(i) for i in order[:K]]


def decompose_triplets(triplets: Sequence[TripletCandidate]) -> InteractionPromptSet:
    """Each <s, p, o> yields "s p" and "p o"; duplicates keep their first position."""
    seen: Dict[str, None] = {}
    for t in triplets:
        seen.setdefault(f"{t.subject_label} {t.relation_label}", None)
        seen.setdefault(f"{t.relation_label} {t.object_label}", None)
    return InteractionPromptSet(pairs=tuple(seen))


def initial_select(V: EmbeddingMatrix, T_o: EmbeddingMatrix, T_r: EmbeddingMatrix,
                   cfg: SelectionConfig) -> SelectionResult:
    """Step I: top-K tokens by category relevance."""
    scores = relevance_scores(V, T_o, T_r, cfg.gamma)
    chosen = top_k(scores, cfg.K)
    return SelectionResult(
        indices_missing=tuple(chosen),
        indices_all=tuple(chosen),
        scores=tuple(float(scores[i]) for i in chosen),
    )


def object_only_select(V: EmbeddingMatrix, T_o: EmbeddingMatrix, K: int) -> SelectionResult:
    """Top-K tokens by object relevance alone (no interaction guidance)."""
    scores = object_relevance(V, T_o)
    chosen = top_k(scores, K)
    return SelectionResult(
        indices_missing=tuple(chosen),
        indices_all=tuple(chosen),
        scores=tuple(float(scores[i]) for i in chosen),
    )


def interaction_select(V: EmbeddingMatrix, T_in: EmbeddingMatrix, T_o: EmbeddingMatrix,
                       cfg: SelectionConfig) -> SelectionResult:
    """
    Step II selection.

    I_L^in: top-L tokens by s_i^in = max(v_i . T_in^T).
    I_{K-L}^o: top-(K - L) tokens by object relevance among the rest.
    indices_all lists I_L^in followed by I_{K-L}^o.

    An empty T_in falls back to object relevance for all K queries.
    """
    require_same_dim(V, T_in, T_o)
    if cfg.K > V.rows:
        raise InvariantError(f"K = {cfg.K} exceeds the {V.rows} available visual tokens")
    if T_in.rows == 0:
        logger.warning("Empty interaction prompt set, falling back to object relevance")
        return object_only_select(V, T_o, cfg.K)

    L = cfg.interaction_budget
    s_in = _max_similarity(V, T_in)
    interaction = top_k(s_in, L)

    s_obj = object_relevance(V, T_o)
    taken = set(interaction)
    rest = [i for i in range(V.rows) if i not in taken]
    missing = [rest[j] for j in top_k(s_obj[rest], cfg.K - L)]

    scores = [float(s_in[i]) for i in interaction] + [float(s_obj[i]) for i in missing]
    return SelectionResult(
        indices_interaction=tuple(interaction),
        indices_missing=tuple(missing),
        indices_all=tuple(interaction + missing),
        scores=tuple(scores),
    )


class QueryAllocation(NamedTuple):
    interacting: int
    non_interacting: int
    background: int

    def to_dict(self) -> Dict[str, int]:
        return self._asdict()


def query_allocation(indices: Sequence[int], token_owner: Sequence[int],
                     interacting_nodes: Sequence[int]) -> QueryAllocation:
    """
    Where the selected queries land: on interacting instances, on other
    instances (distractors), or on background tokens (owner -1).
    """
    interacting = set(interacting_nodes)
    counts = [0, 0, 0]
    for i in indices:
        if not 0 <= i < len(token_owner):
            raise InvariantError(f"query index {i} outside [0, {len(token_owner)})")
        owner = token_owner[i]
        if owner < 0:
            counts[2] += 1
        elif owner in interacting:
            counts[0] += 1
        else:
            counts[1] += 1
    return QueryAllocation(*counts)
