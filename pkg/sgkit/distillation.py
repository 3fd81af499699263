"""
Interaction-consistent knowledge distillation between a student and a teacher
set of edge features.

- vrd_loss: point-wise L1 retention on negative (background) pairs
- structure_matrix: cosine-similarity structure of a feature set
- rrd_loss: Frobenius distance between student and teacher structures
- total_loss: supervised terms plus the two weighted distillation terms

Both distillation losses are computed over the same negative-row subset N and
return the gradient with respect to every student row (zero off N).
"""

from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from sgkit.core import EmbeddingMatrix
from sgkit.errors import DimensionError, InvariantError, describe_validation_error


class DistillConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    beta1: float = Field(default=1.0, ge=0.0, description="Weight of the point-wise (VRD) term")
    beta2: float = Field(default=1.0, ge=0.0, description="Weight of the structural (RRD) term")


@dataclass(frozen=True)
class EdgeFeatureSet:
    """One edge-feature row per sampled pair plus the negative-pair mask."""
    features: EmbeddingMatrix
    negative_mask: Tuple[bool, ...]

    def __post_init__(self) -> None:
        mask = tuple(bool(m) for m in self.negative_mask)
        if len(mask) != self.features.rows:
            raise DimensionError(f"negative mask has {len(mask)} entries for {self.features.rows} feature rows")
        object.__setattr__(self, 'negative_mask', mask)

    @classmethod
    def of(cls, features: Union[EmbeddingMatrix, np.ndarray], negative_mask: Sequence[bool]) -> 'EdgeFeatureSet':
        if not isinstance(features, EmbeddingMatrix):
            features = EmbeddingMatrix(np.asarray(features, dtype=np.float64))
        return cls(features, tuple(negative_mask))

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.negative_mask, dtype=bool))


def _aligned_negatives(student: EdgeFeatureSet, teacher: EdgeFeatureSet) -> np.ndarray:
    if student.features.data.shape != teacher.features.data.shape:
        raise DimensionError(
            f"student features {student.features.data.shape} and teacher features "
            f"{teacher.features.data.shape} do not align")
    if student.negative_mask != teacher.negative_mask:
        raise InvariantError("student and teacher negative masks differ")
    negatives = student.negatives
    if negatives.size == 0:
        raise InvariantError("distillation needs at least one negative pair")
    return negatives


def vrd_loss(student: EdgeFeatureSet, teacher: EdgeFeatureSet) -> Tuple[float, np.ndarray]:
    """
    Point-wise retention: (1/|N|) * sum over negatives of ||e_S - e_T||_1.

    Returns:
        (loss, gradient with the shape of the student features)
    """
    negatives = _aligned_negatives(student, teacher)
    diff = student.features.data[negatives] - teacher.features.data[negatives]
    n = negatives.size

    grad = np.zeros_like(student.features.data)
    grad[negatives] = np.sign(diff) / n
    return float(np.abs(diff).sum() / n), grad


def _unit_rows(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise InvariantError(f"feature row {int(zero[0])} has zero norm")
    return data / norms[:, None], norms


def structure_matrix(features: EmbeddingMatrix) -> np.ndarray:
    """Pairwise cosine similarities; symmetric with a unit diagonal."""
    unit, _ = _unit_rows(features.data)
    return unit @ unit.T


def rrd_loss(student: EdgeFeatureSet, teacher: EdgeFeatureSet) -> Tuple[float, np.ndarray]:
    """
    Structural retention: (1/n^2) * ||M_S - M_T||_F^2 over the n negative rows.

    The gradient is taken through the row normalisation:
        G = (2/n^2)(M_S - M_T),  dL/dU = 2 G U,
        dL/ds_i = (I - u_i u_i^T) dL/du_i / ||s_i||
    """
    negatives = _aligned_negatives(student, teacher)
    n = negatives.size
    unit_s, norms_s = _unit_rows(student.features.data[negatives])
    unit_t, _ = _unit_rows(teacher.features.data[negatives])

    delta = unit_s @ unit_s.T - unit_t @ unit_t.T
    loss = float(np.sum(delta ** 2) / n ** 2)

    g = (2.0 / n ** 2) * delta
    d_unit = 2.0 * g @ unit_s
    radial = np.sum(d_unit * unit_s, axis=1, keepdims=True)
    d_rows = (d_unit - radial * unit_s) / norms_s[:, None]

    grad = np.zeros_like(student.features.data)
    grad[negatives] = d_rows
    return loss, grad


class LossParts(BaseModel):
    """The six components of the combined fine-tuning objective."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    reg: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    giou: float = Field(default=0.0, ge=0.0, le=2.0, allow_inf_nan=False)
    obj: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    rel: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    vrd: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)
    rrd: float = Field(default=0.0, ge=0.0, allow_inf_nan=False)


def total_loss(parts: Union[LossParts, Mapping[str, float]], cfg: DistillConfig = DistillConfig()) -> float:
    """reg + giou + obj + rel + beta1 * vrd + beta2 * rrd"""
    if not isinstance(parts, LossParts):
        try:
            parts = LossParts.model_validate(dict(parts))
        except ValidationError as e:
            raise InvariantError(describe_validation_error(e)) from e
    return (parts.reg + parts.giou + parts.obj + parts.rel
            + cfg.beta1 * parts.vrd + cfg.beta2 * parts.rrd)
