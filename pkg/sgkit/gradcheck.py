"""
Finite-difference gradient checking.

central_difference() and relative_error() are the shared harness;
run_suite() checks every differentiable operation of the library on seeded
random instances and is what the `gradcheck` command runs.

Usage:
    from sgkit.gradcheck import run_suite
    results = run_suite(seed=0, instances=100)
    assert all(r.passed for r in results)
"""

from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from sgkit.distillation import EdgeFeatureSet, rrd_loss, vrd_loss
from sgkit.errors import InvariantError
from sgkit.logger import get_logger
from sgkit.losses import LossConfig, bce_relation_loss, box_regression_loss, focal_loss, giou_with_grad
from sgkit.scene_model import EdgeCombiner, GlobalRelationEmbedding, edge_feature, edge_feature_backward

logger = get_logger(__name__)

DEFAULT_STEP = 1e-6
DEFAULT_THRESHOLD = 1e-4
NORM_FLOOR = 1e-10
KINK_MARGIN = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Numerical gradient of a scalar function by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_x.size):
        original = flat_x[k]
        flat_x[k] = original + step
        plus = f(x)
        flat_x[k] = original - step
        minus = f(x)
        flat_x[k] = original
        flat_g[k] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < NORM_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


class GradCase(NamedTuple):
    """A scalar function, a point and the analytic gradient at that point."""
    f: Callable[[np.ndarray], float]
    x: np.ndarray
    analytic: np.ndarray


# A case builder draws one random instance, or returns None when the draw
# falls in the documented non-smooth set of the operation.
CaseBuilder = Callable[[np.random.Generator], Optional[GradCase]]


class GradCheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: str
    instances: int = Field(ge=0)
    skipped: int = Field(ge=0, description="Draws rejected as too close to a kink")
    max_relative_error: float = Field(ge=0.0)
    threshold: float = Field(gt=0.0)
    passed: bool

    def to_dict(self) -> Dict[str, object]:
        return self.model_dump()


def check_gradient(
    op: str,
    builder: CaseBuilder,
    instances: int,
    rng: np.random.Generator,
    threshold: float = DEFAULT_THRESHOLD,
    step: float = DEFAULT_STEP,
    corrupt: bool = False,
) -> GradCheckResult:
    """
    Compare analytic and central-difference gradients on `instances` draws.

    Args:
        op: name used in reports
        builder: draws a GradCase (or None to skip a non-smooth draw)
        instances: number of accepted draws to check
        rng: source of randomness for the builder
        threshold: largest acceptable relative error
        step: finite-difference step
        corrupt: double the analytic gradient (negative control)
    """
    worst = 0.0
    accepted = 0
    skipped = 0
    max_draws = 20 * instances + 20
    while accepted < instances:
        if accepted + skipped >= max_draws:
            raise InvariantError(f"{op}: only {accepted} of {instances} draws were away from the non-smooth set")
        case = builder(rng)
        if case is None:
            skipped += 1
            continue
        analytic = case.analytic * 2.0 if corrupt else case.analytic
        numeric = central_difference(case.f, case.x, step)
        worst = max(worst, relative_error(analytic, numeric))
        accepted += 1

    result = GradCheckResult(op=op, instances=accepted, skipped=skipped,
                             max_relative_error=worst, threshold=threshold, passed=worst <= threshold)
    logger.debug(f"{op}: max relative error {worst:.3e} over {accepted} instance(s), {skipped} skipped")
    return result


# ---------------------------------------------------------------------------
# Case builders
# ---------------------------------------------------------------------------

def _focal_case(rng: np.random.Generator) -> GradCase:
    classes = int(rng.integers(2, 9))
    logits = rng.normal(0.0, 2.0, size=classes)
    target = None if rng.random() < 0.2 else int(rng.integers(classes))
    cfg = LossConfig(focal_alpha=float(rng.uniform(0.1, 0.9)), focal_gamma=float(rng.uniform(0.0, 3.0)))
    _, grad = focal_loss(logits, target, cfg)
    return GradCase(lambda z: focal_loss(z, target, cfg)[0], logits, grad)


def _bce_case(rng: np.random.Generator) -> GradCase:
    classes = int(rng.integers(1, 9))
    scores = rng.normal(0.0, 2.0, size=classes)
    targets = rng.random(classes) < 0.4
    _, grad = bce_relation_loss(scores, targets)
    return GradCase(lambda z: bce_relation_loss(z, targets)[0], scores, grad)


def _random_box(rng: np.random.Generator) -> np.ndarray:
    w, h = rng.uniform(0.1, 0.5, size=2)
    cx = rng.uniform(w / 2.0, 1.0 - w / 2.0)
    cy = rng.uniform(h / 2.0, 1.0 - h / 2.0)
    return np.array([cx, cy, w, h])


def _corners(box: np.ndarray) -> np.ndarray:
    return np.array([box[0] - box[2] / 2.0, box[0] + box[2] / 2.0,
                     box[1] - box[3] / 2.0, box[1] + box[3] / 2.0])


def _near_giou_kink(pred: np.ndarray, gt: np.ndarray) -> bool:
    """Corner ties and zero-width overlaps are where GIoU is not differentiable."""
    p, g = _corners(pred), _corners(gt)
    if np.any(np.abs(p - g) < KINK_MARGIN):
        return True
    iw = min(p[1], g[1]) - max(p[0], g[0])
    ih = min(p[3], g[3]) - max(p[2], g[2])
    return abs(iw) < KINK_MARGIN or abs(ih) < KINK_MARGIN


def _l1_case(rng: np.random.Generator) -> Optional[GradCase]:
    pred, gt = _random_box(rng), _random_box(rng)
    if np.any(np.abs(pred - gt) < KINK_MARGIN):
        return None
    grad = box_regression_loss(pred, gt).l1_grad
    return GradCase(lambda p: box_regression_loss(p, gt).l1_loss, pred, grad)


def _giou_case(rng: np.random.Generator) -> Optional[GradCase]:
    gt = _random_box(rng)
    # half the draws start near the GT so overlapping configurations are covered
    pred = gt + rng.normal(0.0, 0.05, size=4) if rng.random() < 0.5 else _random_box(rng)
    pred[2:] = np.clip(pred[2:], 0.05, 1.0)
    if _near_giou_kink(pred, gt):
        return None
    grad = box_regression_loss(pred, gt).giou_grad
    return GradCase(lambda p: 1.0 - giou_with_grad(p, gt)[0], pred, grad)


def _feature_sets(rng: np.random.Generator):
    rows = int(rng.integers(2, 7))
    dim = int(rng.integers(2, 6))
    teacher = rng.normal(size=(rows, dim))
    student = rng.normal(size=(rows, dim))
    mask = rng.random(rows) < 0.7
    mask[int(rng.integers(rows))] = True
    return student, teacher, tuple(bool(m) for m in mask)


def _vrd_case(rng: np.random.Generator) -> Optional[GradCase]:
    student, teacher, mask = _feature_sets(rng)
    negatives = np.flatnonzero(mask)
    if np.any(np.abs(student[negatives] - teacher[negatives]) < KINK_MARGIN):
        return None
    t_set = EdgeFeatureSet.of(teacher, mask)
    _, grad = vrd_loss(EdgeFeatureSet.of(student, mask), t_set)
    return GradCase(lambda s: vrd_loss(EdgeFeatureSet.of(s, mask), t_set)[0], student, grad)


def _rrd_case(rng: np.random.Generator) -> GradCase:
    student, teacher, mask = _feature_sets(rng)
    t_set = EdgeFeatureSet.of(teacher, mask)
    _, grad = rrd_loss(EdgeFeatureSet.of(student, mask), t_set)
    return GradCase(lambda s: rrd_loss(EdgeFeatureSet.of(s, mask), t_set)[0], student, grad)


def _edge_feature_case(rng: np.random.Generator) -> GradCase:
    dim = int(rng.integers(2, 7))
    combiner = EdgeCombiner.from_seed(dim, seed=int(rng.integers(2 ** 31)))
    x = rng.normal(size=3 * dim)
    upstream = rng.normal(size=dim)

    def f(v: np.ndarray) -> float:
        e_rln = GlobalRelationEmbedding(v[:dim])
        return float(upstream @ edge_feature(combiner, e_rln, v[dim:2 * dim], v[2 * dim:]))

    grads = edge_feature_backward(combiner, GlobalRelationEmbedding(x[:dim]), x[dim:2 * dim], x[2 * dim:], upstream)
    return GradCase(f, x, np.concatenate(grads))


CASES: Dict[str, CaseBuilder] = {
    'focal': _focal_case,
    'bce': _bce_case,
    'box_l1': _l1_case,
    'box_giou': _giou_case,
    'vrd': _vrd_case,
    'rrd': _rrd_case,
    'edge_feature': _edge_feature_case,
}


def run_suite(
    seed: int = 0,
    instances: int = 100,
    threshold: float = DEFAULT_THRESHOLD,
    step: float = DEFAULT_STEP,
    corrupt_op: Optional[str] = None,
    ops: Optional[List[str]] = None,
) -> List[GradCheckResult]:
    """
    Check every registered operation; each op gets its own RNG stream derived
    from `seed` so results do not depend on which ops are selected.
    """
    names = list(ops) if ops else list(CASES)
    unknown = [n for n in names + ([corrupt_op] if corrupt_op else []) if n not in CASES]
    if unknown:
        raise InvariantError(f"unknown gradient-check op(s): {', '.join(unknown)}; known: {', '.join(CASES)}")

    results = []
    for k, name in enumerate(CASES):
        if name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        results.append(check_gradient(name, CASES[name], instances, rng, threshold, step,
                                      corrupt=(name == corrupt_op)))
    return results
