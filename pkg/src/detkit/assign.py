"""Aligned label assignment: IoU-soft-label costs plus global dynamic top-k.

Per ground truth and prediction, the assignment cost couples regression and
classification quality:

    alpha = IoU(gt_box, pred_box)
    C_reg = -ln(max(alpha, eps))
    C_cls = (alpha - p)^2 * BCE(p, alpha),  p = predicted score of the GT class
    cost  = C_reg + C_cls

so a prediction is cheap only when it is both well placed and confidently,
correctly classified; alpha doubles as the soft classification target of the
assigned pair. Pairs with alpha <= eps are excluded from candidacy rather than
carrying infinite cost.

The selection rule is a deterministic dynamic top-k (a greedy stand-in for the
full transport problem; a Sinkhorn solver is available behind the same
interface): per GT, k = clamp(round(sum of top-q IoUs), 1, q) with
q = min(10, candidates), each GT takes its k lowest-cost candidates, and a
prediction claimed by several GTs goes to the one with the lowest cost.
Ties break by (GT index, prediction index) on original indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

__all__ = [
    "Box",
    "Prediction",
    "GroundTruth",
    "CostMatrix",
    "AssignmentResult",
    "pairwise_iou",
    "align_cost",
    "dynamic_k_assign",
    "sinkhorn_assign",
    "ALPHA_EPS",
]

ALPHA_EPS = 1e-8
LOG_EPS = 1e-12
TOPK_CANDIDATES = 10


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, corners (x1, y1) <= (x2, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValidationError(f"box corners out of order: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class Prediction:
    box: Box
    cls_scores: np.ndarray
    anchor_point: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        scores = np.asarray(self.cls_scores, dtype=np.float64).reshape(-1)
        if scores.size == 0:
            raise ValidationError("prediction needs at least one class score")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValidationError("class scores must lie in [0, 1]")
        object.__setattr__(self, "cls_scores", scores)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        if self.box.area <= 0:
            raise ValidationError("ground-truth box must have positive area")


@dataclass(frozen=True)
class CostMatrix:
    """|GT| x |pred| aligned costs, their IoUs, and the candidacy mask."""

    costs: np.ndarray
    alphas: np.ndarray
    candidate_mask: np.ndarray

    def __post_init__(self):
        if not (self.costs.shape == self.alphas.shape == self.candidate_mask.shape):
            raise ShapeError("cost matrix field shapes differ")
        if np.any(~np.isfinite(self.costs[self.candidate_mask])):
            raise ValidationError("masked-in costs must be finite")


@dataclass(frozen=True)
class AssignmentResult:
    """Per-prediction GT index (or None), per-GT dynamic k, and the soft labels
    (the IoU used as classification target) of the assigned predictions."""

    assigned_gt: tuple[int | None, ...]
    per_gt_k: tuple[int, ...]
    soft_labels: tuple[float | None, ...]
    warnings: tuple[str, ...] = field(default=())


def _iou(a: Box, b: Box) -> float:
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pairwise_iou(gts, preds) -> np.ndarray:
    """|GT| x |pred| intersection-over-union; degenerate unions give 0."""
    out = np.zeros((len(gts), len(preds)), dtype=np.float64)
    for i, gt in enumerate(gts):
        gbox = gt.box if isinstance(gt, GroundTruth) else gt
        for j, pred in enumerate(preds):
            pbox = pred.box if isinstance(pred, Prediction) else pred
            out[i, j] = _iou(gbox, pbox)
    return out


def _bce(p: float, target: float) -> float:
    p = min(max(p, LOG_EPS), 1.0 - LOG_EPS)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def align_cost(gts, preds, center_prior: bool = False) -> CostMatrix:
    """Aligned assignment costs for one image.

    center_prior additionally requires a prediction's anchor point to lie
    inside the GT box for candidacy; it is off by default.
    """
    n_gt, n_pred = len(gts), len(preds)
    costs = np.full((n_gt, n_pred), np.inf, dtype=np.float64)
    alphas = pairwise_iou(gts, preds)
    mask = alphas > ALPHA_EPS
    for i, gt in enumerate(gts):
        if n_pred and gt.class_id >= preds[0].cls_scores.size:
            raise ValidationError(
                f"gt class_id {gt.class_id} out of range for {preds[0].cls_scores.size} classes"
            )
        for j, pred in enumerate(preds):
            if center_prior:
                ax, ay = pred.anchor_point
                inside = gt.box.x1 <= ax <= gt.box.x2 and gt.box.y1 <= ay <= gt.box.y2
                mask[i, j] &= inside
            if not mask[i, j]:
                continue
            alpha = alphas[i, j]
            p = float(pred.cls_scores[gt.class_id])
            c_reg = -math.log(max(alpha, ALPHA_EPS))
            c_cls = (alpha - p) ** 2 * _bce(p, alpha)
            costs[i, j] = c_reg + c_cls
    return CostMatrix(costs=costs, alphas=alphas, candidate_mask=mask)


def _dynamic_k(ious: np.ndarray) -> int:
    """k = clamp(round(sum of top-q IoUs), 1, q), q = min(10, candidates);
    round is half-up so the rule is platform-stable."""
    q = min(TOPK_CANDIDATES, ious.size)
    top = np.sort(ious)[::-1][:q]
    return int(min(max(math.floor(top.sum() + 0.5), 1), q))


def dynamic_k_assign(matrix: CostMatrix) -> AssignmentResult:
    """Deterministic per-GT top-k selection with lowest-cost conflict resolution."""
    n_gt, n_pred = matrix.costs.shape
    per_gt_k = []
    warnings = []
    claimed: dict[int, list[int]] = {}
    for i in range(n_gt):
        cand = np.flatnonzero(matrix.candidate_mask[i])
        if cand.size == 0:
            per_gt_k.append(0)
            warnings.append(f"gt {i} has no candidates")
            continue
        k = _dynamic_k(matrix.alphas[i, cand])
        per_gt_k.append(k)
        # stable sort keeps the documented (cost, prediction index) tie-break
        order = cand[np.argsort(matrix.costs[i, cand], kind="stable")]
        for j in order[:k]:
            claimed.setdefault(int(j), []).append(i)

    assigned: list[int | None] = [None] * n_pred
    soft: list[float | None] = [None] * n_pred
    for j, gt_indices in claimed.items():
        best = min(gt_indices, key=lambda i: (matrix.costs[i, j], i))
        assigned[j] = best
        soft[j] = float(matrix.alphas[best, j])
    return AssignmentResult(
        assigned_gt=tuple(assigned),
        per_gt_k=tuple(per_gt_k),
        soft_labels=tuple(soft),
        warnings=tuple(warnings),
    )


def sinkhorn_assign(matrix: CostMatrix, reg: float = 0.05, iterations: int = 200) -> AssignmentResult:
    """Entropic optimal-transport alternative behind the same interface.

    Supplies are the dynamic k of each GT; a background column absorbs the
    rest. After convergence each prediction goes to its highest-transport GT.
    Dynamic-k selection remains the default solver; this exists for
    experimentation and satisfies the same result contract.
    """
    n_gt, n_pred = matrix.costs.shape
    per_gt_k = []
    warnings = []
    for i in range(n_gt):
        cand = np.flatnonzero(matrix.candidate_mask[i])
        if cand.size == 0:
            per_gt_k.append(0)
            warnings.append(f"gt {i} has no candidates")
        else:
            per_gt_k.append(_dynamic_k(matrix.alphas[i, cand]))
    if n_pred == 0 or sum(per_gt_k) == 0:
        return AssignmentResult((None,) * n_pred, tuple(per_gt_k), (None,) * n_pred,
                                tuple(warnings))

    big = 1e6
    cost = np.where(matrix.candidate_mask, matrix.costs, big)
    cost = np.vstack([cost, np.full((1, n_pred), 2.0)])  # background row
    supply = np.array(per_gt_k + [max(n_pred - sum(per_gt_k), 0)], dtype=np.float64)
    supply = np.maximum(supply, 1e-9)
    supply = supply / supply.sum()
    demand = np.full(n_pred, 1.0 / n_pred)

    kernel = np.exp(-cost / reg)
    u = np.ones(n_gt + 1)
    v = np.ones(n_pred)
    for _ in range(iterations):
        u = supply / np.maximum(kernel @ v, 1e-30)
        v = demand / np.maximum(kernel.T @ u, 1e-30)
    plan = u[:, None] * kernel * v[None, :]

    assigned: list[int | None] = [None] * n_pred
    soft: list[float | None] = [None] * n_pred
    winners = plan.argmax(axis=0)
    for j in range(n_pred):
        i = int(winners[j])
        if i < n_gt and matrix.candidate_mask[i, j]:
            assigned[j] = i
            soft[j] = float(matrix.alphas[i, j])
    return AssignmentResult(tuple(assigned), tuple(per_gt_k), tuple(soft), tuple(warnings))
