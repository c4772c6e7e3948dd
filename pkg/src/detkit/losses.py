"""Forward evaluation of the detection losses and the feature-distillation stack.

Training losses (weighted sum, weights configurable):

- qfl:  |target - p|^beta * BCE(p, target), a focal loss against a continuous
  quality target in [0, 1].
- dfl:  a box coordinate is a distribution over integer bins; the loss
  supervises the two neighbors of the real-valued target,
  -( (i+1-y) ln p_i + (y-i) ln p_{i+1} ), i = floor(y).
- giou_loss: 1 - GIoU with GIoU = IoU - (hull - union) / hull in [-1, 1].

Distillation: student features pass an align projection (1x1 conv, nearest
spatial resize when needed) to the teacher's (C, H, W); the channel-wise loss
centers each feature by its own channel mean, uses the teacher channel's
standard deviation as a per-channel temperature (floored at 1e-3), takes the
spatial softmax of feature / T_c for both, and averages T_c^2 * KL(teacher ||
student) over channels. The teacher-side std is an interpretation choice: the
teacher distribution is the KL reference. The distillation weight follows a
cosine schedule over stage one and is identically zero during the short
second (fine-tuning) stage.

Log arguments are clamped at 1e-12 throughout, so all stated tolerances are
reproducible. The *_grad helpers are the documented analytic derivatives used
by the finite-difference sanity checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assign import Box
from .errors import ShapeError, ValidationError
from .tensorops import ConvParams, Tensor4, channel_stats, conv2d_forward

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "DistillSchedule",
    "qfl",
    "qfl_grad",
    "dfl",
    "dfl_grad",
    "giou",
    "giou_loss",
    "giou_loss_grad",
    "total_loss",
    "loss_breakdown",
    "align_project",
    "cwd_loss",
    "mimic_loss",
    "mgd_loss",
    "distill_loss",
    "distill_weight",
    "LOG_EPS",
    "STD_FLOOR",
]

LOG_EPS = 1e-12
STD_FLOOR = 1e-3


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three loss components; defaults follow the quality-focal
    convention (1.0 / 0.25 / 2.0) since the reference values are unstated."""

    qfl: float = 1.0
    dfl: float = 0.25
    giou: float = 2.0

    def __post_init__(self):
        if self.qfl < 0 or self.dfl < 0 or self.giou < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.qfl == self.dfl == self.giou == 0:
            raise ValidationError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    qfl: float
    dfl: float
    giou: float
    distill: float
    total: float


@dataclass(frozen=True)
class DistillSchedule:
    """Two-stage schedule: distill through stage one, fine-tune without
    distillation in stage two. mode "cosine" decays w_start -> w_end over
    stage one; "constant" holds w_start."""

    stage1_epochs: int = 284
    stage2_epochs: int = 16
    w_start: float = 0.5
    w_end: float = 0.0
    mode: str = "cosine"

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValidationError("stage durations must be positive")
        if self.mode not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule mode {self.mode!r}")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs


def _clamp01(x, name: str):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise ValidationError(f"{name} must lie in [0, 1]")
    return x


def _safe_log(x):
    return np.log(np.maximum(x, LOG_EPS))


def qfl(pred_prob, target_q, beta_focal: float = 2.0):
    """Quality focal loss. Scalars in, scalar out; arrays broadcast."""
    p = _clamp01(pred_prob, "pred_prob")
    t = _clamp01(target_q, "target_q")
    bce = -(t * _safe_log(p) + (1.0 - t) * _safe_log(1.0 - p))
    out = np.abs(t - p) ** beta_focal * bce
    return float(out) if out.ndim == 0 else out


def qfl_grad(pred_prob: float, target_q: float, beta_focal: float = 2.0) -> float:
    """d qfl / d pred at interior points (p not in {0, 1, target})."""
    p, t = float(pred_prob), float(target_q)
    gap = abs(t - p)
    bce = -(t * math.log(max(p, LOG_EPS)) + (1 - t) * math.log(max(1 - p, LOG_EPS)))
    dgap = -math.copysign(1.0, t - p)
    dbce = -(t / max(p, LOG_EPS)) + (1 - t) / max(1 - p, LOG_EPS)
    return beta_focal * gap ** (beta_focal - 1) * dgap * bce + gap ** beta_focal * dbce


def dfl(bin_probs, target_y: float) -> float:
    """Distribution focal loss for one coordinate.

    bin_probs is a simplex over the bins (checked to 1e-6); target_y must lie
    in [0, bins - 1]. Integer targets use only their own bin.
    """
    p = np.asarray(bin_probs, dtype=np.float64).reshape(-1)
    if p.size < 1:
        raise ValidationError("bin_probs must be non-empty")
    if np.any(p < 0):
        raise ValidationError("bin probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValidationError(f"bin probabilities must sum to 1, got {p.sum():.8f}")
    y = float(target_y)
    if not 0.0 <= y <= p.size - 1:
        raise ValidationError(f"target {y} outside bin range [0, {p.size - 1}]")
    i = int(math.floor(y))
    if i == y:
        return float(-_safe_log(p[i]))
    left, right = i + 1 - y, y - i
    return float(-(left * _safe_log(p[i]) + right * _safe_log(p[i + 1])))


def dfl_grad(bin_probs, target_y: float) -> np.ndarray:
    """Partial derivatives w.r.t. each bin probability (bins as free coords)."""
    p = np.asarray(bin_probs, dtype=np.float64).reshape(-1)
    y = float(target_y)
    i = int(math.floor(y))
    grad = np.zeros_like(p)
    if i == y:
        grad[i] = -1.0 / max(p[i], LOG_EPS)
    else:
        grad[i] = -(i + 1 - y) / max(p[i], LOG_EPS)
        grad[i + 1] = -(y - i) / max(p[i + 1], LOG_EPS)
    return grad


def _box_geometry(pred: Box, gt: Box):
    ix = max(0.0, min(pred.x2, gt.x2) - max(pred.x1, gt.x1))
    iy = max(0.0, min(pred.y2, gt.y2) - max(pred.y1, gt.y1))
    inter = ix * iy
    union = pred.area + gt.area - inter
    hull = (max(pred.x2, gt.x2) - min(pred.x1, gt.x1)) * (max(pred.y2, gt.y2) - min(pred.y1, gt.y1))
    return inter, union, hull


def giou(pred: Box, gt: Box) -> float:
    """Generalized IoU in [-1, 1]; degenerate unions take the IoU-0 path."""
    inter, union, hull = _box_geometry(pred, gt)
    iou = inter / union if union > 0 else 0.0
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def giou_loss(pred: Box, gt: Box) -> float:
    """1 - GIoU, in [0, 2]."""
    return 1.0 - giou(pred, gt)


def giou_loss_grad(pred: Box, gt: Box, step_guard: float = 1e-9) -> np.ndarray:
    """d giou_loss / d (pred.x1, y1, x2, y2) at generic (non-kink) positions.

    Derived from the piecewise-smooth geometry; valid away from the boundary
    cases where min/max arguments tie.
    """
    inter, union, hull = _box_geometry(pred, gt)
    iou = inter / union if union > 0 else 0.0

    ix = max(0.0, min(pred.x2, gt.x2) - max(pred.x1, gt.x1))
    iy = max(0.0, min(pred.y2, gt.y2) - max(pred.y1, gt.y1))
    pw, ph = pred.x2 - pred.x1, pred.y2 - pred.y1

    # d inter / d coord: active only when pred's edge is the binding one
    di = np.zeros(4)
    if ix > 0 and iy > 0:
        if pred.x1 > gt.x1:
            di[0] = -iy
        if pred.y1 > gt.y1:
            di[1] = -ix
        if pred.x2 < gt.x2:
            di[2] = iy
        if pred.y2 < gt.y2:
            di[3] = ix
    da = np.array([-ph, -pw, ph, pw], dtype=np.float64)  # d pred_area
    du = da - di
    hw = max(pred.x2, gt.x2) - min(pred.x1, gt.x1)
    hh = max(pred.y2, gt.y2) - min(pred.y1, gt.y1)
    dh = np.zeros(4)
    if pred.x1 < gt.x1:
        dh[0] = -hh
    if pred.y1 < gt.y1:
        dh[1] = -hw
    if pred.x2 > gt.x2:
        dh[2] = hh
    if pred.y2 > gt.y2:
        dh[3] = hw

    union = max(union, step_guard)
    hull = max(hull, step_guard)
    diou = (di * union - inter * du) / union**2
    dpen = ((dh - du) * hull - (hull - union) * dh) / hull**2
    return -(diou - dpen)


def total_loss(components, weights: LossWeights) -> float:
    """Weighted sum of (qfl, dfl, giou) components; rejects negative inputs."""
    q, d, g = (float(c) for c in components)
    for name, value in (("qfl", q), ("dfl", d), ("giou", g)):
        if value < 0:
            raise ValidationError(f"negative {name} component: {value}")
    return weights.qfl * q + weights.dfl * d + weights.giou * g


def loss_breakdown(components, weights: LossWeights, distill: float = 0.0,
                   epoch: int = 0, schedule: DistillSchedule | None = None) -> LossBreakdown:
    """Assemble the full breakdown; the distillation term is scaled by the
    schedule weight at `epoch` (weight 1 when no schedule is given)."""
    if distill < 0:
        raise ValidationError(f"negative distill component: {distill}")
    base = total_loss(components, weights)
    w = distill_weight(epoch, schedule) if schedule is not None else 1.0
    q, d, g = (float(c) for c in components)
    return LossBreakdown(qfl=q, dfl=d, giou=g, distill=distill,
                         total=base + w * distill)


# --- distillation ----------------------------------------------------------------


def align_project(student: Tensor4, teacher_shape, proj: ConvParams) -> Tensor4:
    """Project student features to the teacher's (C, H, W) via a 1x1 conv,
    resizing spatially (nearest) first when the grids differ."""
    if proj.kernel != (1, 1):
        raise ShapeError(f"align projection must be 1x1, got {proj.kernel}")
    t_c, t_h, t_w = teacher_shape[-3], teacher_shape[-2], teacher_shape[-1]
    n, c, h, w = student.dims
    x = student
    if (h, w) != (t_h, t_w):
        rows = (np.arange(t_h) * h) // t_h
        cols = (np.arange(t_w) * w) // t_w
        x = Tensor4(x.data[:, :, rows][:, :, :, cols])
    out = conv2d_forward(x, proj)
    if out.dims[1:] != (t_c, t_h, t_w):
        raise ShapeError(
            f"projection yields {out.dims[1:]}, teacher needs {(t_c, t_h, t_w)}"
        )
    return out


def _channel_distributions(feat: np.ndarray, temps: np.ndarray) -> np.ndarray:
    """Per-channel softmax over all batch x spatial positions of (x - mean)/T."""
    c = feat.shape[1]
    flat = feat.transpose(1, 0, 2, 3).reshape(c, -1).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    z = flat / temps[:, None]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cwd_loss(teacher: Tensor4, student: Tensor4) -> float:
    """Channel-wise distillation with dynamic temperature.

    T_c is the teacher channel's std after mean removal (floored at 1e-3);
    both features are centered, softmaxed spatially at that temperature, and
    compared with KL(teacher || student); channels contribute T_c^2 * KL and
    the result is their mean. Zero iff the normalized distributions coincide.
    """
    if teacher.dims != student.dims:
        raise ShapeError(f"teacher {teacher.dims} != student {student.dims}")
    _, t_std = channel_stats(teacher)
    temps = np.maximum(t_std, STD_FLOOR)
    p = _channel_distributions(teacher.data, temps)
    q = _channel_distributions(student.data, temps)
    kl = np.sum(p * (_safe_log(p) - _safe_log(q)), axis=1)
    return float(np.mean(temps**2 * kl))


def mimic_loss(teacher: Tensor4, student: Tensor4) -> float:
    """Plain feature imitation baseline: mean squared error."""
    if teacher.dims != student.dims:
        raise ShapeError(f"teacher {teacher.dims} != student {student.dims}")
    diff = teacher.data.astype(np.float64) - student.data.astype(np.float64)
    return float(np.mean(diff**2))


def mgd_loss(teacher: Tensor4, student: Tensor4, mask_ratio: float = 0.65,
             seed: int = 0) -> float:
    """Masked-imitation baseline: a seeded binary spatial mask hides student
    positions before the squared error. Structural stand-in for the masked
    generative method (no regeneration network at evaluation time)."""
    if teacher.dims != student.dims:
        raise ShapeError(f"teacher {teacher.dims} != student {student.dims}")
    if not 0.0 <= mask_ratio < 1.0:
        raise ValidationError("mask_ratio must lie in [0, 1)")
    n, c, h, w = teacher.dims
    rng = np.random.default_rng(seed)
    keep = rng.random((n, 1, h, w)) >= mask_ratio
    diff = (teacher.data.astype(np.float64) - student.data.astype(np.float64) * keep)
    return float(np.mean(diff**2))


_DISTILL_KINDS = {"cwd": cwd_loss, "mimic": mimic_loss, "mgd": mgd_loss}


def distill_loss(teacher_feats, student_feats, kind: str = "cwd", **kw) -> float:
    """Multi-scale distillation: equal-weight mean over feature pairs."""
    if kind not in _DISTILL_KINDS:
        raise ValidationError(f"unknown distillation kind {kind!r}; options: {sorted(_DISTILL_KINDS)}")
    if len(teacher_feats) != len(student_feats) or not teacher_feats:
        raise ShapeError("teacher and student need the same non-zero number of feature maps")
    fn = _DISTILL_KINDS[kind]
    return float(np.mean([fn(t, s, **kw) for t, s in zip(teacher_feats, student_feats)]))


def distill_weight(epoch: int, schedule: DistillSchedule | None = None) -> float:
    """Distillation weight at an epoch: cosine (or constant) during stage one,
    identically zero from the first stage-two epoch on."""
    if schedule is None:
        schedule = DistillSchedule()
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    if epoch >= schedule.stage1_epochs:
        return 0.0
    if schedule.mode == "constant":
        return schedule.w_start
    span = schedule.w_start - schedule.w_end
    return schedule.w_end + 0.5 * span * (1.0 + math.cos(math.pi * epoch / schedule.stage1_epochs))
