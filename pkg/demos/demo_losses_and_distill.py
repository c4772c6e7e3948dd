"""Loss calculus walkthrough: the three training losses, the channel-wise
distillation loss with its dynamic temperature, and the two-stage weight
schedule.

    python demos/demo_losses_and_distill.py
"""
import numpy as np

from detkit.assign import Box
from detkit.losses import (
    DistillSchedule,
    LossWeights,
    align_project,
    cwd_loss,
    dfl,
    distill_weight,
    giou_loss,
    loss_breakdown,
    qfl,
)
from detkit.tensorops import ConvParams, Tensor4

print("quality focal loss (target = localization quality):")
for p in (0.1, 0.5, 0.9):
    print(f"  pred {p:.1f} vs quality 0.9 -> {qfl(p, 0.9):.4f}")

print("\ndistribution focal loss (coordinate as a distribution over bins):")
sharp = np.zeros(16)
sharp[7], sharp[8] = 0.5, 0.5
diffuse = np.full(16, 1 / 16)
print(f"  target 7.5, mass on both neighbors -> {dfl(sharp, 7.5):.4f} (= ln 2)")
print(f"  target 7.5, uniform mass           -> {dfl(diffuse, 7.5):.4f}")

print("\ngeneralized-IoU loss penalizes empty hull area:")
print(f"  identical boxes -> {giou_loss(Box(0, 0, 4, 4), Box(0, 0, 4, 4)):.4f}")
print(f"  near miss       -> {giou_loss(Box(0, 0, 2, 2), Box(1, 1, 3, 3)):.4f}")
print(f"  far apart       -> {giou_loss(Box(0, 0, 1, 1), Box(8, 8, 9, 9)):.4f}")

# feature distillation with an align projection and dynamic temperature
rng = np.random.default_rng(0)
teacher = Tensor4(rng.standard_normal((1, 32, 8, 8)).astype(np.float32))
student_raw = Tensor4(rng.standard_normal((1, 24, 8, 8)).astype(np.float32))
proj = ConvParams(rng.standard_normal((32, 24, 1, 1)).astype(np.float32) * 0.1,
                  np.zeros(32, dtype=np.float32))
student = align_project(student_raw, teacher.dims[1:], proj)
print(f"\nalign projection: student {student_raw.dims} -> {student.dims}")
print(f"channel-wise distillation loss: {cwd_loss(teacher, student):.4f}")
print(f"  (same features -> {cwd_loss(teacher, teacher):.4f})")

print("\ntwo-stage distillation weight (cosine, then off):")
schedule = DistillSchedule()
for epoch in (0, 71, 142, 213, 283, 284, 299):
    print(f"  epoch {epoch:3d} -> {distill_weight(epoch, schedule):.4f}")

bd = loss_breakdown((0.2, 0.4, 0.3), LossWeights(), distill=0.8, epoch=100,
                    schedule=schedule)
print(f"\nfull breakdown at epoch 100: qfl {bd.qfl}, dfl {bd.dfl}, giou {bd.giou}, "
      f"distill {bd.distill} -> total {bd.total:.4f}")
