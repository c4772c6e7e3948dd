"""Structural reparameterization: train with three branches, deploy one conv.

Builds a random 3x3 + 1x1 + identity block, folds it, and verifies the folded
convolution reproduces the branch sum on random inputs.

    python demos/demo_reparam_folding.py
"""
import numpy as np

from detkit.reparam import RepBranchParams, rep_branches_forward, reparam_fold
from detkit.tensorops import BnParams, ConvParams, Tensor4, conv2d_forward

rng = np.random.default_rng(0)
ch = 16


def random_bn():
    return BnParams(
        gamma=rng.uniform(0.5, 1.5, ch).astype(np.float32),
        beta=rng.standard_normal(ch).astype(np.float32),
        running_mean=rng.standard_normal(ch).astype(np.float32),
        running_var=rng.uniform(0.2, 2.0, ch).astype(np.float32),
    )


branches = RepBranchParams(
    conv3=ConvParams(rng.standard_normal((ch, ch, 3, 3)).astype(np.float32),
                     np.zeros(ch, dtype=np.float32), padding=1),
    bn3=random_bn(),
    conv1=ConvParams(rng.standard_normal((ch, ch, 1, 1)).astype(np.float32),
                     np.zeros(ch, dtype=np.float32), padding=0),
    bn1=random_bn(),
    identity_bn=random_bn(),
)

folded = reparam_fold(branches)
print(f"three branches ({ch} channels) fold into one 3x3 conv: "
      f"weights {folded.weights.shape}, bias {folded.bias.shape}")

worst = 0.0
for _ in range(20):
    x = Tensor4(rng.standard_normal((2, ch, 12, 12)).astype(np.float32))
    gap = np.abs(rep_branches_forward(x, branches).data
                 - conv2d_forward(x, folded).data).max()
    worst = max(worst, float(gap))
print(f"max |branch-sum - folded| over 20 random inputs: {worst:.2e} (tolerance 1e-5)")

# deploy-view savings: the branch structure costs extra only while training
branch_params = (branches.conv3.weights.size + branches.conv1.weights.size
                 + 6 * ch)  # three bns at 2/channel
print(f"params: {branch_params} in branches vs {folded.weights.size + ch} folded")
