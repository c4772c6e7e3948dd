"""Small dense NCHW kernels: convolution, batchnorm folding, channel statistics.

These back the numeric equivalence checks (branch folding, feature projection)
and the distillation losses. Values are stored as float32 and accumulated in
float64; the toolkit's tolerance budgets assume exactly that. Convolution uses
the cross-correlation convention (no kernel flip) and supports only odd kernels
with symmetric padding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

__all__ = [
    "Tensor4",
    "ConvParams",
    "BnParams",
    "conv2d_forward",
    "fold_batchnorm",
    "channel_stats",
    "save_raw_tensor",
    "load_raw_tensor",
]


@dataclass(frozen=True)
class Tensor4:
    """A dense (batch, channels, height, width) activation tensor."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims (n, c, h, w), got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"Tensor4 dims must all be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    weights has shape (out_ch, in_ch // groups, kh, kw); bias has shape
    (out_ch,). Kernels must be odd so symmetric padding keeps centers aligned.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if w.ndim != 4:
            raise ShapeError(f"conv weights need 4 dims, got {w.ndim}")
        out_ch, _, kh, kw = w.shape
        b = np.asarray(self.bias, dtype=np.float32)
        if b.shape != (out_ch,):
            raise ShapeError(f"bias dim {b.shape} != out_ch ({out_ch},)")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValidationError(f"kernel must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValidationError(
                f"stride/padding/groups out of range: {self.stride}/{self.padding}/{self.groups}"
            )
        if out_ch % self.groups != 0:
            raise ValidationError(f"out_ch {out_ch} not divisible by groups {self.groups}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True)
class BnParams:
    """Per-channel batchnorm parameters in inference form."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        fields_ = {}
        for name in ("gamma", "beta", "running_mean", "running_var"):
            fields_[name] = np.asarray(getattr(self, name), dtype=np.float32).reshape(-1)
        n = fields_["gamma"].shape[0]
        for name, arr in fields_.items():
            if arr.shape != (n,):
                raise ShapeError(f"bn {name} dim {arr.shape} != channels ({n},)")
            object.__setattr__(self, name, arr)
        if np.any(fields_["running_var"] + self.epsilon <= 0):
            raise ValidationError("running_var + epsilon must be > 0 per channel")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def apply(self, x: Tensor4) -> Tensor4:
        """Normalize a feature map with running statistics (inference mode)."""
        if x.dims[1] != self.channels:
            raise ShapeError(f"bn channels {self.channels} != input channels {x.dims[1]}")
        scale = (self.gamma.astype(np.float64)
                 / np.sqrt(self.running_var.astype(np.float64) + self.epsilon))
        shift = self.beta.astype(np.float64) - self.running_mean.astype(np.float64) * scale
        out = x.data.astype(np.float64) * scale[None, :, None, None] + shift[None, :, None, None]
        return Tensor4(out.astype(np.float32))


def conv2d_forward(x: Tensor4, p: ConvParams) -> Tensor4:
    """Cross-correlate an NCHW input with a conv's weights and add its bias.

    Output spatial dims follow floor((H + 2*pad - kh) / stride) + 1. Raises
    ShapeError when channels disagree or padding leaves no valid output.
    """
    n, c, h, w = x.dims
    if c != p.in_ch:
        raise ShapeError(f"input channels {c} != conv in_ch {p.in_ch}")
    kh, kw = p.kernel
    if c % p.groups != 0:
        raise ShapeError(f"input channels {c} not divisible by groups {p.groups}")
    h_out = (h + 2 * p.padding - kh) // p.stride + 1
    w_out = (w + 2 * p.padding - kw) // p.stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"output dims {h_out}x{w_out} invalid for input {h}x{w}, "
            f"kernel {kh}x{kw}, pad {p.padding}, stride {p.stride}"
        )

    xp = x.data.astype(np.float64)
    if p.padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (p.padding,) * 2, (p.padding,) * 2))
    # (n, c, h_out, w_out, kh, kw) windows, strided view only
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :: p.stride, :: p.stride]

    wt = p.weights.astype(np.float64)
    out = np.empty((n, p.out_ch, h_out, w_out), dtype=np.float64)
    cg = c // p.groups
    og = p.out_ch // p.groups
    for g in range(p.groups):
        out[:, g * og:(g + 1) * og] = np.einsum(
            "nchwij,ocij->nohw",
            win[:, g * cg:(g + 1) * cg],
            wt[g * og:(g + 1) * og],
            optimize=True,
        )
    out += p.bias.astype(np.float64)[None, :, None, None]
    return Tensor4(out.astype(np.float32))


def fold_batchnorm(conv: ConvParams, bn: BnParams) -> ConvParams:
    """Fold an inference batchnorm into the preceding convolution.

    For every input x, conv2d(x, folded) == bn(conv2d(x, conv)) up to float32
    rounding: weights scale by gamma / sqrt(var + eps) and the bias is rescaled
    and shifted accordingly.
    """
    if bn.channels != conv.out_ch:
        raise ShapeError(f"bn channels {bn.channels} != conv out_ch {conv.out_ch}")
    var = bn.running_var.astype(np.float64) + bn.epsilon
    if np.any(var <= 0):
        raise ValidationError("running_var + epsilon must be > 0 per channel")
    scale = bn.gamma.astype(np.float64) / np.sqrt(var)
    w = conv.weights.astype(np.float64) * scale[:, None, None, None]
    b = (conv.bias.astype(np.float64) - bn.running_mean.astype(np.float64)) * scale \
        + bn.beta.astype(np.float64)
    return ConvParams(
        weights=w.astype(np.float32),
        bias=b.astype(np.float32),
        stride=conv.stride,
        padding=conv.padding,
        groups=conv.groups,
    )


def channel_stats(feat: Tensor4) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, std) over the batch and spatial axes.

    Std is the population definition (divide by N), so it is stable for any
    N >= 1. A constant channel yields std 0; callers that need a temperature
    must floor it themselves.
    """
    x = feat.data.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = np.sqrt(((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3)))
    return mean, std


def save_raw_tensor(path, x: Tensor4) -> None:
    """Write little-endian float32 raw data plus a `<path>.json` shape sidecar."""
    import json
    from pathlib import Path

    path = Path(path)
    x.data.astype("<f4").tofile(path)
    sidecar = {"shape": list(x.dims), "dtype": "float32", "byte_order": "little", "order": "C"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_raw_tensor(path) -> Tensor4:
    """Read a tensor written by save_raw_tensor."""
    import json
    from pathlib import Path

    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    shape = tuple(sidecar["shape"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"raw file holds {data.size} values, sidecar shape {shape} needs {int(np.prod(shape))}")
    return Tensor4(data.reshape(shape))
