"""Convolutional building blocks and the multiply-accumulate cost model.

Everything a MobileNetV2-style backbone needs: depthwise 3x3 and pointwise
1x1 convolutions, batch normalization, global average pooling, the inverted
residual block, and the closed-form cost of a depthwise-separable layer.

The convolutions are written as a sum over kernel taps, each tap a strided
slice multiply, which keeps them vectorized without hiding the arithmetic.
Test suites compare them against naive nested-loop references.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, relu6

PADDINGS = ("same", "valid")

# Largest cost the calculator will report; anything above is rejected
# instead of being silently wrapped by a fixed-width consumer.
COST_LIMIT = 2**63 - 1


@dataclass(frozen=True)
class ConvCostInput:
    """Geometry of one depthwise-separable convolution.

    height/width are the input spatial extents in pixels, channels_in and
    channels_out the channel counts before and after the layer, and
    kernel_size the side length of the square depthwise filter.
    """

    height: int
    width: int
    channels_in: int
    channels_out: int
    kernel_size: int

    def __post_init__(self) -> None:
        for name in ("height", "width", "channels_in", "channels_out", "kernel_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"ConvCostInput.{name} must be a positive integer, got {value!r}")


def conv_cost(c: ConvCostInput) -> int:
    """Multiply-accumulate count of a depthwise-separable convolution.

    The depthwise pass costs h*w*c_in*k^2 and the pointwise pass
    h*w*c_in*c_out; the total is their sum, returned as an exact integer.
    """
    spatial = c.height * c.width * c.channels_in
    total = spatial * c.kernel_size * c.kernel_size + spatial * c.channels_out
    if total > COST_LIMIT:
        raise OverflowError(f"conv cost {total} exceeds the 63-bit limit")
    return total


def depletion_ratio(c: ConvCostInput) -> float:
    """Separable cost divided by the dense k x k convolution cost.

    Algebraically equal to 1/channels_out + 1/kernel_size^2.
    """
    k2 = c.kernel_size * c.kernel_size
    numerator = c.height * c.width * c.channels_in * (k2 + c.channels_out)
    denominator = c.height * c.width * c.channels_in * c.channels_out * k2
    return numerator / denominator


# ---------------------------------------------------------------------------
# Convolutions. Single-image entry points take [H, W, C]; the *_nhwc cores
# below them run on [N, H, W, C] batches and are what the training layers use.
# ---------------------------------------------------------------------------


def same_padding(extent: int, kernel_size: int, stride: int) -> Tuple[int, int]:
    """Zero padding (before, after) for same-style output extents.

    Output extent is ceil(extent / stride). At stride 2 the leftover pixel
    goes after (bottom/right), which keeps 224 -> 112 -> 56 -> 28 -> 14 -> 7
    exact for 3x3 kernels.
    """
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel_size - extent, 0)
    before = total // 2
    return before, total - before


def depthwise_nhwc(x: np.ndarray, kernels: np.ndarray, stride: int, padding: str) -> np.ndarray:
    """Depthwise convolution on an [N, H, W, C] batch.

    Each channel is filtered independently by its own k x k kernel; output
    channel c depends only on input channel c.
    """
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}; expected one of {PADDINGS}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if kernels.ndim != 3 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"depthwise kernels must be [k, k, C], got {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 != 1:
        raise ValueError(f"kernel side must be odd, got {k}")
    n, h, w, c = x.shape
    if kernels.shape[2] != c:
        raise ShapeError(f"kernel channels {kernels.shape[2]} do not match input channels {c}")

    if padding == "same":
        (pt, pb), (pl, pr) = same_padding(h, k, stride), same_padding(w, k, stride)
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        h, w = x.shape[1], x.shape[2]
    out_h = (h - k) // stride + 1
    out_w = (w - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"kernel {k}x{k} does not fit input {h}x{w} with valid padding")

    out = np.zeros((n, out_h, out_w, c), dtype=np.float64)
    for p in range(k):
        for q in range(k):
            patch = x[:, p : p + out_h * stride : stride, q : q + out_w * stride : stride, :]
            out += patch * kernels[p, q, :]
    return out


def pointwise_nhwc(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """1x1 convolution on an [N, H, W, C_in] batch: per-pixel channel mix."""
    if weights.ndim != 2:
        raise ShapeError(f"pointwise weights must be [C_in, C_out], got {weights.shape}")
    if x.shape[3] != weights.shape[0]:
        raise ShapeError(f"input channels {x.shape[3]} do not match weight rows {weights.shape[0]}")
    return np.tensordot(x, weights, axes=([3], [0]))


def _check_image(x: Tensor) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected an [H, W, C] image, got shape {x.shape}")
    return x


def depthwise_conv(image: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Depthwise convolution of a single [H, W, C] image."""
    x = _check_image(image)
    return depthwise_nhwc(x[None], np.asarray(kernels, dtype=np.float64), stride, padding)[0]


def pointwise_conv(image: Tensor, weights: Tensor) -> Tensor:
    """1x1 convolution of a single [H, W, C_in] image to [H, W, C_out]."""
    x = _check_image(image)
    return pointwise_nhwc(x[None], np.asarray(weights, dtype=np.float64))[0]


def global_average_pool(image: Tensor) -> Tensor:
    """Mean over all pixels, per channel: [H, W, C] -> [C]."""
    x = _check_image(image)
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"cannot pool an empty image of shape {x.shape}")
    return x.mean(axis=(0, 1))


# ---------------------------------------------------------------------------
# Batch normalization.
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class BatchNormState:
    """Running per-channel statistics, updated in train mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(mean=np.zeros(channels), var=np.ones(channels))


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization of an [N, H, W, C] batch or [H, W, C] image.

    Train mode normalizes by the batch statistics and folds them into the
    running state with the given momentum; infer mode uses the running state
    as-is. Raises if any running variance is not positive.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, H, W, C] or [H, W, C], got {x.shape}")
    c = x.shape[3]
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    for name, v in (("scale", scale), ("shift", shift), ("state.mean", state.mean), ("state.var", state.var)):
        if v.shape != (c,):
            raise ShapeError(f"batch_norm {name} must have shape ({c},), got {v.shape}")
    if mode == "train":
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        state.mean = momentum * state.mean + (1.0 - momentum) * mean
        state.var = momentum * state.var + (1.0 - momentum) * var
    elif mode == "infer":
        if np.any(state.var <= 0):
            raise ValueError("batch_norm: running variance must be positive in infer mode")
        mean, var = state.mean, state.var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    out = (x - mean) / np.sqrt(var + BN_EPS) * scale + shift
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Inverted residual block.
# ---------------------------------------------------------------------------


@dataclass
class ConvBlockParams:
    """Parameters of one expand -> depthwise -> project block.

    The channel chain must be consistent: expand maps C_in to t*C_in,
    the depthwise kernels cover t*C_in channels, and project maps t*C_in
    to C_out. Batch-norm scale/shift/state come in stage order
    (expand, depthwise, project).
    """

    expand_weights: np.ndarray
    depthwise_kernels: np.ndarray
    project_weights: np.ndarray
    bn_scales: tuple
    bn_shifts: tuple
    bn_states: tuple
    stride: int = 1
    expansion: int = 6

    def __post_init__(self) -> None:
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise ValueError(f"expansion factor must be >= 1, got {self.expansion}")
        c_in, hidden = self.expand_weights.shape
        if hidden != c_in * self.expansion:
            raise ShapeError(
                f"expand weights map {c_in} -> {hidden}, expected {c_in} -> {c_in * self.expansion}"
            )
        if self.depthwise_kernels.shape[2] != hidden:
            raise ShapeError(
                f"depthwise kernels cover {self.depthwise_kernels.shape[2]} channels, expected {hidden}"
            )
        if self.project_weights.shape[0] != hidden:
            raise ShapeError(
                f"project weights take {self.project_weights.shape[0]} channels, expected {hidden}"
            )
        if not (len(self.bn_scales) == len(self.bn_shifts) == len(self.bn_states) == 3):
            raise ShapeError("inverted residual requires batch-norm parameters for all three stages")

    @property
    def channels_in(self) -> int:
        return self.expand_weights.shape[0]

    @property
    def channels_out(self) -> int:
        return self.project_weights.shape[1]


def inverted_residual(image: Tensor, params: ConvBlockParams, mode: str = "infer") -> Tensor:
    """Run one inverted residual block on a single [H, W, C] image.

    Stages: 1x1 expand + BN + ReLU6, depthwise 3x3 (block stride) + BN +
    ReLU6, then a linear 1x1 projection + BN. The input is added back iff
    stride is 1 and the channel count is preserved.
    """
    x = _check_image(image)
    if x.shape[2] != params.channels_in:
        raise ShapeError(f"input has {x.shape[2]} channels, block expects {params.channels_in}")
    out = pointwise_conv(x, params.expand_weights)
    out = batch_norm(out, params.bn_scales[0], params.bn_shifts[0], params.bn_states[0], mode)
    out = relu6(out)
    out = depthwise_conv(out, params.depthwise_kernels, stride=params.stride, padding="same")
    out = batch_norm(out, params.bn_scales[1], params.bn_shifts[1], params.bn_states[1], mode)
    out = relu6(out)
    out = pointwise_conv(out, params.project_weights)
    out = batch_norm(out, params.bn_scales[2], params.bn_shifts[2], params.bn_states[2], mode)
    if params.stride == 1 and params.channels_in == params.channels_out:
        out = out + x
    return out
