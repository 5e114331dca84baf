"""Trainable layers over the convolution kernels, with backward passes.

Each layer caches what its backward sweep needs during forward, accumulates
parameter gradients in place, and returns the gradient with respect to its
input. Parameters and gradients are exposed through stable (name, array)
registries so the optimizer and the checkpoint writer can walk one flat
list; the arrays are mutated in place and never replaced.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .kernels import BN_EPS, BN_MOMENTUM, BatchNormState, same_padding
from .tensor import ShapeError


class Layer:
    """Common registry plumbing; subclasses fill params/grads/decay."""

    def __init__(self, name: str) -> None:
        self.name = name
        self._params: Dict[str, np.ndarray] = {}
        self._grads: Dict[str, np.ndarray] = {}
        self._decay: set = set()

    def _register(self, key: str, value: np.ndarray, decay: bool) -> np.ndarray:
        full = f"{self.name}.{key}"
        self._params[full] = value
        self._grads[full] = np.zeros_like(value)
        if decay:
            self._decay.add(full)
        return value

    def named_params(self) -> List[Tuple[str, np.ndarray]]:
        return list(self._params.items())

    def grad_for(self, name: str) -> np.ndarray:
        return self._grads[name]

    def is_decayed(self, name: str) -> bool:
        return name in self._decay

    def named_state(self) -> List[Tuple[str, np.ndarray]]:
        """Non-trainable tensors that still belong in a checkpoint."""
        return []

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PointwiseLayer(Layer):
    """1x1 convolution, no bias (normalization supplies the shift)."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.weights = self._register(
            "weights", rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in), decay=True
        )
        self._x: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[3] != self.weights.shape[0]:
            raise ShapeError(
                f"{self.name}: input has {x.shape[3]} channels, weights expect {self.weights.shape[0]}"
            )
        self._x = x
        return np.tensordot(x, self.weights, axes=([3], [0]))

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        self.grad_for(f"{self.name}.weights")[...] += np.tensordot(
            self._x, d_out, axes=([0, 1, 2], [0, 1, 2])
        )
        return np.tensordot(d_out, self.weights, axes=([3], [1]))


class DepthwiseLayer(Layer):
    """3x3 per-channel convolution with same padding and stride 1 or 2."""

    def __init__(self, name: str, channels: int, stride: int, rng: np.random.Generator, k: int = 3) -> None:
        super().__init__(name)
        self.stride = stride
        self.k = k
        self.kernels = self._register(
            "kernels", rng.standard_normal((k, k, channels)) * np.sqrt(2.0 / (k * k)), decay=True
        )
        self._x_pad: Optional[np.ndarray] = None
        self._crop: Tuple[int, int, int, int] = (0, 0, 0, 0)
        self._out_hw: Tuple[int, int] = (0, 0)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        k, s = self.k, self.stride
        if x.shape[3] != self.kernels.shape[2]:
            raise ShapeError(
                f"{self.name}: input has {x.shape[3]} channels, kernels cover {self.kernels.shape[2]}"
            )
        n, h, w, c = x.shape
        (pt, pb), (pl, pr) = same_padding(h, k, s), same_padding(w, k, s)
        x_pad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        out_h = (x_pad.shape[1] - k) // s + 1
        out_w = (x_pad.shape[2] - k) // s + 1
        out = np.zeros((n, out_h, out_w, c), dtype=np.float64)
        for p in range(k):
            for q in range(k):
                patch = x_pad[:, p : p + out_h * s : s, q : q + out_w * s : s, :]
                out += patch * self.kernels[p, q, :]
        self._x_pad = x_pad
        self._crop = (pt, h, pl, w)
        self._out_hw = (out_h, out_w)
        return out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        k, s = self.k, self.stride
        out_h, out_w = self._out_hw
        dk = self.grad_for(f"{self.name}.kernels")
        dx_pad = np.zeros_like(self._x_pad)
        for p in range(k):
            for q in range(k):
                patch = self._x_pad[:, p : p + out_h * s : s, q : q + out_w * s : s, :]
                dk[p, q, :] += (patch * d_out).sum(axis=(0, 1, 2))
                dx_pad[:, p : p + out_h * s : s, q : q + out_w * s : s, :] += d_out * self.kernels[p, q, :]
        pt, h, pl, w = self._crop
        return dx_pad[:, pt : pt + h, pl : pl + w, :]


class BatchNormLayer(Layer):
    """Per-channel normalization with learned scale/shift and running stats."""

    def __init__(self, name: str, channels: int) -> None:
        super().__init__(name)
        self.scale = self._register("scale", np.ones(channels), decay=False)
        self.shift = self._register("shift", np.zeros(channels), decay=False)
        self.state = BatchNormState.fresh(channels)
        self._x_hat: Optional[np.ndarray] = None
        self._ivar: Optional[np.ndarray] = None
        self._count = 0

    def named_state(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"{self.name}.running_mean", self.state.mean), (f"{self.name}.running_var", self.state.var)]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            self.state.mean[...] = BN_MOMENTUM * self.state.mean + (1.0 - BN_MOMENTUM) * mean
            self.state.var[...] = BN_MOMENTUM * self.state.var + (1.0 - BN_MOMENTUM) * var
            self._ivar = 1.0 / np.sqrt(var + BN_EPS)
            self._x_hat = (x - mean) * self._ivar
            self._count = x.shape[0] * x.shape[1] * x.shape[2]
            return self._x_hat * self.scale + self.shift
        if np.any(self.state.var <= 0):
            raise ValueError(f"{self.name}: running variance must be positive in infer mode")
        self._x_hat = None
        return (x - self.state.mean) / np.sqrt(self.state.var + BN_EPS) * self.scale + self.shift

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if self._x_hat is None:
            raise RuntimeError(f"{self.name}: backward requires a preceding train-mode forward")
        x_hat, ivar, m = self._x_hat, self._ivar, self._count
        self.grad_for(f"{self.name}.scale")[...] += (d_out * x_hat).sum(axis=(0, 1, 2))
        self.grad_for(f"{self.name}.shift")[...] += d_out.sum(axis=(0, 1, 2))
        d_sum = d_out.sum(axis=(0, 1, 2))
        dxhat_dot = (d_out * x_hat).sum(axis=(0, 1, 2))
        return (self.scale * ivar / m) * (m * d_out - d_sum - x_hat * dxhat_dot)


class Relu6Layer(Layer):
    """min(max(x, 0), 6); gradient passes only on the open linear region."""

    def __init__(self, name: str) -> None:
        super().__init__(name)
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        self._mask = (x > 0.0) & (x < 6.0)
        return np.clip(x, 0.0, 6.0)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        return d_out * self._mask


class InvertedResidualLayer(Layer):
    """Expand 1x1 + BN + ReLU6, depthwise 3x3 + BN + ReLU6, project 1x1 + BN.

    The input is added back when stride is 1 and the channel count is
    preserved. Normalization stages are omitted entirely when the network
    is built with batch_norm disabled.
    """

    def __init__(
        self,
        name: str,
        c_in: int,
        c_out: int,
        expansion: int,
        stride: int,
        rng: np.random.Generator,
        batch_norm: bool,
    ) -> None:
        super().__init__(name)
        hidden = c_in * expansion
        self.residual = stride == 1 and c_in == c_out
        self.stages: List[Layer] = [PointwiseLayer(f"{name}.expand", c_in, hidden, rng)]
        if batch_norm:
            self.stages.append(BatchNormLayer(f"{name}.expand_bn", hidden))
        self.stages.append(Relu6Layer(f"{name}.expand_act"))
        self.stages.append(DepthwiseLayer(f"{name}.depthwise", hidden, stride, rng))
        if batch_norm:
            self.stages.append(BatchNormLayer(f"{name}.depthwise_bn", hidden))
        self.stages.append(Relu6Layer(f"{name}.depthwise_act"))
        self.stages.append(PointwiseLayer(f"{name}.project", hidden, c_out, rng))
        if batch_norm:
            self.stages.append(BatchNormLayer(f"{name}.project_bn", c_out))

    def named_params(self) -> List[Tuple[str, np.ndarray]]:
        out: List[Tuple[str, np.ndarray]] = []
        for stage in self.stages:
            out.extend(stage.named_params())
        return out

    def grad_for(self, name: str) -> np.ndarray:
        for stage in self.stages:
            if name in stage._grads:
                return stage._grads[name]
        raise KeyError(name)

    def is_decayed(self, name: str) -> bool:
        return any(stage.is_decayed(name) for stage in self.stages)

    def named_state(self) -> List[Tuple[str, np.ndarray]]:
        out: List[Tuple[str, np.ndarray]] = []
        for stage in self.stages:
            out.extend(stage.named_state())
        return out

    def zero_grads(self) -> None:
        for stage in self.stages:
            stage.zero_grads()

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out = x
        for stage in self.stages:
            out = stage.forward(out, train)
        if self.residual:
            out = out + x
        return out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        dx = d_out
        for stage in reversed(self.stages):
            dx = stage.backward(dx)
        if self.residual:
            dx = dx + d_out
        return dx


class BridgeLayer(Layer):
    """Shared fully-connected map + ReLU applied at every spatial position.

    Turns the [N, h, w, C] feature map into the per-position vectors the
    recurrent stage consumes.
    """

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.weights = self._register(
            "weights", rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in), decay=True
        )
        self.bias = self._register("bias", np.zeros(c_out), decay=False)
        self._x: Optional[np.ndarray] = None
        self._mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if x.shape[3] != self.weights.shape[0]:
            raise ShapeError(
                f"{self.name}: feature map has {x.shape[3]} channels, weights expect {self.weights.shape[0]}"
            )
        self._x = x
        pre = np.tensordot(x, self.weights, axes=([3], [0])) + self.bias
        self._mask = pre > 0.0
        return np.maximum(pre, 0.0)

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d_pre = d_out * self._mask
        self.grad_for(f"{self.name}.weights")[...] += np.tensordot(
            self._x, d_pre, axes=([0, 1, 2], [0, 1, 2])
        )
        self.grad_for(f"{self.name}.bias")[...] += d_pre.sum(axis=(0, 1, 2))
        return np.tensordot(d_pre, self.weights, axes=([3], [1]))
