"""Parameterized layers built on the tensor ops.

A :class:`Module` owns tensors and child modules as plain attributes;
``named_params`` discovers them in attribute order, which makes parameter
registries deterministic for a fixed construction order. Convolutions that
feed a batch norm are bias-free; at eval time each norm can be folded into its
preceding convolution.

Initialization: convolution weights are drawn from a normal with standard
deviation ``1/sqrt(fan_in)`` and clipped to two standard deviations; norm
scales start at one, norm shifts and biases at zero.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .tensor import (
    Tensor,
    batchnorm2d,
    conv2d,
    depthwise_conv2d,
)

__all__ = [
    "Module",
    "Conv2d",
    "BatchNorm2d",
    "ConvBN",
    "trunc_normal_init",
]


def trunc_normal_init(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype
) -> np.ndarray:
    std = 1.0 / np.sqrt(fan_in)
    w = rng.standard_normal(shape) * std
    return np.clip(w, -2.0 * std, 2.0 * std).astype(dtype)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Module:
    """Base for parameterized components; discovers children by attribute."""

    training: bool = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield _join(prefix, name), value
            elif isinstance(value, Module):
                yield from value.named_params(_join(prefix, name))

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-learnable state that checkpoints must carry (running stats)."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(_join(prefix, name))

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.set_training(flag)

    def fold_norms(self) -> None:
        """Fold batch norms into preceding convs for inference (recursive)."""
        for value in vars(self).values():
            if isinstance(value, Module):
                value.fold_norms()


class Conv2d(Module):
    """Plain convolution, optionally depthwise, optionally biased."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        depthwise: bool = False,
        dtype=np.float32,
    ):
        if depthwise and in_channels != out_channels:
            raise ValueError("depthwise conv requires in_channels == out_channels")
        self.stride = stride
        self.padding = padding
        self.depthwise = depthwise
        k = kernel_size
        if depthwise:
            fan_in = k * k
            shape = (out_channels, 1, k, k)
        else:
            fan_in = in_channels * k * k
            shape = (out_channels, in_channels, k, k)
        self.weight = Tensor(trunc_normal_init(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = (
            Tensor(np.zeros((1, out_channels, 1, 1), dtype=dtype), requires_grad=True)
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.depthwise:
            return depthwise_conv2d(
                x, self.weight, self.bias, stride=self.stride, padding=self.padding
            )
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield _join(prefix, "weight"), self.weight
        if self.bias is not None:
            yield _join(prefix, "bias"), self.bias


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        yield _join(prefix, "running_mean"), self.running_mean
        yield _join(prefix, "running_var"), self.running_var


class ConvBN(Module):
    """Bias-free convolution followed by batch norm; foldable at eval time.

    ``fold_norms`` absorbs the norm into an equivalent biased convolution:
    ``w' = w * gamma / sqrt(var + eps)`` per output channel and
    ``b' = beta - mean * gamma / sqrt(var + eps)``. Folding only changes the
    forward path; the parameter registry is untouched.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        depthwise: bool = False,
        dtype=np.float32,
    ):
        self.conv = Conv2d(
            rng,
            in_channels,
            out_channels,
            kernel_size,
            stride=stride,
            padding=padding,
            bias=False,
            depthwise=depthwise,
            dtype=dtype,
        )
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self._folded_weight: Optional[Tensor] = None
        self._folded_bias: Optional[Tensor] = None

    def forward(self, x: Tensor) -> Tensor:
        if self._folded_weight is not None:
            if self.conv.depthwise:
                return depthwise_conv2d(
                    x,
                    self._folded_weight,
                    self._folded_bias,
                    stride=self.conv.stride,
                    padding=self.conv.padding,
                )
            return conv2d(
                x,
                self._folded_weight,
                self._folded_bias,
                stride=self.conv.stride,
                padding=self.conv.padding,
            )
        return self.bn(self.conv(x))

    def fold_norms(self) -> None:
        if self.training:
            raise RuntimeError("norm folding is an eval-time transform")
        if self._folded_weight is not None:
            return
        scale = self.bn.gamma.data.reshape(-1) / np.sqrt(self.bn.running_var + self.bn.eps)
        w = self.conv.weight.data * scale[:, None, None, None]
        b = self.bn.beta.data.reshape(-1) - self.bn.running_mean * scale
        dtype = self.conv.weight.dtype
        self._folded_weight = Tensor(w.astype(dtype, copy=False))
        self._folded_bias = Tensor(b.reshape(1, -1, 1, 1).astype(dtype, copy=False))
