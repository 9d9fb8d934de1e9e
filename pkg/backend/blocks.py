# backend/blocks.py
"""
Residual building blocks.

H(x) = ReLU(F(x, {W_i}) + W_s x), post-activation layout with BN after every
convolution. Basic blocks stack two 3x3 convolutions; bottleneck blocks stack
1x1 -> 3x3 -> 1x1 with the 3x3 at OUT/4 channels. Dilation and stride live on
the 3x3 convolutions only.
"""

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from backend.errors import DimensionError
from backend.models import BlockSpec
from backend.tensor_core import (
    FLOAT,
    BatchNormCache,
    ConvCache,
    ConvParams,
    Parameter,
    Tensor,
    add,
    batch_norm,
    batch_norm_backward,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
)


def init_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, so a tensor's initial value depends only on (seed, name)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def he_normal(shape, seed: int, name: str, dtype=FLOAT) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    return (init_rng(seed, name).standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# --- 1. Conv + BN unit ---


@dataclass(eq=False)
class ConvBN:
    conv: ConvParams
    gamma: Parameter
    beta: Parameter
    running_mean: Parameter
    running_var: Parameter
    _input: Optional[Tensor] = field(default=None, repr=False)
    _conv_cache: Optional[ConvCache] = field(default=None, repr=False)
    _bn_cache: Optional[BatchNormCache] = field(default=None, repr=False)

    @classmethod
    def create(cls, name: str, in_channels: int, out_channels: int, kernel: int, seed: int,
               stride: int = 1, dilation: int = 1, padding: int = 0, zero_gamma: bool = False,
               dtype=FLOAT) -> "ConvBN":
        shape = (out_channels, in_channels, kernel, kernel)
        weights = Parameter(he_normal(shape, seed, f"{name}.weight", dtype), name=f"{name}.weight")
        per_channel = (1, out_channels, 1, 1)
        gamma = np.zeros(per_channel, dtype) if zero_gamma else np.ones(per_channel, dtype)
        return cls(
            conv=ConvParams(weights=weights, stride=stride, dilation=dilation, padding=padding),
            gamma=Parameter(gamma, name=f"{name}.bn.gamma"),
            beta=Parameter(np.zeros(per_channel, dtype), name=f"{name}.bn.beta"),
            running_mean=Parameter(np.zeros(per_channel, dtype), name=f"{name}.bn.running_mean", buffer=True),
            running_var=Parameter(np.ones(per_channel, dtype), name=f"{name}.bn.running_var", buffer=True),
        )

    @property
    def frozen(self) -> bool:
        return self.conv.weights.frozen

    def parameters(self) -> List[Parameter]:
        return [self.conv.weights, self.gamma, self.beta, self.running_mean, self.running_var]

    def forward(self, x: Tensor, mode: str, keep_cache: bool = True) -> Tensor:
        # frozen units normalize with their running statistics and leave them untouched
        bn_mode = "eval" if self.frozen else mode
        out, conv_cache = conv2d_forward(x, self.conv)
        out, bn_cache = batch_norm(out, self.gamma, self.beta, self.running_mean, self.running_var, mode=bn_mode)
        if keep_cache:
            self._input, self._conv_cache, self._bn_cache = x, conv_cache, bn_cache
        return out

    def backward(self, upstream: Tensor) -> Tensor:
        if self._bn_cache is None:
            raise RuntimeError("backward called before a cached forward pass")
        grad, grad_gamma, grad_beta = batch_norm_backward(self._bn_cache, upstream)
        if not self.frozen:
            self.gamma.accumulate(grad_gamma.data.astype(self.gamma.dtype, copy=False))
            self.beta.accumulate(grad_beta.data.astype(self.beta.dtype, copy=False))
        grad_x, _, _ = conv2d_backward(self._input, self.conv, grad, cache=self._conv_cache)
        return grad_x

    def clear_cache(self):
        self._input = self._conv_cache = self._bn_cache = None


# --- 2. Residual Block ---


@dataclass(eq=False)
class ResidualBlock:
    spec: BlockSpec
    name: str
    layers: List[ConvBN]
    shortcut: Optional[ConvBN] = None
    _relu_outputs: List[Tensor] = field(default_factory=list, repr=False)
    _output: Optional[Tensor] = field(default=None, repr=False)

    def parameters(self) -> Dict[str, Parameter]:
        units = list(self.layers) + ([self.shortcut] if self.shortcut is not None else [])
        return {p.name: p for unit in units for p in unit.parameters()}

    def num_parameters(self) -> int:
        """Trainable entries (conv weights, BN gamma/beta); running statistics excluded."""
        return sum(p.data.size for p in self.parameters().values() if not p.buffer)


def build_block(spec: BlockSpec, name: str, seed: int = 0, dtype=FLOAT) -> ResidualBlock:
    d = spec.dilation
    if spec.kind == "basic":
        layers = [
            ConvBN.create(f"{name}.conv1", spec.in_planes, spec.out_planes, 3, seed,
                          stride=spec.stride, dilation=d, padding=d, dtype=dtype),
            ConvBN.create(f"{name}.conv2", spec.out_planes, spec.out_planes, 3, seed,
                          dilation=d, padding=d, zero_gamma=True, dtype=dtype),
        ]
    else:
        mid = spec.mid_planes
        layers = [
            ConvBN.create(f"{name}.conv1", spec.in_planes, mid, 1, seed, dtype=dtype),
            ConvBN.create(f"{name}.conv2", mid, mid, 3, seed,
                          stride=spec.stride, dilation=d, padding=d, dtype=dtype),
            ConvBN.create(f"{name}.conv3", mid, spec.out_planes, 1, seed, zero_gamma=True, dtype=dtype),
        ]
    shortcut = None
    if spec.projection == "linear":
        shortcut = ConvBN.create(f"{name}.shortcut", spec.in_planes, spec.out_planes, 1, seed,
                                 stride=spec.stride, dtype=dtype)
    return ResidualBlock(spec=spec, name=name, layers=layers, shortcut=shortcut)


def block_forward(block: ResidualBlock, x: Tensor, mode: str = "train", keep_cache: bool = True) -> Tensor:
    """ReLU(F(x) + W_s x)."""
    if x.shape[1] != block.spec.in_planes:
        raise DimensionError(
            f"block {block.name} expects {block.spec.in_planes} channels, got {x.shape[1]}", axis="channel"
        )
    relu_outputs = []
    h = x
    for i, unit in enumerate(block.layers):
        h = unit.forward(h, mode, keep_cache)
        if i < len(block.layers) - 1:
            h = relu(h)
            relu_outputs.append(h)
    residual = block.shortcut.forward(x, mode, keep_cache) if block.shortcut is not None else x
    out = relu(add(h, residual))
    if keep_cache:
        block._relu_outputs, block._output = relu_outputs, out
    return out


def block_backward(block: ResidualBlock, upstream: Tensor) -> Tensor:
    """Back-propagates through both branches; returns the gradient w.r.t. the block input."""
    if block._output is None:
        raise RuntimeError(f"block {block.name}: backward called before a cached forward pass")
    if upstream.shape != block._output.shape:
        raise DimensionError(
            f"upstream gradient {upstream.shape} != block output {block._output.shape}", axis="upstream"
        )
    grad = relu_backward(block._output, upstream)
    residual_grad = block.shortcut.backward(grad) if block.shortcut is not None else grad

    h = grad
    for i in range(len(block.layers) - 1, -1, -1):
        if i < len(block.layers) - 1:
            h = relu_backward(block._relu_outputs[i], h)
        h = block.layers[i].backward(h)
    return add(h, residual_grad)


def set_block_frozen(block: ResidualBlock, frozen: bool):
    for p in block.parameters().values():
        set_parameter_frozen(p, frozen)


def set_parameter_frozen(p: Parameter, frozen: bool):
    p.frozen = frozen
    if p.buffer:
        return
    # frozen parameters own no grad buffer, so nothing accumulates into them
    p.grad = None if frozen else np.zeros_like(p.data)


def clear_block_cache(block: ResidualBlock):
    for unit in list(block.layers) + ([block.shortcut] if block.shortcut is not None else []):
        unit.clear_cache()
    block._relu_outputs, block._output = [], None


def count_block_parameters(spec: BlockSpec) -> int:
    """Analytic trainable-parameter count of a block (conv weights plus BN gamma/beta)."""
    out, inp = spec.out_planes, spec.in_planes
    if spec.kind == "basic":
        total = 9 * out * inp + 9 * out * out + 2 * (2 * out)
    else:
        mid = spec.mid_planes
        total = inp * mid + 9 * mid * mid + mid * out + 2 * (2 * mid + out)
    if spec.projection == "linear":
        total += inp * out + 2 * out
    return total
