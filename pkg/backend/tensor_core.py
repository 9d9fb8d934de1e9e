# backend/tensor_core.py
"""
Dense 4-D tensors and the differentiable operations the network is built from.

Every op comes as a forward/backward pair. Forward functions never modify their
inputs; backward functions return fresh gradient tensors and, where a parameter
already owns a grad buffer, add their contribution into it.

Layout is always (n, c, h, w). Parameters that are not naturally 4-D are stored
with trailing unit axes: FC weights as (N, D, 1, 1), per-channel vectors as
(1, C, 1, 1).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from backend.errors import ConfigurationError, DimensionError, DomainError, NumericError

logger = logging.getLogger(__name__)

FLOAT = np.float32
SHADOW_FLOAT = np.float64  # grad-check only

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

AXES = ("batch", "channel", "height", "width")


# --- 1. Tensor Types ---


@dataclass(eq=False)
class Tensor:
    data: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(FLOAT)
        if data.ndim != 4:
            raise DimensionError(f"tensor '{self.name}' must be 4-D, got {data.ndim}-D", axis="ndim")
        for axis, size in zip(AXES, data.shape):
            if size <= 0:
                raise DimensionError(f"tensor '{self.name}' has empty {axis} axis", axis=axis)
        self.data = np.ascontiguousarray(data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != data shape {self.data.shape}", axis="grad")

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, contribution: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += contribution

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), name=self.name)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=FLOAT, name: str = "") -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype), name=name)


@dataclass(eq=False)
class Parameter(Tensor):
    """A named network tensor. Buffers (BN running stats) are stored but never trained."""

    frozen: bool = False
    buffer: bool = False

    def __post_init__(self):
        super().__post_init__()
        if self.grad is None and not self.buffer:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> "Parameter":
        return Parameter(self.data.astype(dtype), name=self.name, frozen=self.frozen, buffer=self.buffer)


@dataclass(eq=False)
class ConvParams:
    weights: Tensor  # (out, in, kh, kw)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    bias: Optional[Tensor] = None  # (1, out, 1, 1)

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {self.padding}")
        if self.dilation > 2:
            logger.warning("dilation %d is outside the {1, 2} range used by the architecture", self.dilation)
        if self.bias is not None and self.bias.shape != (1, self.out_channels, 1, 1):
            raise DimensionError("bias must have shape (1, out, 1, 1)", axis="channel")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class PoolCache:
    input_shape: Tuple[int, int, int, int]
    argmax: np.ndarray  # (n, c, h/2, w/2) index into the 2x2 window


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray  # (1, c, 1, 1)
    gamma: np.ndarray
    mode: str


@dataclass
class ConvCache:
    cols: np.ndarray  # (n, c*kh*kw, oh*ow)
    input_shape: Tuple[int, int, int, int]
    output_hw: Tuple[int, int] = field(default=(0, 0))


# --- 2. Helpers ---


def require_finite(array: np.ndarray, what: str):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")


def conv_output_size(size: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    """floor((size + 2*pad - ((k-1)*d + 1)) / s) + 1, or DimensionError if the kernel does not fit."""
    extent = (kernel - 1) * dilation + 1
    padded = size + 2 * padding
    if extent > padded:
        raise DimensionError(f"effective kernel extent {extent} exceeds padded input {padded}")
    return (padded - extent) // stride + 1


def _check_conv_input(x: Tensor, p: ConvParams) -> Tuple[int, int]:
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise DimensionError(f"input has {c} channels, convolution expects {p.in_channels}", axis="channel")
    kh, kw = p.kernel
    try:
        oh = conv_output_size(h, kh, p.stride, p.dilation, p.padding)
    except DimensionError as e:
        raise DimensionError(str(e), axis="height") from None
    try:
        ow = conv_output_size(w, kw, p.stride, p.dilation, p.padding)
    except DimensionError as e:
        raise DimensionError(str(e), axis="width") from None
    return oh, ow


def im2col(x: np.ndarray, kernel: Tuple[int, int], stride: int, dilation: int, padding: int,
           out_hw: Tuple[int, int]) -> np.ndarray:
    """Gathers dilated patches into (n, c, kh, kw, oh, ow)."""
    n, c = x.shape[:2]
    kh, kw = kernel
    oh, ow = out_hw
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            cols[:, :, i, j] = xp[:, :, top:top + stride * (oh - 1) + 1:stride,
                                  left:left + stride * (ow - 1) + 1:stride]
    return cols


def col2im(cols: np.ndarray, input_shape: Tuple[int, int, int, int], stride: int, dilation: int,
           padding: int) -> np.ndarray:
    """Adjoint of im2col: scatters (n, c, kh, kw, oh, ow) back onto the input grid."""
    n, c, h, w = input_shape
    _, _, kh, kw, oh, ow = cols.shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        top = i * dilation
        for j in range(kw):
            left = j * dilation
            dxp[:, :, top:top + stride * (oh - 1) + 1:stride,
                left:left + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


# --- 3. Convolution ---


def conv2d_forward(x: Tensor, p: ConvParams) -> Tuple[Tensor, ConvCache]:
    oh, ow = _check_conv_input(x, p)
    require_finite(x.data, "conv2d input")
    n = x.shape[0]
    cols = im2col(x.data, p.kernel, p.stride, p.dilation, p.padding, (oh, ow)).reshape(n, -1, oh * ow)
    w2 = p.weights.data.reshape(p.out_channels, -1).astype(x.dtype, copy=False)
    out = np.matmul(w2, cols)
    if p.bias is not None:
        out += p.bias.data.reshape(1, -1, 1).astype(x.dtype, copy=False)
    out = out.reshape(n, p.out_channels, oh, ow)
    require_finite(out, "conv2d output")
    return Tensor(out), ConvCache(cols=cols, input_shape=x.shape, output_hw=(oh, ow))


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """y(p) = sum over the dilated 3x3 (or k x k) grid of w(d) * x(p + d), plus bias."""
    return conv2d_forward(x, p)[0]


def conv2d_direct(x: Tensor, p: ConvParams) -> Tensor:
    """Direct nested-loop convolution. Slow; the reference the patch-gather path must agree with."""
    oh, ow = _check_conv_input(x, p)
    require_finite(x.data, "conv2d input")
    n = x.shape[0]
    kh, kw = p.kernel
    s, d, pad = p.stride, p.dilation, p.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    weights = p.weights.data.astype(x.dtype, copy=False)
    out = np.zeros((n, p.out_channels, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(p.out_channels):
            for r in range(oh):
                for q in range(ow):
                    window = xp[b, :, r * s:r * s + (kh - 1) * d + 1:d, q * s:q * s + (kw - 1) * d + 1:d]
                    out[b, o, r, q] = np.sum(weights[o] * window)
            if p.bias is not None:
                out[b, o] += p.bias.data[0, o, 0, 0]
    return Tensor(out)


def conv2d_backward(x: Tensor, p: ConvParams, upstream: Tensor,
                    cache: Optional[ConvCache] = None) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """
    Returns (grad_x, grad_w, grad_b) for one upstream gradient.
    The weight/bias contributions are also added into their grad buffers when allocated.
    """
    oh, ow = _check_conv_input(x, p)
    n = x.shape[0]
    if upstream.shape != (n, p.out_channels, oh, ow):
        raise DimensionError(
            f"upstream gradient {upstream.shape} != conv output {(n, p.out_channels, oh, ow)}",
            axis="upstream",
        )
    if cache is None:
        cols = im2col(x.data, p.kernel, p.stride, p.dilation, p.padding, (oh, ow)).reshape(n, -1, oh * ow)
    else:
        cols = cache.cols

    dout = upstream.data.reshape(n, p.out_channels, oh * ow)
    grad_w = np.tensordot(dout, cols, axes=([0, 2], [0, 2])).reshape(p.weights.shape)
    w2 = p.weights.data.reshape(p.out_channels, -1).astype(upstream.dtype, copy=False)
    dcols = np.matmul(w2.T, dout)
    kh, kw = p.kernel
    grad_x = col2im(dcols.reshape(n, p.in_channels, kh, kw, oh, ow), x.shape, p.stride, p.dilation, p.padding)

    grad_w = grad_w.astype(p.weights.dtype, copy=False)
    if p.weights.grad is not None:
        p.weights.grad += grad_w
    grad_b = None
    if p.bias is not None:
        grad_b = dout.sum(axis=(0, 2)).reshape(1, -1, 1, 1).astype(p.bias.dtype, copy=False)
        if p.bias.grad is not None:
            p.bias.grad += grad_b
        grad_b = Tensor(grad_b)
    return Tensor(grad_x), Tensor(grad_w), grad_b


# --- 4. Pooling ---


def max_pool2x2(x: Tensor) -> Tuple[Tensor, PoolCache]:
    n, c, h, w = x.shape
    if h % 2:
        raise DimensionError(f"max_pool2x2 needs even height, got {h}", axis="height")
    if w % 2:
        raise DimensionError(f"max_pool2x2 needs even width, got {w}", axis="width")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return Tensor(out), PoolCache(input_shape=x.shape, argmax=argmax)


def max_pool2x2_backward(cache: PoolCache, upstream: Tensor) -> Tensor:
    n, c, h, w = cache.input_shape
    if upstream.shape != (n, c, h // 2, w // 2):
        raise DimensionError("upstream gradient does not match pooled shape", axis="upstream")
    windows = np.zeros((n, c, h // 2, w // 2, 4), dtype=upstream.dtype)
    np.put_along_axis(windows, cache.argmax[..., None], upstream.data[..., None], axis=-1)
    grad = windows.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return Tensor(grad)


def global_avg_pool(x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    return Tensor(x.data.sum(axis=(2, 3), keepdims=True) / (h * w))


def global_avg_pool_backward(input_shape: Tuple[int, int, int, int], upstream: Tensor) -> Tensor:
    n, c, h, w = input_shape
    if upstream.shape != (n, c, 1, 1):
        raise DimensionError("upstream gradient does not match pooled shape", axis="upstream")
    return Tensor(np.broadcast_to(upstream.data / (h * w), input_shape).copy())


# --- 5. Normalization & Activations ---


def _per_channel(t: Tensor, channels: int, what: str) -> np.ndarray:
    if t.shape != (1, channels, 1, 1):
        raise DimensionError(f"{what} must have shape (1, {channels}, 1, 1), got {t.shape}", axis="channel")
    return t.data


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: str = "train", momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
               update_stats: bool = True) -> Tuple[Tensor, BatchNormCache]:
    """
    Train mode normalizes with batch statistics and (if update_stats) moves the running
    statistics by an exponential average; eval mode uses the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    g = _per_channel(gamma, c, "gamma").astype(x.dtype, copy=False)
    b = _per_channel(beta, c, "beta").astype(x.dtype, copy=False)
    rm = _per_channel(running_mean, c, "running_mean")
    rv = _per_channel(running_var, c, "running_var")

    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        if update_stats:
            unbiased = var * (count / (count - 1)) if count > 1 else var
            rm *= 1 - momentum
            rm += momentum * mean.astype(rm.dtype)
            rv *= 1 - momentum
            rv += momentum * unbiased.astype(rv.dtype)
    else:
        mean = rm.astype(x.dtype, copy=False)
        var = rv.astype(x.dtype, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = g * xhat + b
    require_finite(out, "batch_norm output")
    return Tensor(out), BatchNormCache(xhat=xhat, inv_std=inv_std, gamma=g, mode=mode)


def batch_norm_backward(cache: BatchNormCache, upstream: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    dout = upstream.data
    if dout.shape != cache.xhat.shape:
        raise DimensionError("upstream gradient does not match batch_norm output", axis="upstream")
    grad_gamma = (dout * cache.xhat).sum(axis=(0, 2, 3), keepdims=True)
    grad_beta = dout.sum(axis=(0, 2, 3), keepdims=True)
    dxhat = dout * cache.gamma
    if cache.mode == "eval":
        grad_x = dxhat * cache.inv_std
    else:
        count = dout.shape[0] * dout.shape[2] * dout.shape[3]
        grad_x = (cache.inv_std / count) * (
            count * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - cache.xhat * (dxhat * cache.xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    return Tensor(grad_x), Tensor(grad_gamma), Tensor(grad_beta)


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(output: Tensor, upstream: Tensor) -> Tensor:
    """Uses the forward output as the mask (output > 0 iff input > 0)."""
    return Tensor(np.where(output.data > 0, upstream.data, 0).astype(upstream.dtype, copy=False))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        axis = next(name for name, x, y in zip(AXES, a.shape, b.shape) if x != y)
        raise DimensionError(f"cannot add {a.shape} and {b.shape}", axis=axis)
    return Tensor(a.data + b.data)


def concat_channels(parts: List[Tensor]) -> Tensor:
    return Tensor(np.concatenate([p.data for p in parts], axis=1))


# --- 6. Classifier Head ---


def fully_connected(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """(n, D, 1, 1) x (N, D, 1, 1) -> (n, N, 1, 1)."""
    n, d, h, w = x.shape
    if (h, w) != (1, 1):
        raise DimensionError(f"fully_connected expects (n, D, 1, 1) input, got {x.shape}", axis="height")
    if weights.shape[1:] != (d, 1, 1):
        raise DimensionError(f"input has {d} features, weights expect {weights.shape[1]}", axis="channel")
    out = x.data.reshape(n, d) @ weights.data.reshape(weights.shape[0], d).T.astype(x.dtype, copy=False)
    if bias is not None:
        out = out + bias.data.reshape(1, -1).astype(x.dtype, copy=False)
    return Tensor(out.reshape(n, -1, 1, 1))


def fully_connected_backward(x: Tensor, weights: Tensor, upstream: Tensor,
                             bias: Optional[Tensor] = None) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    n, d = x.shape[:2]
    classes = weights.shape[0]
    if upstream.shape != (n, classes, 1, 1):
        raise DimensionError("upstream gradient does not match FC output", axis="upstream")
    dout = upstream.data.reshape(n, classes)
    grad_x = dout @ weights.data.reshape(classes, d).astype(dout.dtype, copy=False)
    grad_w = (dout.T @ x.data.reshape(n, d)).reshape(weights.shape).astype(weights.dtype, copy=False)
    if weights.grad is not None:
        weights.grad += grad_w
    grad_b = None
    if bias is not None:
        grad_b = dout.sum(axis=0).reshape(bias.shape).astype(bias.dtype, copy=False)
        if bias.grad is not None:
            bias.grad += grad_b
        grad_b = Tensor(grad_b)
    return Tensor(grad_x.reshape(n, d, 1, 1)), Tensor(grad_w), grad_b


def softmax(logits: Tensor) -> np.ndarray:
    z = logits.data.reshape(logits.shape[0], -1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tuple[float, Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n, classes = logits.shape[:2]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for batch of {n}", axis="batch")
    if np.any(labels < 0) or np.any(labels >= classes):
        bad = int(labels[(labels < 0) | (labels >= classes)][0])
        raise DomainError(f"label {bad} outside [0, {classes})")
    z = logits.data.reshape(n, classes)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, Tensor(grad.reshape(logits.shape).astype(logits.dtype, copy=False))
