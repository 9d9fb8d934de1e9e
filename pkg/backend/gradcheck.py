# backend/gradcheck.py
"""
Finite-difference gradient checker.

Every differentiable op (and a whole residual block) is wrapped in a probe that
owns 64-bit copies of its inputs and parameters. The checker compares the
analytic gradient of sum(output * R), R fixed and random, with central
differences at randomly drawn entries. Entries whose perturbation changes a
ReLU mask or a max-pool winner are redrawn and counted as skipped.
"""

import logging
from typing import Callable, Dict, Optional, Union

import numpy as np

from backend.blocks import block_backward, block_forward, build_block
from backend.errors import ConfigurationError
from backend.models import BlockSpec, GradCheckReport
from backend.tensor_core import (
    SHADOW_FLOAT,
    ConvParams,
    Tensor,
    batch_norm,
    batch_norm_backward,
    conv2d_backward,
    conv2d_forward,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    max_pool2x2,
    max_pool2x2_backward,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_PROBES = 10
ERROR_FLOOR = 1e-8


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ERROR_FLOOR)


# --- 1. Probes ---


class OpProbe:
    """
    One op at a fixed random operating point.
    ``tensors`` are perturbed in place, so ``output`` must read them on every call.
    """

    name = "op"
    scalar = False

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: Dict[str, np.ndarray] = {}

    def output(self):
        raise NotImplementedError

    def gradients(self, upstream) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def signature(self) -> Optional[np.ndarray]:
        """Discrete state of the forward pass (masks, argmax); None for smooth ops."""
        return None

    def _normal(self, *shape) -> np.ndarray:
        return self.rng.standard_normal(shape).astype(SHADOW_FLOAT)


class ConvProbe(OpProbe):
    name = "conv2d"

    def __init__(self, rng, n=2, c=2, size=7, out=3, kernel=3, stride=2, dilation=2, padding=2):
        super().__init__(rng)
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.tensors = {
            "x": self._normal(n, c, size, size),
            "weight": self._normal(out, c, kernel, kernel),
            "bias": self._normal(1, out, 1, 1),
        }

    def _params(self) -> ConvParams:
        return ConvParams(weights=Tensor(self.tensors["weight"]), stride=self.stride, dilation=self.dilation,
                          padding=self.padding, bias=Tensor(self.tensors["bias"]))

    def output(self):
        return conv2d_forward(Tensor(self.tensors["x"]), self._params())[0].data

    def gradients(self, upstream):
        gx, gw, gb = conv2d_backward(Tensor(self.tensors["x"]), self._params(), Tensor(upstream))
        return {"x": gx.data, "weight": gw.data, "bias": gb.data}


class BatchNormProbe(OpProbe):
    name = "batch_norm"

    def __init__(self, rng, mode="train", shape=(4, 3, 3, 3)):
        super().__init__(rng)
        self.mode = mode
        c = shape[1]
        self.tensors = {
            "x": self._normal(*shape) * 2 + 1,
            "gamma": self.rng.uniform(0.5, 1.5, (1, c, 1, 1)),
            "beta": self._normal(1, c, 1, 1),
        }
        self.running_mean = self._normal(1, c, 1, 1)
        self.running_var = self.rng.uniform(0.5, 2.0, (1, c, 1, 1))

    def _forward(self):
        return batch_norm(Tensor(self.tensors["x"]), Tensor(self.tensors["gamma"]), Tensor(self.tensors["beta"]),
                          Tensor(self.running_mean), Tensor(self.running_var), mode=self.mode, update_stats=False)

    def output(self):
        return self._forward()[0].data

    def gradients(self, upstream):
        _, cache = self._forward()
        gx, gg, gb = batch_norm_backward(cache, Tensor(upstream))
        return {"x": gx.data, "gamma": gg.data, "beta": gb.data}


class FullyConnectedProbe(OpProbe):
    name = "fully_connected"

    def __init__(self, rng, n=3, d=5, classes=4):
        super().__init__(rng)
        self.tensors = {
            "x": self._normal(n, d, 1, 1),
            "weight": self._normal(classes, d, 1, 1),
            "bias": self._normal(1, classes, 1, 1),
        }

    def output(self):
        t = self.tensors
        return fully_connected(Tensor(t["x"]), Tensor(t["weight"]), Tensor(t["bias"])).data

    def gradients(self, upstream):
        t = self.tensors
        gx, gw, gb = fully_connected_backward(Tensor(t["x"]), Tensor(t["weight"]), Tensor(upstream), Tensor(t["bias"]))
        return {"x": gx.data, "weight": gw.data, "bias": gb.data}


class ReluProbe(OpProbe):
    name = "relu"

    def __init__(self, rng, shape=(2, 3, 4, 4)):
        super().__init__(rng)
        self.tensors = {"x": self._normal(*shape)}

    def output(self):
        return relu(Tensor(self.tensors["x"])).data

    def gradients(self, upstream):
        return {"x": relu_backward(relu(Tensor(self.tensors["x"])), Tensor(upstream)).data}

    def signature(self):
        return self.tensors["x"] > 0


class MaxPoolProbe(OpProbe):
    name = "max_pool2x2"

    def __init__(self, rng, shape=(2, 2, 4, 4)):
        super().__init__(rng)
        self.tensors = {"x": self._normal(*shape)}

    def output(self):
        return max_pool2x2(Tensor(self.tensors["x"]))[0].data

    def gradients(self, upstream):
        _, cache = max_pool2x2(Tensor(self.tensors["x"]))
        return {"x": max_pool2x2_backward(cache, Tensor(upstream)).data}

    def signature(self):
        return max_pool2x2(Tensor(self.tensors["x"]))[1].argmax


class GlobalAvgPoolProbe(OpProbe):
    name = "global_avg_pool"

    def __init__(self, rng, shape=(2, 3, 3, 3)):
        super().__init__(rng)
        self.tensors = {"x": self._normal(*shape)}

    def output(self):
        return global_avg_pool(Tensor(self.tensors["x"])).data

    def gradients(self, upstream):
        return {"x": global_avg_pool_backward(self.tensors["x"].shape, Tensor(upstream)).data}


class SoftmaxCrossEntropyProbe(OpProbe):
    name = "softmax_cross_entropy"
    scalar = True

    def __init__(self, rng, n=4, classes=5):
        super().__init__(rng)
        self.labels = self.rng.integers(0, classes, n)
        self.tensors = {"logits": self._normal(n, classes, 1, 1)}

    def output(self):
        return softmax_cross_entropy(Tensor(self.tensors["logits"]), self.labels)[0]

    def gradients(self, upstream):
        _, grad = softmax_cross_entropy(Tensor(self.tensors["logits"]), self.labels)
        return {"logits": grad.data * upstream}


class BlockProbe(OpProbe):
    """A full residual block in train mode; every conv weight, gamma and beta plus the input."""

    def __init__(self, rng, spec: BlockSpec, input_shape):
        super().__init__(rng)
        self.name = f"{spec.kind}_block"
        self.block = build_block(spec, "probe", seed=int(rng.integers(2 ** 31)), dtype=SHADOW_FLOAT)
        self.params = {n: p for n, p in self.block.parameters().items() if not p.buffer}
        for name, p in self.params.items():
            if name.endswith(".bn.gamma"):
                # the last BN starts at zero, which would hide every gradient behind it
                p.data[...] = self.rng.uniform(0.5, 1.5, p.shape)
            elif name.endswith(".bn.beta"):
                p.data[...] = self.rng.normal(0, 0.1, p.shape)
        self.tensors = {"x": self._normal(*input_shape)}
        self.tensors.update({name: p.data for name, p in self.params.items()})

    def output(self):
        return block_forward(self.block, Tensor(self.tensors["x"]), mode="train", keep_cache=False).data

    def gradients(self, upstream):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)
        block_forward(self.block, Tensor(self.tensors["x"]), mode="train", keep_cache=True)
        gx = block_backward(self.block, Tensor(upstream))
        grads = {"x": gx.data}
        grads.update({name: p.grad.copy() for name, p in self.params.items()})
        return grads

    def signature(self):
        block_forward(self.block, Tensor(self.tensors["x"]), mode="train", keep_cache=True)
        masks = [t.data > 0 for t in self.block._relu_outputs] + [self.block._output.data > 0]
        return np.concatenate([m.ravel() for m in masks])


OPS: Dict[str, Callable[[np.random.Generator], OpProbe]] = {
    "conv2d": lambda rng: ConvProbe(rng, stride=1, dilation=1, padding=1),
    "conv2d_dilated": lambda rng: ConvProbe(rng),
    "conv2d_single": lambda rng: ConvProbe(rng, n=1, c=1, size=5, out=1, stride=1, dilation=2, padding=0),
    "batch_norm": lambda rng: BatchNormProbe(rng, mode="train"),
    "batch_norm_eval": lambda rng: BatchNormProbe(rng, mode="eval"),
    "fully_connected": FullyConnectedProbe,
    "relu": ReluProbe,
    "max_pool2x2": MaxPoolProbe,
    "global_avg_pool": GlobalAvgPoolProbe,
    "softmax_cross_entropy": SoftmaxCrossEntropyProbe,
    "basic_block": lambda rng: BlockProbe(rng, BlockSpec.make("basic", 4, 4), (1, 4, 6, 6)),
    "basic_block_dilated": lambda rng: BlockProbe(rng, BlockSpec.make("basic", 4, 4, dilation=2), (1, 4, 6, 6)),
    "bottleneck_block": lambda rng: BlockProbe(rng, BlockSpec.make("bottleneck", 4, 8, stride=2), (2, 4, 6, 6)),
}


def make_probe(op: str, seed: int = 0) -> OpProbe:
    if op not in OPS:
        raise ConfigurationError(f"unknown op '{op}' (known: {', '.join(OPS)})")
    return OPS[op](np.random.default_rng(seed))


# --- 2. Checker ---


def grad_check(op: Union[str, OpProbe], probe_count: int = DEFAULT_PROBES, h: float = DEFAULT_STEP,
               seed: int = 0) -> GradCheckReport:
    """
    Central-difference check at ``probe_count`` random entries of every tensor the op
    differentiates. Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if probe_count < 1:
        raise ConfigurationError("probe_count must be >= 1")
    if h <= 0:
        raise ConfigurationError("step h must be positive")
    probe = make_probe(op, seed) if isinstance(op, str) else op
    rng = np.random.default_rng([seed, 1])

    base = probe.output()
    upstream = 1.0 if probe.scalar else rng.standard_normal(np.shape(base))

    def objective() -> float:
        out = probe.output()
        return float(out) if probe.scalar else float(np.sum(out * upstream))

    analytic = probe.gradients(upstream)
    base_signature = probe.signature()

    errors: Dict[str, float] = {}
    checked = skipped = 0
    for name, tensor in probe.tensors.items():
        worst, hits, attempts = 0.0, 0, 0
        while hits < probe_count and attempts < probe_count * 20:
            attempts += 1
            index = tuple(int(rng.integers(s)) for s in tensor.shape)
            original = tensor[index]
            tensor[index] = original + h
            plus, plus_sig = objective(), probe.signature()
            tensor[index] = original - h
            minus, minus_sig = objective(), probe.signature()
            tensor[index] = original
            if base_signature is not None and not (
                np.array_equal(plus_sig, base_signature) and np.array_equal(minus_sig, base_signature)
            ):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, relative_error(float(analytic[name][index]), numeric))
            hits += 1
        if hits < probe_count:
            logger.warning("%s: only %d of %d probes on %s avoided a kink", probe.name, hits, probe_count, name)
        errors[name] = worst
        checked += hits

    report = GradCheckReport(
        op=probe.name,
        max_relative_error=max(errors.values()) if errors else 0.0,
        errors=errors,
        probes=checked,
        skipped=skipped,
    )
    logger.info("grad_check %s: max rel err %.3e over %d probes (%d redrawn)",
                report.op, report.max_relative_error, checked, skipped)
    return report
