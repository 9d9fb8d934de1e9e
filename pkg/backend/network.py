# backend/network.py
"""
Two-pathway residual network.

conv1+pool1 and conv2_x..conv4_x form a shared trunk. Two pathways consume the
conv4_x output: conv5_1_x (stride 2, dilation 1) and conv5_2_x (stride 1,
dilation 2). Each active pathway is globally average-pooled; the pooled vectors
are concatenated (conv5_1 first) and fed to one FC layer. With only conv5_1_x
active the topology is the standard single-pathway ResNet.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from backend.blocks import (
    ConvBN,
    ResidualBlock,
    block_backward,
    block_forward,
    build_block,
    clear_block_cache,
    count_block_parameters,
    init_rng,
    set_block_frozen,
    set_parameter_frozen,
)
from backend.errors import ConfigurationError, DimensionError
from backend.features_svm import FeatureVector
from backend.models import ArchitectureReport, BlockSpec, GroupReport, NetworkConfig
from backend.tensor_core import (
    FLOAT,
    Parameter,
    PoolCache,
    Tensor,
    concat_channels,
    conv_output_size,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
    max_pool2x2,
    max_pool2x2_backward,
    relu,
    relu_backward,
)
from data.architecture_registry import (
    GROUPS,
    PATHWAY_GROUPS,
    STEM_KERNEL,
    STEM_PADDING,
    STEM_STRIDE,
    block_label,
    canonical_group,
    get_group,
)

logger = logging.getLogger(__name__)

MIN_INPUT = 64
BLOCK_GROUPS = ["conv2_x", "conv3_x", "conv4_x"]


# --- 1. Planning (pure functions of the config) ---


def group_out_planes(config: NetworkConfig, group: str) -> int:
    entry = get_group(group)
    label = entry["basic"] if config.block_kind == "basic" else entry["bottleneck"]
    return config.channels(label[1])


def plan_blocks(config: NetworkConfig) -> Dict[str, List[BlockSpec]]:
    """Block specs per group, with IN chained from the previous group's OUT."""
    counts = dict(zip(["conv2_x", "conv3_x", "conv4_x", "conv5_x"], config.block_counts))
    kind = config.block_kind
    plans: Dict[str, List[BlockSpec]] = {}
    in_planes = group_out_planes(config, "conv1")
    for group in BLOCK_GROUPS:
        plans[group] = _group_specs(kind, in_planes, group_out_planes(config, group),
                                    get_group(group)["stride"], 1, counts[group])
        in_planes = plans[group][-1].out_planes
    for group in config.active_pathways:
        entry = get_group(group)
        plans[group] = _group_specs(kind, in_planes, group_out_planes(config, group),
                                    entry["stride"], entry["dilation"], counts["conv5_x"])
    return plans


def _group_specs(kind: str, in_planes: int, out_planes: int, stride: int, dilation: int,
                 count: int) -> List[BlockSpec]:
    specs = [BlockSpec.make(kind, in_planes, out_planes, stride, dilation)]
    specs += [BlockSpec.make(kind, out_planes, out_planes, 1, dilation) for _ in range(count - 1)]
    return specs


def plan_output_sizes(config: NetworkConfig) -> Dict[str, Tuple[int, int]]:
    """
    Spatial output size per group. Raises ConfigurationError naming the first group
    whose output is odd before pooling or smaller than its minimum extent.
    """
    sizes: Dict[str, Tuple[int, int]] = {}
    h, w = config.input_size
    try:
        h = conv_output_size(h, STEM_KERNEL, STEM_STRIDE, 1, STEM_PADDING)
        w = conv_output_size(w, STEM_KERNEL, STEM_STRIDE, 1, STEM_PADDING)
    except DimensionError as e:
        raise ConfigurationError(f"group conv1: {e}") from None
    if h % 2 or w % 2:
        raise ConfigurationError(f"group conv1: pooling input {h}x{w} must have even sides")
    sizes["conv1"] = (h // 2, w // 2)

    def after_blocks(hw, stride, dilation):
        # the 3x3 convolution carries stride and dilation; 1x1 layers keep the size
        return tuple(conv_output_size(s, 3, stride, dilation, dilation) for s in hw)

    trunk = sizes["conv1"]
    for group in BLOCK_GROUPS:
        trunk = after_blocks(trunk, get_group(group)["stride"], 1)
        sizes[group] = trunk
    for group in PATHWAY_GROUPS:
        entry = get_group(group)
        sizes[group] = after_blocks(sizes["conv4_x"], entry["stride"], entry["dilation"])

    for entry in GROUPS:
        group = entry["group"]
        minimum = entry["output_size_224"] * MIN_INPUT // 224
        if min(sizes[group]) < minimum:
            raise ConfigurationError(
                f"input {config.input_size[0]}x{config.input_size[1]} too small: group {group} "
                f"would output {sizes[group][0]}x{sizes[group][1]} (minimum side {minimum}, input >= {MIN_INPUT})"
            )
    return sizes


def _receptive_fields(config: NetworkConfig, plans: Dict[str, List[BlockSpec]]) -> Dict[str, int]:
    """Receptive field at each group's output: rf += (k-1)*d*jump; jump *= s."""
    def compose(rf, jump, layers):
        for k, s, d in layers:
            rf += (k - 1) * d * jump
            jump *= s
        return rf, jump

    def block_layers(spec: BlockSpec):
        d = spec.dilation
        if spec.kind == "basic":
            return [(3, spec.stride, d), (3, 1, d)]
        return [(1, 1, 1), (3, spec.stride, d), (1, 1, 1)]

    fields: Dict[str, int] = {}
    rf, jump = compose(1, 1, [(STEM_KERNEL, STEM_STRIDE, 1), (2, 2, 1)])
    fields["conv1"] = rf
    for group in BLOCK_GROUPS:
        for spec in plans[group]:
            rf, jump = compose(rf, jump, block_layers(spec))
        fields[group] = rf
    trunk_rf, trunk_jump = rf, jump
    for group in config.active_pathways:
        rf, jump = trunk_rf, trunk_jump
        for spec in plans[group]:
            rf, jump = compose(rf, jump, block_layers(spec))
        fields[group] = rf
    return fields


def inspect(config: NetworkConfig) -> ArchitectureReport:
    """Per-group output size, dilation, receptive field and parameter count, without building."""
    sizes = plan_output_sizes(config)
    plans = plan_blocks(config)
    fields = _receptive_fields(config, plans)
    stem_out = group_out_planes(config, "conv1")

    rows = [GroupReport(
        group="conv1",
        block=f"[7x7, {stem_out}]; Max Pooling",
        output_size=sizes["conv1"],
        stride=4,
        dilation=1,
        receptive_field=fields["conv1"],
        parameters=STEM_KERNEL * STEM_KERNEL * 3 * stem_out + 2 * stem_out,
    )]
    for group in BLOCK_GROUPS + config.active_pathways:
        specs = plans[group]
        entry = get_group(group)
        label = entry["basic"] if config.block_kind == "basic" else entry["bottleneck"]
        rows.append(GroupReport(
            group=group,
            block=block_label(config.block_kind, config.channels(label[0]), config.channels(label[1]), len(specs)),
            output_size=sizes[group],
            stride=entry["stride"],
            dilation=entry["dilation"],
            receptive_field=fields[group],
            parameters=sum(count_block_parameters(s) for s in specs),
        ))

    widths = [plans[g][-1].out_planes for g in config.active_pathways]
    representation = sum(widths)
    fc = representation * config.num_classes + config.num_classes
    return ArchitectureReport(
        depth=config.depth,
        input_size=config.input_size,
        pathways=config.pathways,
        groups=rows,
        total_parameters=sum(r.parameters for r in rows) + fc,
        representation_length=representation,
        pathway_boundary=widths[0] if config.pathways == "both" else (
            representation if config.pathways == "conv5_1_only" else 0),
    )


# --- 2. Network ---


@dataclass(eq=False)
class ResNetTP:
    config: NetworkConfig
    stem: ConvBN
    groups: Dict[str, List[ResidualBlock]]
    fc_weight: Parameter
    fc_bias: Parameter
    frozen_groups: Set[str] = field(default_factory=set)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def pathway_widths(self) -> List[int]:
        return [self.groups[g][-1].spec.out_planes for g in self.config.active_pathways]

    @property
    def pathway_boundary(self) -> int:
        """Index where the conv5_2 part of the representation starts."""
        if self.config.pathways == "conv5_2_only":
            return 0
        return self.pathway_widths[0]

    @property
    def representation_length(self) -> int:
        return sum(self.pathway_widths)

    def group_names(self) -> List[str]:
        return ["conv1"] + list(self.groups) + ["fc"]

    def group_parameters(self, group: str) -> Dict[str, Parameter]:
        if group == "conv1":
            return {p.name: p for p in self.stem.parameters()}
        if group == "fc":
            return {p.name: p for p in (self.fc_weight, self.fc_bias)}
        out: Dict[str, Parameter] = {}
        for block in self.groups[group]:
            out.update(block.parameters())
        return out

    def parameters(self) -> Dict[str, Parameter]:
        """Every named tensor, running statistics included, in a stable order."""
        out: Dict[str, Parameter] = {}
        for group in self.group_names():
            out.update(self.group_parameters(group))
        return out

    def trainable_parameters(self) -> Dict[str, Parameter]:
        return {n: p for n, p in self.parameters().items() if not p.buffer and not p.frozen}

    def zero_grad(self):
        for p in self.trainable_parameters().values():
            p.grad[...] = 0

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values() if not p.buffer)


def build(config: NetworkConfig, dtype=FLOAT) -> ResNetTP:
    plan_output_sizes(config)
    seed = config.seed
    stem_out = group_out_planes(config, "conv1")
    stem = ConvBN.create("conv1", 3, stem_out, STEM_KERNEL, seed, stride=STEM_STRIDE,
                         padding=STEM_PADDING, dtype=dtype)
    groups = {
        group: [build_block(spec, f"{group}.{i}", seed, dtype) for i, spec in enumerate(specs)]
        for group, specs in plan_blocks(config).items()
    }
    width = sum(groups[g][-1].spec.out_planes for g in config.active_pathways)
    fc_weight, fc_bias = _fc_parameters(config.num_classes, width, seed, dtype)
    net = ResNetTP(config=config, stem=stem, groups=groups, fc_weight=fc_weight, fc_bias=fc_bias)
    logger.debug("built depth-%d network (%s), %d parameters", config.depth, config.pathways, net.num_parameters())
    return net


def _fc_parameters(classes: int, width: int, seed: int, dtype) -> Tuple[Parameter, Parameter]:
    bound = 1.0 / np.sqrt(width)
    weight = init_rng(seed, "fc.weight").uniform(-bound, bound, (classes, width, 1, 1)).astype(dtype)
    return (
        Parameter(weight, name="fc.weight"),
        Parameter(np.zeros((1, classes, 1, 1), dtype), name="fc.bias"),
    )


def set_frozen_groups(net: ResNetTP, groups: Sequence[str]):
    """Freezes exactly ``groups`` (names or aliases); every other group becomes trainable."""
    wanted = set()
    for name in groups:
        canonical = canonical_group(name)
        if canonical not in net.group_names():
            raise ConfigurationError(
                f"unknown group '{name}' (network groups: {', '.join(net.group_names())})"
            )
        wanted.add(canonical)
    for group in net.group_names():
        frozen = group in wanted
        if group in net.groups:
            for block in net.groups[group]:
                set_block_frozen(block, frozen)
        else:
            for p in net.group_parameters(group).values():
                set_parameter_frozen(p, frozen)
    net.frozen_groups = wanted


# --- 3. Forward / Backward ---


def _check_input(net: ResNetTP, x: Tensor):
    h, w = net.config.input_size
    if x.shape[1] != 3:
        raise DimensionError(f"network expects 3 input channels, got {x.shape[1]}", axis="channel")
    if x.shape[2] != h:
        raise DimensionError(f"network expects height {h}, got {x.shape[2]}", axis="height")
    if x.shape[3] != w:
        raise DimensionError(f"network expects width {w}, got {x.shape[3]}", axis="width")


def representation(net: ResNetTP, x: Tensor, mode: str = "eval", keep_cache: Optional[bool] = None) -> Tensor:
    """Concatenated GAP vectors of the active pathways, shape (n, D, 1, 1)."""
    _check_input(net, x)
    keep = mode == "train" if keep_cache is None else keep_cache
    h = relu(net.stem.forward(x, mode, keep))
    stem_out = h
    h, pool_cache = max_pool2x2(h)
    for group in BLOCK_GROUPS:
        for block in net.groups[group]:
            h = block_forward(block, h, mode, keep)
    pooled, pathway_shapes = [], []
    for group in net.config.active_pathways:
        p = h
        for block in net.groups[group]:
            p = block_forward(block, p, mode, keep)
        pathway_shapes.append(p.shape)
        pooled.append(global_avg_pool(p))
    rep = concat_channels(pooled)
    if keep:
        net._cache = {"stem_out": stem_out, "pool": pool_cache, "pathway_shapes": pathway_shapes, "rep": rep}
    return rep


def forward(net: ResNetTP, x: Tensor, mode: str = "eval", keep_cache: Optional[bool] = None) -> Tensor:
    rep = representation(net, x, mode, keep_cache)
    logits = fully_connected(rep, net.fc_weight, net.fc_bias)
    return logits


def backward(net: ResNetTP, grad_logits: Tensor):
    """Accumulates parameter gradients for the last cached forward pass."""
    if "rep" not in net._cache:
        raise RuntimeError("backward called before a cached forward pass")
    grad_rep, _, _ = fully_connected_backward(net._cache["rep"], net.fc_weight, grad_logits, net.fc_bias)
    if all(g in net.frozen_groups for g in ["conv1"] + list(net.groups)):
        return

    trunk_grad = None
    offset = 0
    for group, shape in zip(net.config.active_pathways, net._cache["pathway_shapes"]):
        part = Tensor(grad_rep.data[:, offset:offset + shape[1]])
        offset += shape[1]
        g = global_avg_pool_backward(shape, part)
        for block in reversed(net.groups[group]):
            g = block_backward(block, g)
        trunk_grad = g if trunk_grad is None else Tensor(trunk_grad.data + g.data)

    g = trunk_grad
    order = ["conv1"] + BLOCK_GROUPS
    for index in range(len(BLOCK_GROUPS), 0, -1):
        if all(name in net.frozen_groups for name in order[:index + 1]):
            return
        for block in reversed(net.groups[order[index]]):
            g = block_backward(block, g)
    if "conv1" in net.frozen_groups:
        return
    g = max_pool2x2_backward(net._cache["pool"], g)
    g = relu_backward(net._cache["stem_out"], g)
    net.stem.backward(g)


def clear_cache(net: ResNetTP):
    net.stem.clear_cache()
    for blocks in net.groups.values():
        for block in blocks:
            clear_block_cache(block)
    net._cache = {}


def extract_representation(net: ResNetTP, x: Tensor, labels: Optional[Sequence[int]] = None) -> List[FeatureVector]:
    """Eval-mode GAP representation per sample; the FC head is not applied."""
    rep = representation(net, x, mode="eval", keep_cache=False)
    values = rep.data.reshape(rep.shape[0], -1).astype(np.float32)
    return [
        FeatureVector(values=row, pathway_boundary=net.pathway_boundary,
                      label=None if labels is None else int(labels[i]))
        for i, row in enumerate(values)
    ]


# --- 4. Single-pathway reference assembly ---


@dataclass(eq=False)
class ReferenceResNet:
    """Plain sequential ResNet (stem, conv2_x..conv5_x, GAP, FC) with conv5 named conv5_1_x."""

    stem: ConvBN
    stages: List[Tuple[str, List[ResidualBlock]]]
    fc_weight: Parameter
    fc_bias: Parameter

    def parameters(self) -> Dict[str, Parameter]:
        out = {p.name: p for p in self.stem.parameters()}
        for _, blocks in self.stages:
            for block in blocks:
                out.update(block.parameters())
        out.update({p.name: p for p in (self.fc_weight, self.fc_bias)})
        return out

    def representation(self, x: Tensor) -> Tensor:
        h, _ = max_pool2x2(relu(self.stem.forward(x, "eval", keep_cache=False)))
        for _, blocks in self.stages:
            for block in blocks:
                h = block_forward(block, h, "eval", keep_cache=False)
        return global_avg_pool(h)

    def forward(self, x: Tensor) -> Tensor:
        return fully_connected(self.representation(x), self.fc_weight, self.fc_bias)


def build_reference_resnet(config: NetworkConfig, dtype=FLOAT) -> ReferenceResNet:
    seed = config.seed
    kind = config.block_kind
    stem = ConvBN.create("conv1", 3, group_out_planes(config, "conv1"), STEM_KERNEL, seed,
                         stride=STEM_STRIDE, padding=STEM_PADDING, dtype=dtype)
    stages = []
    in_planes = stem.conv.out_channels
    for group, count in zip(BLOCK_GROUPS + ["conv5_1_x"], config.block_counts):
        out_planes = group_out_planes(config, group)
        stride = get_group(group)["stride"]
        blocks = []
        for i in range(count):
            spec = BlockSpec.make(kind, in_planes, out_planes, stride if i == 0 else 1, 1)
            blocks.append(build_block(spec, f"{group}.{i}", seed, dtype))
            in_planes = out_planes
        stages.append((group, blocks))
    fc_weight, fc_bias = _fc_parameters(config.num_classes, in_planes, seed, dtype)
    return ReferenceResNet(stem=stem, stages=stages, fc_weight=fc_weight, fc_bias=fc_bias)
