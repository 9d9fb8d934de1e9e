from typing import Dict, List, TypedDict


# --- 1. Type Definitions (For better code intelligence) ---
class GroupTemplate(TypedDict):
    group: str
    basic: tuple  # (IN, OUT) label of the 18/34-layer column
    bottleneck: tuple  # (IN, OUT) label of the 50/101-layer column
    stride: int  # stride of the group's first downsampling step
    dilation: int
    output_size_224: int  # output side length for a 224x224 input


# --- 2. The Registry ---
# Group configuration of the two-pathway network. conv1+pool1 is a 7x7/2 convolution
# followed by 2x2/2 max pooling; conv5_1_x and conv5_2_x both consume conv4_x.
GROUPS: List[GroupTemplate] = [
    {"group": "conv1", "basic": (3, 64), "bottleneck": (3, 64), "stride": 4, "dilation": 1, "output_size_224": 56},
    {"group": "conv2_x", "basic": (64, 64), "bottleneck": (64, 256), "stride": 1, "dilation": 1, "output_size_224": 56},
    {"group": "conv3_x", "basic": (128, 128), "bottleneck": (128, 512), "stride": 2, "dilation": 1, "output_size_224": 28},
    {"group": "conv4_x", "basic": (256, 256), "bottleneck": (256, 1024), "stride": 2, "dilation": 1, "output_size_224": 14},
    {"group": "conv5_2_x", "basic": (512, 512), "bottleneck": (512, 2048), "stride": 1, "dilation": 2, "output_size_224": 14},
    {"group": "conv5_1_x", "basic": (512, 512), "bottleneck": (512, 2048), "stride": 2, "dilation": 1, "output_size_224": 7},
]

TRUNK_GROUPS = ["conv1", "conv2_x", "conv3_x", "conv4_x"]
PATHWAY_GROUPS = ["conv5_1_x", "conv5_2_x"]
ALL_GROUPS = TRUNK_GROUPS + PATHWAY_GROUPS + ["fc"]

# Short names accepted wherever a group is named (freeze sets, CLI flags).
GROUP_ALIASES: Dict[str, str] = {
    "conv1": "conv1",
    "conv1_x": "conv1",
    "conv2": "conv2_x",
    "conv3": "conv3_x",
    "conv4": "conv4_x",
    "conv5_1": "conv5_1_x",
    "conv5_2": "conv5_2_x",
}

STEM_KERNEL = 7
STEM_STRIDE = 2
STEM_PADDING = 3


# --- 3. Helper Functions ---


def get_group(name: str) -> GroupTemplate:
    """Returns the registry entry for a group name or alias."""
    canonical = canonical_group(name)
    for entry in GROUPS:
        if entry["group"] == canonical:
            return entry
    raise KeyError(name)


def canonical_group(name: str) -> str:
    return GROUP_ALIASES.get(name, name)


def block_label(kind: str, in_planes: int, out_planes: int, count: int) -> str:
    title = "Basic" if kind == "basic" else "Bottleneck"
    return f"{title}({in_planes},{out_planes})x{count}"
