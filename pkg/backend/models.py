# backend/models.py
import hashlib
import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from backend.errors import ConfigurationError

# --- 1. Architecture Models ---

BLOCK_COUNTS: Dict[int, List[int]] = {
    18: [2, 2, 2, 2],
    34: [3, 4, 6, 3],
    50: [3, 4, 6, 3],
    101: [3, 4, 23, 3],
}

PATHWAY_ALIASES = {
    "both": "both",
    "5_1": "conv5_1_only",
    "5_2": "conv5_2_only",
    "conv5_1": "conv5_1_only",
    "conv5_2": "conv5_2_only",
}


class BlockSpec(BaseModel):
    kind: Literal["basic", "bottleneck"]
    in_planes: int = Field(gt=0, description="IN: channels entering the block.")
    out_planes: int = Field(gt=0, description="OUT: channels leaving the block.")
    stride: Literal[1, 2] = 1
    dilation: int = Field(default=1, ge=1)
    projection: Literal["identity", "linear"] = "identity"

    @model_validator(mode="after")
    def _check_projection(self):
        needs_linear = self.in_planes != self.out_planes or self.stride != 1
        if needs_linear != (self.projection == "linear"):
            raise ValueError(
                f"projection must be {'linear' if needs_linear else 'identity'} "
                f"for IN={self.in_planes}, OUT={self.out_planes}, stride={self.stride}"
            )
        if self.kind == "bottleneck" and self.out_planes % 4:
            raise ValueError("bottleneck OUT must be divisible by 4")
        return self

    @classmethod
    def make(cls, kind: str, in_planes: int, out_planes: int, stride: int = 1, dilation: int = 1) -> "BlockSpec":
        """Builds a spec with the projection implied by IN/OUT/stride."""
        projection = "linear" if (in_planes != out_planes or stride != 1) else "identity"
        return cls(
            kind=kind,
            in_planes=in_planes,
            out_planes=out_planes,
            stride=stride,
            dilation=dilation,
            projection=projection,
        )

    @property
    def mid_planes(self) -> int:
        return self.out_planes // 4 if self.kind == "bottleneck" else self.out_planes


class NetworkConfig(BaseModel):
    depth: Literal[18, 34, 50, 101] = 18
    num_classes: int = Field(default=45, ge=2, description="N: classes of the FC head.")
    input_size: Tuple[int, int] = (224, 224)
    width_multiplier: float = Field(default=1.0, gt=0, le=1)
    pathways: Literal["both", "conv5_1_only", "conv5_2_only"] = "both"
    seed: int = Field(default=0, ge=0, description="Initialization seed.")

    @field_validator("pathways", mode="before")
    @classmethod
    def _pathway_alias(cls, value):
        if isinstance(value, str):
            return PATHWAY_ALIASES.get(value, value)
        return value

    @field_validator("input_size", mode="before")
    @classmethod
    def _square_input(cls, value):
        if isinstance(value, int):
            return (value, value)
        return value

    @field_validator("input_size")
    @classmethod
    def _positive_input(cls, value):
        if min(value) <= 0:
            raise ValueError("input_size must be positive")
        return value

    @property
    def block_counts(self) -> List[int]:
        return list(BLOCK_COUNTS[self.depth])

    @property
    def block_kind(self) -> str:
        return "basic" if self.depth in (18, 34) else "bottleneck"

    @property
    def active_pathways(self) -> List[str]:
        if self.pathways == "both":
            return ["conv5_1_x", "conv5_2_x"]
        return ["conv5_1_x"] if self.pathways == "conv5_1_only" else ["conv5_2_x"]

    def channels(self, base: int) -> int:
        """Scales a channel count by the width multiplier, rounded to a multiple of 4."""
        if self.width_multiplier == 1:
            return base
        return max(4, int(round(base * self.width_multiplier / 4)) * 4)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()[:16]


class GroupReport(BaseModel):
    group: str
    block: str = Field(description="Block label, e.g. 'Basic(64,64)x2'.")
    output_size: Tuple[int, int]
    stride: int
    dilation: int
    receptive_field: int
    parameters: int


class ArchitectureReport(BaseModel):
    depth: int
    input_size: Tuple[int, int]
    pathways: str
    groups: List[GroupReport]
    total_parameters: int
    representation_length: int
    pathway_boundary: int

    def row(self, group: str) -> GroupReport:
        for entry in self.groups:
            if entry.group == group:
                return entry
        raise KeyError(group)


# --- 2. Training Models ---


class AugmentConfig(BaseModel):
    rotations: List[int] = Field(default=[0], description="Quarter-turn angles in degrees.")
    mirror: bool = False
    scale_range: Tuple[float, float] = (1.0, 1.0)

    @field_validator("rotations")
    @classmethod
    def _quarter_turns(cls, value):
        if not value:
            raise ValueError("rotations must not be empty")
        for angle in value:
            if angle not in (0, 90, 180, 270):
                raise ValueError(f"rotation {angle} is not a quarter turn")
        return sorted(set(value))

    @field_validator("scale_range")
    @classmethod
    def _around_one(cls, value):
        lo, hi = value
        if not (0 < lo <= 1 <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= 1 <= hi")
        return value


class TrainConfig(BaseModel):
    batch_size: int = Field(default=64, ge=1)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lr0: float = Field(default=0.01, gt=0)
    lr_step: int = Field(default=30, ge=1, description="Epochs between decays.")
    lr_factor: float = Field(default=0.1, gt=0, lt=1)
    epochs: int = Field(default=50, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    freeze_set: List[str] = Field(default_factory=list)
    seed: int = Field(default=0, ge=0)
    augmentation: AugmentConfig = Field(default_factory=AugmentConfig)


class EpochMetrics(BaseModel):
    epoch: int
    lr: float
    loss: float
    train_acc: float


# --- 3. Data & Evaluation Models ---


class DataConfig(BaseModel):
    input_size: Tuple[int, int] = (224, 224)
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    @field_validator("input_size", mode="before")
    @classmethod
    def _square_input(cls, value):
        if isinstance(value, int):
            return (value, value)
        return value

    @field_validator("std")
    @classmethod
    def _positive_std(cls, value):
        if min(value) <= 0:
            raise ValueError("std must be positive")
        return value


class SplitSpec(BaseModel):
    training_ratio: Optional[float] = Field(default=None, gt=0, lt=1)
    train_per_class: Optional[int] = Field(default=None, ge=1)
    repeats: int = Field(default=10, ge=1)
    base_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _one_rule(self):
        if (self.training_ratio is None) == (self.train_per_class is None):
            raise ValueError("set exactly one of training_ratio or train_per_class")
        return self

    def train_count(self, class_size: int) -> int:
        if self.train_per_class is not None:
            return self.train_per_class
        # round half up; Python's round() is banker's rounding
        return int(math.floor(self.training_ratio * class_size + 0.5))


class EvalReport(BaseModel):
    class_names: List[str]
    accuracies: List[float] = Field(description="Per-repeat overall accuracy in percent.")
    mean: float
    std: float = Field(description="Sample (n-1) standard deviation, 0 for one repeat.")
    per_class_accuracy: List[float] = Field(description="Mean per-class accuracy in percent.")
    confusions: List[List[List[int]]] = Field(description="Rows = true class, columns = predicted.")
    repeats: int

    @model_validator(mode="after")
    def _counts(self):
        if len(self.accuracies) != self.repeats or len(self.confusions) != self.repeats:
            raise ValueError("one accuracy and one confusion matrix per repeat")
        return self

    def summary(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


class GradCheckReport(BaseModel):
    op: str
    max_relative_error: float = Field(ge=0)
    errors: Dict[str, float] = Field(description="Max relative error per parameter.")
    probes: int
    skipped: int = Field(default=0, description="Probes redrawn because they crossed a kink.")

    @model_validator(mode="after")
    def _max_over_table(self):
        if self.errors and not math.isclose(self.max_relative_error, max(self.errors.values())):
            raise ValueError("max_relative_error must equal the maximum table entry")
        return self


# --- 4. Loading Helpers ---


def parse_model(model_cls, values: dict, what: str):
    """Validates ``values`` into ``model_cls`` and reports failures as ConfigurationError."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigurationError(f"invalid {what}: {e}") from e
