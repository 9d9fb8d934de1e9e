# backend/protocol.py
"""
Staged pretrain -> merge -> fine-tune protocol for the two-pathway network.

    1a. conv5_1_only network trained on the surrogate task.
    1b. conv5_2_only network: trunk taken from 1a and frozen, conv5_2_x trained.
    merge. both-pathway network assembled from 1a and 1b (FC heads dropped).
    2.  fine-tune on the target task with conv1..conv3_x frozen.

With ``from_scratch`` the staged part is skipped and the both-pathway network is
trained on the target task from its initialization with nothing frozen.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from backend.checkpoint import (
    Checkpoint,
    checkpoint_from_network,
    diff_checkpoints,
    group_of,
    load_checkpoint,
    save_checkpoint,
)
from backend.errors import NumericError
from backend.models import EpochMetrics, NetworkConfig, TrainConfig
from backend.network import ResNetTP, build
from backend.trainer import LabeledImages, train

logger = logging.getLogger(__name__)

CONV5_2_FREEZE = ["conv1", "conv2_x", "conv3_x", "conv4_x"]
FINETUNE_FREEZE = ["conv1", "conv2_x", "conv3_x"]
HEAD = ["fc"]


@dataclass
class PhaseRecord:
    name: str
    checkpoint: Path
    metrics: List[EpochMetrics]
    frozen: List[str]
    changed_groups: List[str]


@dataclass
class ProtocolResult:
    finetuned: Path
    pretrained: Optional[Path] = None
    phases: List[PhaseRecord] = field(default_factory=list)

    def phase(self, name: str) -> PhaseRecord:
        for record in self.phases:
            if record.name == name:
                return record
        raise KeyError(name)


# --- 1. Phase Runner ---


def _run_phase(name: str, net: ResNetTP, data: LabeledImages, cfg: TrainConfig, out_dir: Path,
               freeze: Sequence[str]) -> PhaseRecord:
    """Trains one phase and verifies frozen groups came out bit-identical."""
    logger.info("--- 🔁 Protocol phase %s (%s, frozen: %s) ---", name, net.config.pathways, ", ".join(freeze) or "none")
    phase_cfg = cfg.model_copy(update={"freeze_set": list(freeze)})
    before = checkpoint_from_network(net)
    result = train(net, data, phase_cfg, out_path=out_dir / f"{name}.rtpc", metrics_path=out_dir / f"{name}_metrics.csv")
    after = checkpoint_from_network(net, epoch=phase_cfg.epochs)

    changed = diff_checkpoints(before, after)
    changed_groups = sorted({group_of(n) for n in changed})
    leaked = [n for n in changed if group_of(n) in net.frozen_groups]
    if leaked:
        raise NumericError(f"phase {name}: frozen parameters changed ({', '.join(leaked[:5])})")
    return PhaseRecord(name=name, checkpoint=result.checkpoint_path, metrics=result.metrics,
                       frozen=sorted(net.frozen_groups), changed_groups=changed_groups)


def _with_pathways(config: NetworkConfig, pathways: str, num_classes: int) -> NetworkConfig:
    return config.model_copy(update={"pathways": pathways, "num_classes": num_classes})


# --- 2. Protocol ---


def merge_pathways(config: NetworkConfig, sources: Sequence[Checkpoint]) -> ResNetTP:
    """
    Builds a both-pathway network and loads ``sources`` in order, non-strict and
    without their FC heads; later sources overwrite shared names.
    """
    net = build(_with_pathways(config, "both", config.num_classes))
    for source in sources:
        load_checkpoint(net, source, strict=False, exclude=HEAD)
    return net


def run_protocol(config: NetworkConfig, surrogate: LabeledImages, surrogate_classes: int, target: LabeledImages,
                 pretrain_cfg: TrainConfig, finetune_cfg: TrainConfig, out_dir, from_scratch: bool = False,
                 finetune_freeze: Sequence[str] = FINETUNE_FREEZE) -> ProtocolResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target_config = _with_pathways(config, "both", config.num_classes)

    if from_scratch:
        net = build(target_config)
        record = _run_phase("scratch", net, target, finetune_cfg, out_dir, freeze=[])
        return ProtocolResult(finetuned=record.checkpoint, phases=[record])

    phases: List[PhaseRecord] = []

    # 1a. single-pathway network on the surrogate task
    net_a = build(_with_pathways(config, "conv5_1_only", surrogate_classes))
    phases.append(_run_phase("phase1_conv5_1", net_a, surrogate, pretrain_cfg, out_dir, freeze=[]))
    ckpt_a = checkpoint_from_network(net_a)

    # 1b. dilated pathway on top of the frozen 1a trunk
    net_b = build(_with_pathways(config, "conv5_2_only", surrogate_classes))
    load_checkpoint(net_b, ckpt_a, strict=False, exclude=HEAD)
    phases.append(_run_phase("phase1_conv5_2", net_b, surrogate, pretrain_cfg, out_dir, freeze=CONV5_2_FREEZE))
    ckpt_b = checkpoint_from_network(net_b)

    # merge: trunk and conv5_1_x from 1a, conv5_2_x from 1b, fresh target head
    merged = merge_pathways(target_config, [ckpt_a, ckpt_b])
    pretrained = save_checkpoint(merged, out_dir / "pretrained.rtpc", extra={"phase": "merged"})

    # 2. fine-tune on the target task
    phases.append(_run_phase("finetuned", merged, target, finetune_cfg, out_dir, freeze=finetune_freeze))
    return ProtocolResult(finetuned=phases[-1].checkpoint, pretrained=pretrained, phases=phases)


def summarize(result: ProtocolResult) -> Dict[str, Dict[str, object]]:
    """Final loss / accuracy and trained groups per phase, for logging and the CLI."""
    return {
        record.name: {
            "checkpoint": str(record.checkpoint),
            "final_loss": record.metrics[-1].loss if record.metrics else None,
            "final_train_acc": record.metrics[-1].train_acc if record.metrics else None,
            "frozen": record.frozen,
            "changed_groups": record.changed_groups,
        }
        for record in result.phases
    }
