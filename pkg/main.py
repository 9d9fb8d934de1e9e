"""
restp: command-line surface of the two-pathway ResNet toolkit.

    python main.py inspect --depth 50
    python main.py synth --out data/synth --classes 5 --per-class 50 --size 64
    python main.py train --data data/synth/manifest.csv --config train.cfg --out runs/net.rtpc
    python main.py evaluate --ckpt runs/net.rtpc --data data/synth/manifest.csv --ratio 0.5 --out runs/eval
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.dataset import load_dataset, synth_dataset
from app.harness import evaluate, extract_features, report_emit, sweep
from backend.checkpoint import load_checkpoint, network_from_checkpoint
from backend.errors import ConfigurationError, ResTPError
from backend.features_svm import (
    DEFAULT_C,
    load_features,
    load_svm_model,
    save_features,
    save_svm_model,
    svm_predict_batch,
    svm_train,
)
from backend.gradcheck import DEFAULT_PROBES, DEFAULT_STEP, OPS, grad_check
from backend.models import DataConfig, NetworkConfig, SplitSpec, TrainConfig, parse_model
from backend.network import build, inspect
from backend.protocol import FINETUNE_FREEZE, run_protocol, summarize
from backend.settings import get_settings
from backend.trainer import predict, train

logger = logging.getLogger("restp")


# --- 1. Config Files ---

# Mapping: Config Key -> (Target Model, Field)
CONFIG_KEYS = {
    "depth": ("network", "depth"),
    "width": ("network", "width_multiplier"),
    "pathways": ("network", "pathways"),
    "input_size": ("network", "input_size"),
    "num_classes": ("network", "num_classes"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "lr0": ("train", "lr0"),
    "lr_step": ("train", "lr_step"),
    "lr_factor": ("train", "lr_factor"),
    "momentum": ("train", "momentum"),
    "weight_decay": ("train", "weight_decay"),
    "seed": ("train", "seed"),
    "freeze": ("train", "freeze_set"),
    "rotations": ("augment", "rotations"),
    "mirror": ("augment", "mirror"),
    "scale_lo": ("augment", "scale_lo"),
    "scale_hi": ("augment", "scale_hi"),
    "init": ("run", "init"),
    "pretrain_epochs": ("run", "pretrain_epochs"),
    "finetune_freeze": ("run", "finetune_freeze"),
}

LIST_KEYS = {"freeze", "rotations", "finetune_freeze"}


def read_config_file(path: Optional[str]) -> Dict[str, str]:
    """key=value lines; '#' starts a comment, blank lines are skipped."""
    if not path:
        return {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path} ({e.strerror})") from e
    values = {}
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigurationError(f"{path}:{number}: expected key=value, got {raw!r}")
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"{path}:{number}: unknown key '{key}'")
        values[key] = value.strip()
    return values


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def build_configs(values: Dict[str, str], args) -> Tuple[NetworkConfig, TrainConfig, Dict[str, str]]:
    """Merges config-file values with command-line flags (flags win)."""
    sections: Dict[str, Dict[str, object]] = {"network": {}, "train": {}, "augment": {}, "run": {}}
    for key, value in values.items():
        target, field = CONFIG_KEYS[key]
        sections[target][field] = _split_list(value) if key in LIST_KEYS else value

    for flag, field in (("depth", "depth"), ("width", "width_multiplier"), ("pathways", "pathways"),
                        ("input", "input_size")):
        if getattr(args, flag, None) is not None:
            sections["network"][field] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        sections["train"]["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        sections["train"]["epochs"] = args.epochs

    network = sections["network"]
    for key in ("input_size", "depth"):
        if isinstance(network.get(key), str):
            try:
                network[key] = int(network[key])
            except ValueError:
                raise ConfigurationError(f"{key} must be an integer, got {network[key]!r}") from None
    network.setdefault("seed", sections["train"].get("seed", 0))

    augment = sections["augment"]
    aug_values: Dict[str, object] = {}
    if "rotations" in augment:
        aug_values["rotations"] = augment["rotations"]
    if "mirror" in augment:
        aug_values["mirror"] = str(augment["mirror"]).lower() in ("1", "true", "yes", "on")
    if "scale_lo" in augment or "scale_hi" in augment:
        aug_values["scale_range"] = (augment.get("scale_lo", 1.0), augment.get("scale_hi", 1.0))
    sections["train"]["augmentation"] = aug_values

    return (
        parse_model(NetworkConfig, network, "network config"),
        parse_model(TrainConfig, sections["train"], "training config"),
        {k: v for k, v in sections["run"].items()},
    )


def data_config(input_size) -> DataConfig:
    settings = get_settings()
    return DataConfig(input_size=input_size, mean=(settings.norm_mean,) * 3, std=(settings.norm_std,) * 3)


# --- 2. Subcommands ---


def cmd_inspect(args) -> int:
    config = parse_model(NetworkConfig, _network_flags(args), "network config")
    report = inspect(config)
    table = pd.DataFrame([g.model_dump() for g in report.groups])
    table["output_size"] = [f"{h}x{w}" for h, w in table["output_size"]]
    print(f"ResNet-TP-{report.depth}, input {report.input_size[0]}x{report.input_size[1]}, pathways {report.pathways}")
    print(table.to_string(index=False))
    print(f"representation length: {report.representation_length} (boundary {report.pathway_boundary})")
    print(f"total parameters: {report.total_parameters}")
    return 0


def _network_flags(args) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for flag, field in (("depth", "depth"), ("width", "width_multiplier"), ("pathways", "pathways"),
                        ("input", "input_size"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            values[field] = getattr(args, flag)
    if getattr(args, "num_classes", None) is not None:
        values["num_classes"] = args.num_classes
    return values


def cmd_synth(args) -> int:
    manifest = synth_dataset(args.classes, args.per_class, args.size, args.seed or 0, args.out)
    print(f"wrote {len(manifest)} images in {manifest.num_classes} classes to {args.out}/manifest.csv")
    return 0


def cmd_train(args) -> int:
    values = read_config_file(args.config)
    network, train_cfg, run = build_configs(values, args)
    dataset = load_dataset(args.data, data_config(network.input_size))
    if "num_classes" not in values:
        network = network.model_copy(update={"num_classes": dataset.num_classes})
    net = build(network)
    init = args.init or run.get("init")
    if init:
        result = load_checkpoint(net, init, strict=False, exclude=["fc"])
        logger.info("initialized %d tensors from %s", len(result.loaded), init)
    result = train(net, dataset, train_cfg, out_path=args.out, metrics_path=args.metrics)
    final = result.metrics[-1] if result.metrics else None
    if final:
        print(f"epoch {final.epoch}: loss {final.loss:.4f}, train accuracy {100 * final.train_acc:.2f}%")
    eval_acc = float(np.mean(predict(net, dataset.images) == dataset.labels))
    print(f"eval-mode accuracy on {len(dataset)} training images: {100 * eval_acc:.2f}%")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_extract(args) -> int:
    net = network_from_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, data_config(net.config.input_size))
    features = extract_features(net, dataset).select_pathway(_pathways(args.pathways))
    save_features(features, args.out)
    print(f"wrote {len(features)} feature vectors of length {features.dim} to {args.out}")
    return 0


def cmd_classify(args) -> int:
    if args.train:
        features = load_features(args.train)
        model = svm_train(features, C=args.C, seed=args.seed or 0, workers=get_settings().workers)
        save_svm_model(model, args.model)
        print(f"trained {len(model.classes)}-class SVM on {len(features)} samples -> {args.model}")
    if args.test:
        model = load_svm_model(args.model)
        features = load_features(args.test)
        predicted = svm_predict_batch(model, features.values)
        if args.predictions:
            pd.DataFrame({"label": features.labels, "predicted": predicted}).to_csv(args.predictions, index=False)
        accuracy = 100.0 * float(np.mean(predicted == features.labels))
        print(f"accuracy on {len(features)} samples: {accuracy:.2f}%")
    if not (args.train or args.test):
        raise ConfigurationError("classify needs --train and/or --test")
    return 0


def _split_spec(args) -> SplitSpec:
    values = {"repeats": args.repeats, "base_seed": args.seed or 0}
    if args.per_class is not None:
        values["train_per_class"] = args.per_class
    else:
        values["training_ratio"] = args.ratio
    return parse_model(SplitSpec, values, "split")


def _pathways(flag: Optional[str]) -> str:
    return {"both": "both", "5_1": "conv5_1_only", "5_2": "conv5_2_only", None: "both"}[flag]


def cmd_evaluate(args) -> int:
    net = network_from_checkpoint(args.ckpt)
    dataset = load_dataset(args.data, data_config(net.config.input_size))
    report = evaluate(net, dataset, _split_spec(args), svm_C=args.C, pathways=_pathways(args.pathways),
                      normalize=args.normalize, workers=get_settings().workers)
    if args.out:
        report_emit(report, args.out)
    print(report.summary())
    return 0


def cmd_sweep(args) -> int:
    networks = {}
    for entry in args.ckpt:
        name, _, path = entry.rpartition("=")
        networks[name or Path(path).stem] = network_from_checkpoint(path)
    sizes = {tuple(net.config.input_size) for net in networks.values()}
    if len(sizes) > 1:
        raise ConfigurationError(f"sweep networks disagree on input size: {sorted(sizes)}")
    try:
        ratios = [float(v) for v in _split_list(args.ratios)]
    except ValueError as e:
        raise ConfigurationError(f"--ratios must be comma-separated numbers: {args.ratios!r}") from e
    dataset = load_dataset(args.data, data_config(sizes.pop()))
    table = sweep(networks, dataset, ratios, repeats=args.repeats, base_seed=args.seed or 0, svm_C=args.C,
                  pathways=[_pathways(p) for p in args.pathways], normalize=args.normalize,
                  workers=get_settings().workers)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False, float_format="%.4f")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


def cmd_gradcheck(args) -> int:
    ops = list(OPS) if args.op == "all" else [args.op]
    worst = 0.0
    for op in ops:
        report = grad_check(op, args.probes, args.h, seed=args.seed or 0)
        worst = max(worst, report.max_relative_error)
        print(f"{op:24s} max rel err {report.max_relative_error:.3e}  ({report.probes} probes, {report.skipped} redrawn)")
    print(f"worst: {worst:.3e}")
    return 0


def cmd_protocol(args) -> int:
    values = read_config_file(args.config)
    network, train_cfg, run = build_configs(values, args)
    data = data_config(network.input_size)
    target = load_dataset(args.data, data)
    network = network.model_copy(update={"num_classes": target.num_classes})
    if not (args.surrogate or args.from_scratch):
        raise ConfigurationError("protocol needs --surrogate unless --from-scratch is given")
    surrogate = None if args.from_scratch else load_dataset(args.surrogate, data)

    pretrain_cfg = train_cfg
    if "pretrain_epochs" in run:
        pretrain_cfg = parse_model(TrainConfig, {**train_cfg.model_dump(), "epochs": run["pretrain_epochs"]},
                                   "training config")
    result = run_protocol(
        network, surrogate, surrogate.num_classes if surrogate else 0, target, pretrain_cfg, train_cfg, args.out,
        from_scratch=args.from_scratch, finetune_freeze=run.get("finetune_freeze", FINETUNE_FREEZE),
    )
    for phase, info in summarize(result).items():
        print(f"{phase}: loss {info['final_loss']}, changed {', '.join(info['changed_groups']) or 'nothing'}")

    if args.evaluate:
        spec = _split_spec(args)
        checkpoints = {"finetuned": result.finetuned}
        if result.pretrained is not None:
            checkpoints["pretrained"] = result.pretrained
        for name, path in checkpoints.items():
            report = evaluate(path, target, spec, svm_C=args.C, workers=get_settings().workers)
            report_emit(report, Path(args.out) / f"eval_{name}")
            print(f"{name}: {report.summary()}")
    return 0


# --- 3. Parser ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="restp", description="Two-pathway ResNet toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    net_flags = argparse.ArgumentParser(add_help=False)
    net_flags.add_argument("--depth", type=int, choices=[18, 34, 50, 101])
    net_flags.add_argument("--width", type=float, help="channel width multiplier in (0, 1]")
    net_flags.add_argument("--pathways", choices=["both", "5_1", "5_2"])
    net_flags.add_argument("--input", type=int, help="square input side")
    net_flags.add_argument("--seed", type=int)

    split_flags = argparse.ArgumentParser(add_help=False)
    split_flags.add_argument("--ratio", type=float, default=0.5)
    split_flags.add_argument("--per-class", type=int, help="fixed training images per class (overrides --ratio)")
    split_flags.add_argument("--repeats", type=int, default=10)
    split_flags.add_argument("--C", type=float, default=DEFAULT_C)

    p = sub.add_parser("inspect", parents=[net_flags], help="per-group sizes, receptive fields, parameters")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic grating dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[net_flags], help="SGD training from a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--init", help="checkpoint to start from (FC head skipped)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="GAP representations to a feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pathways", choices=["both", "5_1", "5_2"])
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("classify", help="train and/or apply the linear SVM")
    p.add_argument("--train", help="feature file to train on")
    p.add_argument("--test", help="feature file to predict")
    p.add_argument("--model", required=True)
    p.add_argument("--predictions")
    p.add_argument("--C", type=float, default=DEFAULT_C)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", parents=[split_flags], help="repeated-split SVM evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--pathways", choices=["both", "5_1", "5_2"])
    p.add_argument("--normalize", action="store_true", help="L2-normalize features before the SVM")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="SVM accuracy over networks x training ratios")
    p.add_argument("--ckpt", required=True, nargs="+", help="checkpoints, each as PATH or NAME=PATH")
    p.add_argument("--data", required=True)
    p.add_argument("--ratios", default="0.1,0.2", help="comma-separated training ratios")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--C", type=float, default=DEFAULT_C)
    p.add_argument("--pathways", nargs="+", choices=["both", "5_1", "5_2"], default=["both"])
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV file for the table")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--op", default="all", choices=["all"] + list(OPS))
    p.add_argument("--probes", type=int, default=DEFAULT_PROBES)
    p.add_argument("--h", type=float, default=DEFAULT_STEP)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("protocol", parents=[net_flags, split_flags], help="staged pretrain/merge/fine-tune")
    p.add_argument("--data", required=True, help="target-task manifest")
    p.add_argument("--surrogate", help="surrogate-task manifest for pretraining")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--evaluate", action="store_true", help="evaluate pretrained and fine-tuned checkpoints")
    p.set_defaults(func=cmd_protocol)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
        logging.basicConfig(level=settings.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ResTPError as e:
        print(f"{e.category} error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
