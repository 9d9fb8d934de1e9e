# backend/trainer.py
"""
SGD training with a step learning-rate schedule, freeze sets and augmentation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Union

import numpy as np
import pandas as pd

from backend.checkpoint import restore, save_checkpoint, snapshot
from backend.errors import ConfigurationError, DimensionError, DivergenceError, DomainError, NumericError
from backend.image_ops import center_fit, mirror, resize_bilinear, rotate_quarter
from backend.models import AugmentConfig, EpochMetrics, TrainConfig
from backend.network import ResNetTP, backward, clear_cache, forward, set_frozen_groups
from backend.tensor_core import Tensor, softmax_cross_entropy

logger = logging.getLogger(__name__)


class LabeledImages(Protocol):
    images: np.ndarray  # (n, 3, h, w) float32, normalized
    labels: np.ndarray  # (n,) int64


@dataclass
class TrainResult:
    metrics: List[EpochMetrics] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None

    @property
    def losses(self) -> List[float]:
        return [m.loss for m in self.metrics]


# --- 1. Optimizer & Schedule ---


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * lr_factor ** floor(epoch / lr_step)."""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_factor ** (epoch // cfg.lr_step)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], velocity: Dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float = 0.0) -> Dict[str, np.ndarray]:
    """
    Classical momentum, in place: v <- momentum * v + g; p <- p - lr * v.
    Every gradient is checked before any parameter moves.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", parameter=name)
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        p -= lr * v
    return params


def set_freeze(net: ResNetTP, groups: Sequence[str]):
    """Freezes exactly ``groups``; frozen parameters get no updates and their BN statistics stay fixed."""
    set_frozen_groups(net, groups)
    logger.info("frozen groups: %s", ", ".join(sorted(net.frozen_groups)) or "none")


# --- 2. Augmentation ---


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One quarter-turn rotation, an optional mirror and one rescale with centre crop/pad."""
    _, h, w = image.shape
    if h != w:
        raise DimensionError(f"augmentation needs a square image, got {h}x{w}", axis="width")
    angle = cfg.rotations[int(rng.integers(len(cfg.rotations)))]
    out = rotate_quarter(image, angle // 90) if angle else image
    if cfg.mirror and rng.random() < 0.5:
        out = mirror(out)
    lo, hi = cfg.scale_range
    if hi > lo:
        scale = rng.uniform(lo, hi)
        side = max(1, int(round(h * scale)))
        if side != h:
            out = center_fit(resize_bilinear(out, side, side), h)
    return out


def _is_identity(cfg: AugmentConfig) -> bool:
    return cfg.rotations == [0] and not cfg.mirror and cfg.scale_range[0] == cfg.scale_range[1]


# --- 3. Training Loop ---


def train(net: ResNetTP, dataset: LabeledImages, cfg: TrainConfig, out_path: Optional[Union[str, Path]] = None,
          metrics_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Deterministic given cfg.seed: the shuffle order and augmentation draws come from
    one generator. On a non-finite loss or gradient the parameters are rolled back
    to the last completed epoch, saved to ``out_path`` and DivergenceError is raised.
    """
    images, labels = dataset.images, np.asarray(dataset.labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise DomainError("training dataset is empty")
    if labels.max() >= net.config.num_classes or labels.min() < 0:
        raise DomainError(f"labels must lie in [0, {net.config.num_classes})")

    set_freeze(net, cfg.freeze_set)
    rng = np.random.default_rng(cfg.seed)
    velocity: Dict[str, np.ndarray] = {}
    result = TrainResult()
    plain = _is_identity(cfg.augmentation)
    last_good = snapshot(net)

    logger.info("--- Training: %d images, %d epochs, batch %d ---", n, cfg.epochs, cfg.batch_size)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        try:
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if plain:
                    batch = images[idx]
                else:
                    batch = np.stack([augment(images[i], cfg.augmentation, rng) for i in idx])
                net.zero_grad()
                logits = forward(net, Tensor(batch), mode="train")
                loss, grad = softmax_cross_entropy(logits, labels[idx])
                if not np.isfinite(loss):
                    raise NumericError(f"loss became {loss}")
                backward(net, grad)
                trainable = net.trainable_parameters()
                sgd_step(
                    {name: p.data for name, p in trainable.items()},
                    {name: p.grad for name, p in trainable.items()},
                    velocity, lr, cfg.momentum, cfg.weight_decay,
                )
                total_loss += loss * len(idx)
                correct += int(np.sum(logits.data.reshape(len(idx), -1).argmax(axis=1) == labels[idx]))
                logger.debug("epoch %d batch %d loss %.5f", epoch, start // cfg.batch_size, loss)
        except NumericError as e:
            clear_cache(net)
            restore(net, last_good)
            saved = save_checkpoint(net, out_path, epoch=epoch) if out_path else None
            _write_metrics(result, metrics_path)
            raise DivergenceError(f"training diverged in epoch {epoch}: {e}", epoch=epoch,
                                  checkpoint_path=str(saved) if saved else None) from e

        metrics = EpochMetrics(epoch=epoch, lr=lr, loss=total_loss / n, train_acc=correct / n)
        result.metrics.append(metrics)
        last_good = snapshot(net)
        logger.info("epoch %d lr %.4g loss %.4f train_acc %.4f", epoch, lr, metrics.loss, metrics.train_acc)

    clear_cache(net)
    if out_path:
        result.checkpoint_path = save_checkpoint(net, out_path, epoch=cfg.epochs)
    _write_metrics(result, metrics_path)
    return result


def _write_metrics(result: TrainResult, metrics_path: Optional[Union[str, Path]]):
    if not metrics_path:
        return
    path = Path(metrics_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([m.model_dump() for m in result.metrics], columns=["epoch", "lr", "loss", "train_acc"])
    frame.to_csv(path, index=False)
    result.metrics_path = path


def predict(net: ResNetTP, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax of the FC logits."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = forward(net, Tensor(images[start:start + batch_size]), mode="eval", keep_cache=False)
        out.append(logits.data.reshape(logits.shape[0], -1).argmax(axis=1))
    return np.concatenate(out)
