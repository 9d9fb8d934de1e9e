"""
Integration tests for backend/trainer.py - full training loops on small networks.
"""
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

from backend.checkpoint import checkpoint_from_network, diff_checkpoints, group_of, read_checkpoint
from backend.errors import DivergenceError, DomainError
from backend.models import AugmentConfig, TrainConfig
from backend.network import build
from backend.trainer import predict, train


@pytest.fixture
def tiny_net_config(tiny_config):
    return tiny_config.model_copy(update={"num_classes": 3})


class TestTrainLoop:
    """Tests for the epoch loop, schedule and outputs."""

    @pytest.mark.integration
    def test_same_seed_same_checkpoint(self, tiny_net_config, small_dataset, quick_train_config):
        """Two runs with identical seeds produce bitwise-identical parameters."""
        a, b = build(tiny_net_config), build(tiny_net_config)
        train(a, small_dataset, quick_train_config)
        train(b, small_dataset, quick_train_config)
        assert diff_checkpoints(checkpoint_from_network(a), checkpoint_from_network(b)) == []

    @pytest.mark.integration
    def test_outputs_written(self, tiny_net_config, small_dataset, quick_train_config, tmp_path):
        net = build(tiny_net_config)
        result = train(net, small_dataset, quick_train_config, out_path=tmp_path / "net.rtpc",
                       metrics_path=tmp_path / "metrics.csv")
        assert read_checkpoint(result.checkpoint_path).epoch == quick_train_config.epochs
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert list(frame.columns) == ["epoch", "lr", "loss", "train_acc"]
        assert list(frame["epoch"]) == [0, 1]
        assert len(result.losses) == 2

    @pytest.mark.integration
    def test_overfits_one_batch(self, tiny_net_config, small_dataset):
        """Ten full-batch steps on six images lower the loss."""
        data = SimpleNamespace(images=small_dataset.images[::2], labels=small_dataset.labels[::2])
        cfg = TrainConfig(batch_size=6, epochs=10, lr0=0.01, momentum=0.9, seed=0)
        result = train(build(tiny_net_config), data, cfg)
        assert result.losses[-1] < result.losses[0]

    @pytest.mark.integration
    def test_fully_frozen_network_is_unchanged(self, tiny_net_config, small_dataset, quick_train_config):
        """With every group frozen nothing moves and the epoch loss stays constant."""
        net = build(tiny_net_config)
        before = checkpoint_from_network(net)
        cfg = quick_train_config.model_copy(update={
            "freeze_set": ["conv1", "conv2_x", "conv3_x", "conv4_x", "conv5_1_x", "conv5_2_x", "fc"],
            "batch_size": 12,
        })
        result = train(net, small_dataset, cfg)
        assert diff_checkpoints(before, checkpoint_from_network(net)) == []
        assert result.losses[1] == pytest.approx(result.losses[0], rel=1e-5)

    @pytest.mark.integration
    def test_frozen_trunk_only_moves_pathways(self, tiny_net_config, small_dataset, quick_train_config):
        net = build(tiny_net_config)
        before = checkpoint_from_network(net)
        cfg = quick_train_config.model_copy(update={"freeze_set": ["conv1", "conv2_x", "conv3_x", "conv4_x"]})
        train(net, small_dataset, cfg)
        changed = {group_of(n) for n in diff_checkpoints(before, checkpoint_from_network(net))}
        assert changed and changed <= {"conv5_1_x", "conv5_2_x", "fc"}

    @pytest.mark.integration
    def test_augmented_training_runs(self, tiny_net_config, small_dataset, quick_train_config):
        augmentation = AugmentConfig(rotations=[0, 90, 180, 270], mirror=True)
        cfg = quick_train_config.model_copy(update={"epochs": 1, "augmentation": augmentation})
        result = train(build(tiny_net_config), small_dataset, cfg)
        assert np.isfinite(result.losses[0])

    @pytest.mark.integration
    def test_caches_released_after_training(self, tiny_net_config, small_dataset, quick_train_config):
        """No conv, BN or block buffers from the last batch outlive train()."""
        net = build(tiny_net_config)
        train(net, small_dataset, quick_train_config.model_copy(update={"epochs": 1}))
        blocks = [b for group in net.groups.values() for b in group]
        units = [net.stem] + [u for b in blocks for u in list(b.layers) + ([b.shortcut] if b.shortcut else [])]
        assert all(u._input is None and u._conv_cache is None and u._bn_cache is None for u in units)
        assert all(b._output is None and b._relu_outputs == [] for b in blocks)
        assert net._cache == {}

    @pytest.mark.integration
    def test_predict_returns_class_ids(self, tiny_net_config, small_dataset):
        predicted = predict(build(tiny_net_config), small_dataset.images, batch_size=5)
        assert predicted.shape == (12,)
        assert predicted.min() >= 0 and predicted.max() < 3


class TestTrainErrors:
    """Divergence and bad inputs."""

    @pytest.mark.integration
    def test_non_finite_batch_diverges_and_keeps_last_good(self, tiny_net_config, small_dataset,
                                                          quick_train_config, tmp_path):
        """The saved checkpoint holds the parameters of the last completed epoch."""
        net = build(tiny_net_config)
        initial = checkpoint_from_network(net)
        images = small_dataset.images.copy()
        images[5, 0, 0, 0] = np.nan
        data = SimpleNamespace(images=images, labels=small_dataset.labels)
        with pytest.raises(DivergenceError) as info:
            train(net, data, quick_train_config, out_path=tmp_path / "net.rtpc")
        assert info.value.epoch == 0
        saved = read_checkpoint(info.value.checkpoint_path)
        assert diff_checkpoints(initial, saved) == []

    @pytest.mark.integration
    def test_label_outside_head(self, tiny_net_config, small_dataset, quick_train_config):
        data = SimpleNamespace(images=small_dataset.images, labels=small_dataset.labels + 5)
        with pytest.raises(DomainError):
            train(build(tiny_net_config), data, quick_train_config)
