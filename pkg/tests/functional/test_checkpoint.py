"""
Functional tests for backend/checkpoint.py - RTPC files, strict and non-strict loading.
"""
import numpy as np
import pytest

from backend.checkpoint import (
    checkpoint_from_network,
    decode_checkpoint,
    diff_checkpoints,
    encode_checkpoint,
    load_checkpoint,
    network_from_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from backend.errors import CheckpointError, DatasetIOError, FormatError
from backend.network import build, forward, set_frozen_groups


class TestCheckpointFile:
    """Tests for writing and reading RTPC files."""

    @pytest.mark.functional
    def test_restored_network_is_bitwise_identical(self, tiny_config, tiny_batch, tmp_path):
        net = build(tiny_config)
        path = save_checkpoint(net, tmp_path / "net.rtpc", epoch=4)
        restored = network_from_checkpoint(path)
        assert restored.config == tiny_config
        assert read_checkpoint(path).epoch == 4
        np.testing.assert_array_equal(forward(restored, tiny_batch).data, forward(net, tiny_batch).data)

    @pytest.mark.functional
    def test_frozen_groups_recorded(self, tiny_config, tmp_path):
        net = build(tiny_config)
        set_frozen_groups(net, ["conv1", "conv2_x"])
        path = save_checkpoint(net, tmp_path / "net.rtpc")
        assert read_checkpoint(path).frozen == {"conv1", "conv2_x"}
        assert network_from_checkpoint(path, apply_frozen=True).frozen_groups == {"conv1", "conv2_x"}

    @pytest.mark.functional
    def test_bad_magic(self, tiny_config):
        payload = bytearray(encode_checkpoint(checkpoint_from_network(build(tiny_config))))
        payload[:4] = b"RTPX"
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(payload))

    @pytest.mark.functional
    def test_truncated_record(self, tiny_config):
        payload = encode_checkpoint(checkpoint_from_network(build(tiny_config)))
        with pytest.raises(FormatError):
            decode_checkpoint(payload[:-3])

    @pytest.mark.functional
    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            read_checkpoint(tmp_path / "absent.rtpc")


class TestLoading:
    """Strict and non-strict parameter loading."""

    @pytest.mark.functional
    def test_single_pathway_into_both_non_strict(self, tiny_config):
        """conv5_1 weights transfer; conv5_2 and the head stay at their initial values."""
        source = build(tiny_config.model_copy(update={"pathways": "conv5_1_only", "seed": 99}))
        target = build(tiny_config)
        before = {n: p.data.copy() for n, p in target.parameters().items()}
        result = load_checkpoint(target, checkpoint_from_network(source), strict=False, exclude=["fc"])
        assert result.unknown == []
        assert all(name.startswith("conv5_2_x.") for name in result.missing)
        for name, p in target.parameters().items():
            if name.startswith("conv5_1_x."):
                np.testing.assert_array_equal(p.data, source.parameters()[name].data)
            elif name.startswith(("conv5_2_x.", "fc.")):
                np.testing.assert_array_equal(p.data, before[name])

    @pytest.mark.functional
    def test_strict_rejects_missing_names(self, tiny_config):
        source = build(tiny_config.model_copy(update={"pathways": "conv5_1_only"}))
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(build(tiny_config), checkpoint_from_network(source), strict=True)

    @pytest.mark.functional
    def test_shape_clash_is_always_an_error(self, tiny_config):
        """A head trained for another class count clashes even in non-strict mode."""
        source = build(tiny_config.model_copy(update={"num_classes": 3}))
        with pytest.raises(CheckpointError, match="shape clash"):
            load_checkpoint(build(tiny_config), checkpoint_from_network(source), strict=False)

    @pytest.mark.functional
    def test_excluding_the_head_avoids_the_clash(self, tiny_config):
        source = build(tiny_config.model_copy(update={"num_classes": 3}))
        result = load_checkpoint(build(tiny_config), checkpoint_from_network(source), strict=False, exclude=["fc"])
        assert "fc.weight" not in result.loaded


class TestDiff:
    @pytest.mark.functional
    def test_diff_names_changed_tensors(self, tiny_config):
        net = build(tiny_config)
        before = checkpoint_from_network(net)
        net.fc_bias.data[...] += 1.0
        after = checkpoint_from_network(net)
        assert diff_checkpoints(before, after) == ["fc.bias"]
        assert diff_checkpoints(before, after, names=["fc.weight"]) == []
