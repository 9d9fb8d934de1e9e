"""
Unit tests for data/architecture_registry.py - group table and helper functions.
"""
import pytest

from data.architecture_registry import (
    ALL_GROUPS,
    GROUPS,
    block_label,
    canonical_group,
    get_group,
)


class TestArchitectureRegistry:
    """Tests for the group table."""

    @pytest.mark.unit
    def test_groups_in_table_order(self):
        assert [g["group"] for g in GROUPS] == [
            "conv1", "conv2_x", "conv3_x", "conv4_x", "conv5_2_x", "conv5_1_x",
        ]

    @pytest.mark.unit
    def test_pathways_differ_in_stride_and_dilation(self):
        """conv5_1_x downsamples; conv5_2_x keeps the size and dilates by 2."""
        assert (get_group("conv5_1_x")["stride"], get_group("conv5_1_x")["dilation"]) == (2, 1)
        assert (get_group("conv5_2_x")["stride"], get_group("conv5_2_x")["dilation"]) == (1, 2)

    @pytest.mark.unit
    def test_bottleneck_widths_are_four_times_basic(self):
        for entry in GROUPS[1:]:
            assert entry["bottleneck"][1] == 4 * entry["basic"][1]

    @pytest.mark.unit
    def test_entries_have_required_keys(self):
        for entry in GROUPS:
            for key in ("group", "basic", "bottleneck", "stride", "dilation", "output_size_224"):
                assert key in entry, f"Missing '{key}' in {entry['group']}"

    @pytest.mark.unit
    def test_head_is_last_group(self):
        assert ALL_GROUPS[-1] == "fc"


class TestHelpers:
    """Tests for alias resolution and labels."""

    @pytest.mark.unit
    def test_aliases(self):
        assert canonical_group("conv3") == "conv3_x"
        assert canonical_group("conv5_2") == "conv5_2_x"
        assert canonical_group("conv4_x") == "conv4_x"

    @pytest.mark.unit
    def test_get_group_by_alias(self):
        assert get_group("conv5_1")["output_size_224"] == 7

    @pytest.mark.unit
    def test_get_group_unknown(self):
        with pytest.raises(KeyError):
            get_group("conv9_x")

    @pytest.mark.unit
    def test_block_label(self):
        assert block_label("basic", 64, 64, 2) == "Basic(64,64)x2"
        assert block_label("bottleneck", 512, 2048, 3) == "Bottleneck(512,2048)x3"
