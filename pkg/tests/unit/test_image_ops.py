"""
Unit tests for backend/image_ops.py.
"""
import numpy as np
import pytest

from backend.errors import DimensionError
from backend.image_ops import center_fit, mirror, resize_bilinear, rotate_quarter


class TestResize:
    """Bilinear resizing with half-pixel centres."""

    @pytest.mark.unit
    def test_constant_image_stays_constant(self):
        image = np.full((3, 256, 256), 0.3, np.float32)
        out = resize_bilinear(image, 224, 224)
        assert out.shape == (3, 224, 224)
        np.testing.assert_allclose(out, 0.3, rtol=1e-6)

    @pytest.mark.unit
    def test_halving_averages_blocks(self):
        """An exact factor of two samples between pixel pairs."""
        image = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        expected = image.reshape(1, 2, 2, 2, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(resize_bilinear(image, 2, 2), expected)

    @pytest.mark.unit
    def test_output_within_input_range(self, rng):
        image = rng.random((3, 7, 9)).astype(np.float32)
        out = resize_bilinear(image, 13, 5)
        assert out.min() >= image.min() and out.max() <= image.max()

    @pytest.mark.unit
    def test_same_size_is_a_copy(self, rng):
        image = rng.random((3, 5, 5))
        out = resize_bilinear(image, 5, 5)
        np.testing.assert_array_equal(out, image)
        assert out is not image

    @pytest.mark.unit
    def test_bad_shape(self):
        with pytest.raises(DimensionError):
            resize_bilinear(np.zeros((4, 4)), 2, 2)
        with pytest.raises(DimensionError):
            resize_bilinear(np.zeros((1, 4, 4)), 0, 2)


class TestGeometry:
    """Rotation, mirroring and centre fitting."""

    @pytest.mark.unit
    def test_four_quarter_turns_are_identity(self, rng):
        image = rng.random((3, 6, 6))
        out = image
        for _ in range(4):
            out = rotate_quarter(out, 1)
        np.testing.assert_array_equal(out, image)

    @pytest.mark.unit
    def test_quarter_turn_is_clockwise(self):
        """The top-left pixel moves to the top-right corner."""
        image = np.zeros((1, 3, 3))
        image[0, 0, 0] = 1
        assert rotate_quarter(image, 1)[0, 0, 2] == 1

    @pytest.mark.unit
    def test_mirror_reverses_columns(self):
        image = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
        np.testing.assert_array_equal(mirror(image)[0], [[2, 1, 0], [5, 4, 3]])

    @pytest.mark.unit
    def test_center_crop(self):
        image = np.arange(36, dtype=np.float32).reshape(1, 6, 6)
        np.testing.assert_array_equal(center_fit(image, 2)[0], image[0, 2:4, 2:4])

    @pytest.mark.unit
    def test_edge_pad(self):
        image = np.arange(4, dtype=np.float32).reshape(1, 2, 2)
        out = center_fit(image, 4)
        assert out.shape == (1, 4, 4)
        assert out[0, 0, 0] == image[0, 0, 0]
        assert out[0, 3, 3] == image[0, 1, 1]
