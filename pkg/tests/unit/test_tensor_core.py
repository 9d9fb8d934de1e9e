"""
Unit tests for backend/tensor_core.py - convolution, pooling, BN, activations and the classifier head.
"""
import math

import numpy as np
import pytest

from backend.errors import DimensionError, DomainError, NumericError
from backend.tensor_core import (
    ConvParams,
    Parameter,
    Tensor,
    batch_norm,
    conv2d,
    conv2d_backward,
    conv2d_direct,
    conv_output_size,
    fully_connected,
    global_avg_pool,
    max_pool2x2,
    max_pool2x2_backward,
    relu,
    softmax_cross_entropy,
)


def _conv(weights, stride=1, dilation=1, padding=0, bias=None):
    return ConvParams(weights=Tensor(weights), stride=stride, dilation=dilation, padding=padding,
                      bias=None if bias is None else Tensor(bias))


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestTensor:
    """Tests for the Tensor container."""

    @pytest.mark.unit
    def test_rejects_non_4d(self):
        """A 3-D array is not a tensor."""
        with pytest.raises(DimensionError):
            Tensor(np.zeros((2, 3, 4)))

    @pytest.mark.unit
    def test_rejects_empty_axis(self):
        """Zero-length axes are named in the error."""
        with pytest.raises(DimensionError) as info:
            Tensor(np.zeros((1, 0, 2, 2)))
        assert info.value.axis == "channel"

    @pytest.mark.unit
    def test_parameter_owns_grad_buffer(self):
        """Trainable parameters allocate a zero grad; buffers do not."""
        p = Parameter(np.ones((1, 2, 1, 1), np.float32), name="w")
        b = Parameter(np.ones((1, 2, 1, 1), np.float32), name="rm", buffer=True)
        assert p.grad is not None and not p.grad.any()
        assert b.grad is None


class TestConvolution:
    """Tests for conv2d and its backward pass."""

    @pytest.mark.unit
    def test_box_sum_of_ones(self):
        """3x3 ones on 3x3 ones with pad 1: centre 9, corners 4."""
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), _conv(np.ones((1, 1, 3, 3)), padding=1)).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
        assert out[0, 1] == 6.0

    @pytest.mark.unit
    def test_stride_two_halves_spatial_size(self, rng):
        """A 56x56 map through a stride-2 3x3 conv with pad 1 comes out 28x28."""
        x = Tensor(rng.standard_normal((1, 16, 56, 56)).astype(np.float32))
        out = conv2d(x, _conv(rng.standard_normal((8, 16, 3, 3)).astype(np.float32), stride=2, padding=1))
        assert out.shape == (1, 8, 28, 28)

    @pytest.mark.unit
    def test_dilated_matches_loop_oracle(self, rng):
        """d=2, pad=2 on a 7x7 input equals the direct nested-loop evaluation."""
        x = Tensor(rng.standard_normal((1, 1, 7, 7)))
        p = _conv(rng.standard_normal((1, 1, 3, 3)), dilation=2, padding=2)
        fast, slow = conv2d(x, p), conv2d_direct(x, p)
        assert fast.shape == (1, 1, 7, 7)
        assert _rel(fast.data, slow.data) <= 1e-6

    @pytest.mark.unit
    @pytest.mark.parametrize("case", range(50))
    def test_dilation_equals_zero_interleaved_kernel(self, case):
        """A d=2 3x3 kernel acts like the 5x5 d=1 kernel holding its taps on even positions."""
        rng = np.random.default_rng(case)
        c_in, c_out = rng.integers(1, 4), rng.integers(1, 4)
        size = int(rng.integers(5, 10))
        stride = int(rng.integers(1, 3))
        x = Tensor(rng.standard_normal((2, c_in, size, size)))
        w3 = rng.standard_normal((c_out, c_in, 3, 3))
        w5 = np.zeros((c_out, c_in, 5, 5))
        w5[:, :, ::2, ::2] = w3
        dilated = conv2d(x, _conv(w3, stride=stride, dilation=2, padding=2))
        dense = conv2d(x, _conv(w5, stride=stride, dilation=1, padding=2))
        oracle = conv2d_direct(x, _conv(w3, stride=stride, dilation=2, padding=2))
        assert _rel(dilated.data, dense.data) <= 1e-6
        assert _rel(dilated.data, oracle.data) <= 1e-6

    @pytest.mark.unit
    def test_output_size_formula_against_independent_calculator(self):
        """floor((H + 2p - ((k-1)d + 1)) / s) + 1 over a grid of settings."""
        for k in (1, 3, 7):
            for s in (1, 2):
                for d in (1, 2):
                    for pad in range(4):
                        size = 20
                        expected = len(range(0, size + 2 * pad - (k - 1) * d, s))
                        assert conv_output_size(size, k, s, d, pad) == expected

    @pytest.mark.unit
    def test_kernel_larger_than_input_is_rejected(self):
        """Effective extent 5 cannot fit a 3-pixel input without padding."""
        with pytest.raises(DimensionError):
            conv_output_size(3, 3, 1, 2, 0)

    @pytest.mark.unit
    def test_channel_mismatch_names_axis(self):
        """The error names the channel axis."""
        with pytest.raises(DimensionError) as info:
            conv2d(Tensor(np.ones((1, 2, 4, 4))), _conv(np.ones((1, 3, 3, 3))))
        assert info.value.axis == "channel"

    @pytest.mark.unit
    def test_non_finite_input_is_numeric_error(self):
        """NaN in the input aborts the op."""
        x = np.ones((1, 1, 4, 4))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            conv2d(Tensor(x), _conv(np.ones((1, 1, 3, 3))))

    @pytest.mark.unit
    def test_zero_upstream_gives_zero_gradients(self, rng):
        """All gradients vanish for a zero upstream gradient."""
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        p = _conv(rng.standard_normal((3, 2, 3, 3)), padding=1, bias=np.zeros((1, 3, 1, 1)))
        gx, gw, gb = conv2d_backward(x, p, Tensor(np.zeros((1, 3, 5, 5))))
        assert not gx.data.any() and not gw.data.any() and not gb.data.any()

    @pytest.mark.unit
    def test_identity_kernel_passes_gradient_through(self, rng):
        """A 1x1 identity kernel returns the upstream gradient unchanged."""
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        upstream = Tensor(rng.standard_normal((2, 3, 4, 4)))
        gx, _, _ = conv2d_backward(x, _conv(np.eye(3).reshape(3, 3, 1, 1)), upstream)
        np.testing.assert_array_equal(gx.data, upstream.data)

    @pytest.mark.unit
    def test_backward_accumulates_into_grad_buffer(self, rng):
        """Two backward calls double the stored weight gradient."""
        x = Tensor(rng.standard_normal((1, 1, 5, 5)))
        weights = Parameter(rng.standard_normal((1, 1, 3, 3)), name="w")
        p = ConvParams(weights=weights, padding=1)
        upstream = Tensor(rng.standard_normal((1, 1, 5, 5)))
        _, gw, _ = conv2d_backward(x, p, upstream)
        conv2d_backward(x, p, upstream)
        np.testing.assert_allclose(weights.grad, 2 * gw.data)

    @pytest.mark.unit
    def test_forward_leaves_input_untouched(self, rng):
        """Ops are pure with respect to their inputs."""
        data = rng.standard_normal((1, 2, 6, 6))
        before = data.copy()
        conv2d(Tensor(data), _conv(rng.standard_normal((2, 2, 3, 3)), dilation=2, padding=2))
        np.testing.assert_array_equal(data, before)


class TestPooling:
    """Tests for max pooling and global average pooling."""

    @pytest.mark.unit
    def test_window_maximum(self):
        """[[1,2],[3,4]] pools to 4."""
        out, _ = max_pool2x2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.item() == 4.0

    @pytest.mark.unit
    def test_matches_loop_oracle(self, rng):
        """Random 1x2x6x6 against a nested-loop max."""
        x = rng.standard_normal((1, 2, 6, 6))
        out, _ = max_pool2x2(Tensor(x))
        oracle = np.zeros((1, 2, 3, 3))
        for c in range(2):
            for i in range(3):
                for j in range(3):
                    oracle[0, c, i, j] = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
        np.testing.assert_array_equal(out.data, oracle)

    @pytest.mark.unit
    def test_stem_output_pools_to_56(self):
        """112x112 halves to 56x56."""
        out, _ = max_pool2x2(Tensor(np.zeros((1, 1, 112, 112), np.float32)))
        assert out.shape == (1, 1, 56, 56)

    @pytest.mark.unit
    def test_odd_sides_are_rejected(self):
        """Odd spatial sizes raise a dimension error."""
        with pytest.raises(DimensionError) as info:
            max_pool2x2(Tensor(np.zeros((1, 1, 5, 4))))
        assert info.value.axis == "height"

    @pytest.mark.unit
    def test_backward_routes_to_argmax(self):
        """Only the winning entry of each window receives gradient."""
        x = Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]]))
        _, cache = max_pool2x2(x)
        grad = max_pool2x2_backward(cache, Tensor(np.array([[[[2.0]]]])))
        np.testing.assert_array_equal(grad.data[0, 0], [[0.0, 2.0], [0.0, 0.0]])

    @pytest.mark.unit
    def test_gap_of_constant(self):
        """GAP of a spatially constant channel returns the constant."""
        out = global_avg_pool(Tensor(np.full((1, 2, 3, 3), 2.5)))
        np.testing.assert_array_equal(out.data.ravel(), [2.5, 2.5])

    @pytest.mark.unit
    def test_gap_times_area_is_spatial_sum(self):
        """GAP scaled by h*w equals the spatial sum exactly for power-of-two areas."""
        x = np.arange(32, dtype=np.float64).reshape(1, 2, 4, 4)
        out = global_avg_pool(Tensor(x)).data * 16
        np.testing.assert_array_equal(out.ravel(), x.sum(axis=(2, 3)).ravel())


class TestBatchNorm:
    """Tests for batch normalization."""

    def _params(self, c, gamma=1.0, beta=0.0):
        return (Tensor(np.full((1, c, 1, 1), gamma)), Tensor(np.full((1, c, 1, 1), beta)),
                Tensor(np.zeros((1, c, 1, 1))), Tensor(np.ones((1, c, 1, 1))))

    @pytest.mark.unit
    def test_constant_channel_outputs_beta(self):
        """Zero variance is absorbed by epsilon; the output is beta."""
        gamma, beta, rm, rv = self._params(2, gamma=3.0, beta=0.7)
        out, _ = batch_norm(Tensor(np.full((4, 2, 2, 2), 5.0)), gamma, beta, rm, rv, mode="train")
        np.testing.assert_allclose(out.data, 0.7)

    @pytest.mark.unit
    def test_train_statistics(self, rng):
        """Per-channel output mean is beta and variance is gamma^2."""
        gamma = Tensor(np.array([0.5, 2.0, 1.5]).reshape(1, 3, 1, 1))
        beta = Tensor(np.array([-1.0, 0.0, 3.0]).reshape(1, 3, 1, 1))
        _, _, rm, rv = self._params(3)
        out, _ = batch_norm(Tensor(rng.standard_normal((4, 3, 2, 2)) * 4 + 2), gamma, beta, rm, rv, mode="train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), beta.data.ravel(), atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), gamma.data.ravel() ** 2, atol=1e-4 * 4)

    @pytest.mark.unit
    def test_running_stats_move_by_momentum(self, rng):
        """Running mean moves 10% of the way to the batch mean."""
        x = rng.standard_normal((8, 1, 3, 3)) + 4.0
        gamma, beta, rm, rv = self._params(1)
        batch_norm(Tensor(x), gamma, beta, rm, rv, mode="train")
        assert rm.data.item() == pytest.approx(0.1 * x.mean())

    @pytest.mark.unit
    def test_eval_uses_running_stats(self):
        """With running mean 0 and variance 1, eval mode is the identity up to epsilon."""
        gamma, beta, rm, rv = self._params(1)
        x = np.linspace(-2, 2, 8).reshape(2, 1, 2, 2)
        out, _ = batch_norm(Tensor(x), gamma, beta, rm, rv, mode="eval")
        np.testing.assert_allclose(out.data, x, rtol=1e-5)
        assert rm.data.item() == 0.0


class TestHead:
    """Tests for ReLU, FC and softmax cross-entropy."""

    @pytest.mark.unit
    def test_relu(self):
        out = relu(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 2.0])

    @pytest.mark.unit
    def test_uniform_logits_loss_is_log_n(self):
        """Uniform logits over 45 classes cost ln 45."""
        loss, grad = softmax_cross_entropy(Tensor(np.zeros((3, 45, 1, 1))), [0, 10, 44])
        assert loss == pytest.approx(math.log(45))
        assert loss == pytest.approx(3.8067, abs=1e-4)
        assert grad.data.sum() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.unit
    def test_label_out_of_range_is_domain_error(self):
        """Label index >= N is rejected."""
        with pytest.raises(DomainError):
            softmax_cross_entropy(Tensor(np.zeros((1, 4, 1, 1))), [4])

    @pytest.mark.unit
    def test_fully_connected_shape(self, rng):
        """(3, 5) features through a 4-way FC give (3, 4, 1, 1) logits."""
        out = fully_connected(Tensor(rng.standard_normal((3, 5, 1, 1))), Tensor(rng.standard_normal((4, 5, 1, 1))),
                              Tensor(np.zeros((1, 4, 1, 1))))
        assert out.shape == (3, 4, 1, 1)
