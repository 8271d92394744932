"""
Tests for the tensor kernels: convolution, transposed convolution,
activations, pooling, linear layers, losses, gradient checking and the
LFFT tensor container.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from app.core.errors import ConfigurationError, DataError, DimensionError, DomainError, LabelIndexError, VersionError
from app.kernels.activations import relu, relu_backward, sigmoid
from app.kernels.conv import ConvParams, DeconvParams, conv2d, conv2d_backward, deconv2d, deconv2d_backward
from app.kernels.gradcheck import grad_check
from app.kernels.linear import concat_channels, concat_channels_backward, fully_connected
from app.kernels.losses import smooth_l1, softmax_cross_entropy
from app.kernels.pooling import maxpool2d, stochastic_pool, stochastic_pool_channel
from app.kernels.tensor import load_tensor, make_generator, save_tensor, tensor_from_bytes, tensor_to_bytes
from app.schemas.config import PoolMode


def t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)


def direct_conv(x, weight, bias, stride, padding, groups=1):
    """Nested-loop cross-correlation."""
    n, _, h, w = x.shape
    c_out, c_per_group, kh, kw = weight.shape
    padded = F.pad(x, (padding, padding, padding, padding))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out_per_group = c_out // groups
    out = torch.zeros((n, c_out, h_out, w_out), dtype=torch.float64)
    for b in range(n):
        for o in range(c_out):
            first = (o // out_per_group) * c_per_group
            for i in range(h_out):
                for j in range(w_out):
                    acc = float(bias[o])
                    for c in range(c_per_group):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(padded[b, first + c, i * stride + u, j * stride + v]) * float(weight[o, c, u, v])
                    out[b, o, i, j] = acc
    return out


def direct_deconv(x, weight, bias, stride, padding):
    """Scatter every input pixel times the kernel, then crop the padding."""
    n, c_in, h, w = x.shape
    _, c_out, kh, kw = weight.shape
    full = torch.zeros((n, c_out, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=torch.float64)
    for b in range(n):
        for c in range(c_in):
            for i in range(h):
                for j in range(w):
                    full[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[b, c, i, j] * weight[c]
    h_out = stride * (h - 1) - 2 * padding + kh
    w_out = stride * (w - 1) - 2 * padding + kw
    return full[:, :, padding:padding + h_out, padding:padding + w_out] + bias.view(1, -1, 1, 1)


class TestConv2d:
    def test_scalar_multiply(self):
        params = ConvParams(t([[[[3.0]]]]), t([0.0]))
        out = conv2d(t([[[[2.0]]]]), params)
        assert out.shape == (1, 1, 1, 1)
        assert float(out) == 6.0

    def test_identity_kernel(self, generator):
        x = torch.randn((1, 1, 3, 3), generator=generator, dtype=torch.float64)
        out = conv2d(x, ConvParams(t([[[[1.0]]]]), t([0.0])))
        assert torch.equal(out, x)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_oracle(self, seed):
        g = make_generator(seed)
        x = torch.randn((1, 2, 4, 4), generator=g, dtype=torch.float64)
        params = ConvParams(
            torch.randn((3, 2, 3, 3), generator=g, dtype=torch.float64),
            torch.randn(3, generator=g, dtype=torch.float64),
            stride=1,
            padding=1,
        )
        expected = direct_conv(x, params.weight, params.bias, 1, 1)
        assert torch.allclose(conv2d(x, params), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_grouped_strided_matches_direct_oracle(self, seed):
        g = make_generator(100 + seed)
        x = torch.randn((2, 4, 5, 5), generator=g, dtype=torch.float64)
        params = ConvParams(
            torch.randn((6, 2, 3, 3), generator=g, dtype=torch.float64),
            torch.randn(6, generator=g, dtype=torch.float64),
            stride=2,
            padding=1,
            groups=2,
        )
        expected = direct_conv(x, params.weight, params.bias, 2, 1, groups=2)
        assert torch.allclose(conv2d(x, params), expected, rtol=0, atol=1e-12)

    def test_scalar_backward(self):
        params = ConvParams(t([[[[3.0]]]]), t([0.0]))
        grads = conv2d_backward(t([[[[2.0]]]]), params, t([[[[1.0]]]]))
        assert float(grads.input) == 3.0
        assert float(grads.weight) == 2.0
        assert float(grads.bias) == 1.0

    def test_zero_upstream_gives_zero_gradients(self, generator):
        x = torch.randn((1, 2, 4, 4), generator=generator, dtype=torch.float64)
        params = ConvParams.initialize(2, 3, 3, generator, padding=1)
        grads = conv2d_backward(x, params, torch.zeros((1, 3, 4, 4), dtype=torch.float64))
        assert not grads.input.any() and not grads.weight.any() and not grads.bias.any()

    def test_channel_mismatch(self, generator):
        params = ConvParams.initialize(2, 3, 3, generator, padding=1)
        with pytest.raises(DimensionError):
            conv2d(torch.zeros((1, 5, 4, 4), dtype=torch.float64), params)

    def test_rank_is_checked(self, generator):
        params = ConvParams.initialize(2, 3, 3, generator, padding=1)
        with pytest.raises(DimensionError):
            conv2d(torch.zeros((2, 4, 4), dtype=torch.float64), params)

    def test_groups_must_divide_channels(self, generator):
        with pytest.raises(ConfigurationError):
            ConvParams.initialize(3, 4, 3, generator, groups=2)

    def test_initialization_is_seeded(self):
        a = ConvParams.initialize(4, 8, 3, make_generator(7))
        b = ConvParams.initialize(4, 8, 3, make_generator(7))
        assert torch.equal(a.weight, b.weight)


class TestDeconv2d:
    def test_single_pixel_all_ones_kernel(self):
        params = DeconvParams(torch.ones((1, 1, 4, 4), dtype=torch.float64), t([0.0]), stride=2, padding=1)
        out = deconv2d(t([[[[1.0]]]]), params)
        assert out.shape == (1, 1, 2, 2)
        assert torch.equal(out, torch.ones((1, 1, 2, 2), dtype=torch.float64))

    @pytest.mark.parametrize("size", [1, 2, 7])
    def test_doubles_spatial_size(self, size, generator):
        params = DeconvParams.initialize(1, 1, generator)
        out = deconv2d(torch.ones((1, 1, size, size), dtype=torch.float64), params)
        assert out.shape == (1, 1, 2 * size, 2 * size)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scatter_oracle(self, seed):
        g = make_generator(200 + seed)
        x = torch.randn((1, 2, 3, 3), generator=g, dtype=torch.float64)
        params = DeconvParams(
            torch.randn((2, 3, 4, 4), generator=g, dtype=torch.float64),
            torch.randn(3, generator=g, dtype=torch.float64),
        )
        expected = direct_deconv(x, params.weight, params.bias, 2, 1)
        assert torch.allclose(deconv2d(x, params), expected, rtol=0, atol=1e-12)

    def test_non_positive_output_is_rejected(self):
        params = DeconvParams(torch.ones((1, 1, 1, 1), dtype=torch.float64), t([0.0]), stride=1, padding=1)
        with pytest.raises(ConfigurationError):
            deconv2d(t([[[[1.0]]]]), params)

    def test_backward_upstream_shape_is_checked(self, generator):
        params = DeconvParams.initialize(2, 2, generator)
        x = torch.ones((1, 2, 3, 3), dtype=torch.float64)
        with pytest.raises(DimensionError):
            deconv2d_backward(x, params, torch.ones((1, 2, 3, 3), dtype=torch.float64))


class TestActivations:
    def test_relu(self):
        assert torch.equal(relu(t([-1.0, 0.0, 2.0])), t([0.0, 0.0, 2.0]))

    def test_relu_gradient_is_zero_at_the_hinge(self):
        assert torch.equal(relu_backward(t([-1.0, 0.0, 2.0]), t([1.0, 1.0, 1.0])), t([0.0, 0.0, 1.0]))

    def test_sigmoid(self):
        assert float(sigmoid(t([0.0]))) == 0.5

    def test_sigmoid_is_finite_for_large_inputs(self):
        out = sigmoid(t([-1000.0, 1000.0]))
        assert torch.isfinite(out).all()
        assert float(out[0]) == 0.0 and float(out[1]) == 1.0


class TestPooling:
    def test_maxpool_window(self):
        out = maxpool2d(t([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert out.shape == (1, 1, 1, 1)
        assert float(out) == 4.0

    def test_maxpool_constant(self):
        out = maxpool2d(torch.full((1, 2, 4, 4), 1.5, dtype=torch.float64), 2, 2)
        assert torch.equal(out, torch.full((1, 2, 2, 2), 1.5, dtype=torch.float64))

    def test_maxpool_matches_window_oracle(self, generator):
        x = torch.randn((1, 3, 8, 8), generator=generator, dtype=torch.float64)
        expected = x.reshape(1, 3, 4, 2, 4, 2).amax(dim=(3, 5))
        assert torch.equal(maxpool2d(x, 2, 2), expected)

    def test_maxpool_window_too_large(self):
        with pytest.raises(DimensionError):
            maxpool2d(torch.zeros((1, 1, 2, 2), dtype=torch.float64), 3, 1)

    @pytest.mark.parametrize("mode", [PoolMode.TRAIN, PoolMode.EVAL])
    def test_stochastic_constant_plane(self, mode, generator):
        plane = torch.full((3, 3), 0.7, dtype=torch.float64)
        assert stochastic_pool_channel(plane, generator, mode) == pytest.approx(0.7, abs=1e-15)

    @pytest.mark.parametrize("mode", [PoolMode.TRAIN, PoolMode.EVAL])
    def test_stochastic_zero_plane(self, mode, generator):
        assert stochastic_pool_channel(torch.zeros((2, 2), dtype=torch.float64), generator, mode) == 0.0

    def test_stochastic_eval_is_probability_weighted_mean(self):
        assert stochastic_pool_channel(t([[1.0, 3.0]]), None, PoolMode.EVAL) == pytest.approx(2.5)

    def test_stochastic_train_samples_proportionally(self, generator):
        planes = t([1.0, 3.0]).repeat(4000, 1).reshape(4000, 1, 1, 2)
        result = stochastic_pool(planes, generator, PoolMode.TRAIN)
        picked = result.pooled.flatten()
        assert set(picked.unique().tolist()) <= {1.0, 3.0}
        assert float((picked == 3.0).double().mean()) == pytest.approx(0.75, abs=0.03)

    def test_stochastic_train_is_reproducible(self):
        planes = torch.rand((2, 4, 3, 3), generator=make_generator(1), dtype=torch.float64)
        a = stochastic_pool(planes, make_generator(5), PoolMode.TRAIN)
        b = stochastic_pool(planes, make_generator(5), PoolMode.TRAIN)
        assert torch.equal(a.pooled, b.pooled) and torch.equal(a.indices, b.indices)

    def test_stochastic_rejects_negative_values(self, generator):
        with pytest.raises(DomainError):
            stochastic_pool(t([[[[1.0, -0.5]]]]), generator, PoolMode.EVAL)

    def test_stochastic_train_needs_generator(self):
        with pytest.raises(DomainError):
            stochastic_pool(t([[[[1.0, 0.5]]]]), None, PoolMode.TRAIN)


class TestLinear:
    def test_hand_arithmetic(self):
        assert torch.equal(fully_connected(t([4.0, 5.0]), t([[1.0, 2.0]]), t([3.0])), t([17.0]))

    def test_identity(self, generator):
        v = torch.randn(5, generator=generator, dtype=torch.float64)
        assert torch.equal(fully_connected(v, torch.eye(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64)), v)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            fully_connected(t([1.0, 2.0, 3.0]), t([[1.0, 2.0]]))

    def test_concat_shape(self):
        out = concat_channels(torch.zeros((1, 3, 4, 4)), torch.zeros((1, 5, 4, 4)))
        assert out.shape == (1, 8, 4, 4)

    def test_concat_with_empty_operand(self, generator):
        a = torch.randn((1, 3, 4, 4), generator=generator, dtype=torch.float64)
        assert torch.equal(concat_channels(a, torch.zeros((1, 0, 4, 4), dtype=torch.float64)), a)

    def test_concat_slices_back_exactly(self, generator):
        a = torch.randn((2, 3, 4, 4), generator=generator, dtype=torch.float64)
        b = torch.randn((2, 5, 4, 4), generator=generator, dtype=torch.float64)
        first, second = concat_channels_backward(concat_channels(a, b), 3)
        assert torch.equal(first, a) and torch.equal(second, b)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            concat_channels(torch.zeros((1, 3, 4, 4)), torch.zeros((1, 3, 2, 2)))


class TestLosses:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(torch.zeros(4, dtype=torch.float64), 2)
        assert loss == pytest.approx(math.log(4))

    def test_gradient_is_softmax_minus_onehot(self):
        _, grad = softmax_cross_entropy(torch.zeros(4, dtype=torch.float64), 2)
        assert torch.allclose(grad, t([0.25, 0.25, -0.75, 0.25]))

    def test_label_out_of_range(self):
        with pytest.raises(LabelIndexError):
            softmax_cross_entropy(torch.zeros(3, dtype=torch.float64), 3)

    def test_label_error_is_an_index_error(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(torch.zeros((2, 3), dtype=torch.float64), torch.tensor([0, -1]))

    def test_smooth_l1_identical(self, generator):
        v = torch.randn(8, generator=generator, dtype=torch.float64)
        loss, grad = smooth_l1(v, v.clone())
        assert loss == 0.0 and not grad.any()

    @pytest.mark.parametrize("x, expected", [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_smooth_l1_piecewise(self, x, expected):
        loss, _ = smooth_l1(t([x]), t([0.0]))
        assert loss == pytest.approx(expected)


class TestGradCheck:
    def _conv_case(self, generator):
        x = torch.randn((1, 2, 5, 5), generator=generator, dtype=torch.float64)
        params = ConvParams.initialize(2, 3, 3, generator, stride=2, padding=1)
        params.bias = torch.randn(3, generator=generator, dtype=torch.float64)
        upstream = torch.randn((1, 3, 3, 3), generator=generator, dtype=torch.float64)
        grads = conv2d_backward(x, params, upstream)

        def loss():
            return float((conv2d(x, params) * upstream).sum())

        tensors = {"input": x, "weight": params.weight, "bias": params.bias}
        analytic = {"input": grads.input, "weight": grads.weight, "bias": grads.bias}
        return loss, tensors, analytic

    def test_conv2d_passes(self, generator):
        loss, tensors, analytic = self._conv_case(generator)
        report = grad_check("conv2d", loss, tensors, analytic, tolerance=1e-6)
        assert report.passed, report.max_relative_error

    def test_corrupted_backward_fails(self, generator):
        loss, tensors, analytic = self._conv_case(generator)
        analytic["weight"] = analytic["weight"] * 1.01
        report = grad_check("conv2d_corrupted", loss, tensors, analytic, tolerance=1e-6)
        assert not report.passed
        assert report.max_relative_error > 1e-3

    def test_relu_away_from_the_hinge(self, generator):
        x = torch.randn(32, generator=generator, dtype=torch.float64)
        x = x.sign() * (x.abs() + 0.1)
        upstream = torch.randn(32, generator=generator, dtype=torch.float64)
        report = grad_check(
            "relu",
            lambda: float((relu(x) * upstream).sum()),
            {"x": x},
            {"x": relu_backward(x, upstream)},
        )
        assert report.passed

    def test_small_gradients_are_judged_relatively(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        scale = 1e-3
        report = grad_check(
            "scaled_square",
            lambda: float(scale * (x ** 2).sum()),
            {"x": x},
            {"x": 1.05 * 2 * scale * x},
            tolerance=1e-6,
            abs_tolerance=1e-12,
        )
        assert not report.passed
        assert report.failed_entries == 2
        assert report.max_relative_error == pytest.approx(0.05 / 1.05, rel=1e-3)
        assert report.max_absolute_error == pytest.approx(0.05 * 2 * scale * 2.0, rel=1e-3)

    def test_absolute_tolerance_accepts_tiny_mismatches(self):
        x = torch.tensor([1.0, 2.0], dtype=torch.float64)
        report = grad_check(
            "tiny_gradient",
            lambda: float(1e-7 * (x ** 2).sum()),
            {"x": x},
            {"x": torch.zeros(2, dtype=torch.float64)},
            tolerance=1e-6,
        )
        assert report.passed
        assert report.max_relative_error == pytest.approx(1.0)

    def test_tensors_are_restored(self, generator):
        loss, tensors, analytic = self._conv_case(generator)
        before = {k: v.clone() for k, v in tensors.items()}
        grad_check("conv2d", loss, tensors, analytic, max_entries=5, generator=generator)
        assert all(torch.equal(before[k], tensors[k]) for k in tensors)


class TestTensorContainer:
    def test_save_and_load(self, tmp_path, generator):
        x = torch.randn((2, 3, 4, 5), generator=generator, dtype=torch.float64)
        path = save_tensor(tmp_path / "x.lfft", x)
        assert torch.equal(load_tensor(path), x)

    def test_low_rank_tensors_are_padded(self):
        blob = tensor_to_bytes(t([1.0, 2.0, 3.0]))
        assert tensor_from_bytes(blob).shape == (1, 1, 1, 3)
        assert torch.equal(tensor_from_bytes(blob, (3,)), t([1.0, 2.0, 3.0]))

    def test_bad_magic(self):
        blob = bytearray(tensor_to_bytes(t([1.0])))
        blob[:4] = b"XXXX"
        with pytest.raises(VersionError):
            tensor_from_bytes(bytes(blob))

    def test_truncated_payload(self):
        with pytest.raises(VersionError):
            tensor_from_bytes(tensor_to_bytes(t([1.0, 2.0]))[:-3])

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_tensor(tmp_path / "absent.lfft")
