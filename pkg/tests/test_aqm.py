"""
Tests for the adaptive quantization module and the SE block.
"""

import math

import pytest
import torch

from app.core.errors import ConfigurationError, DimensionError, DomainError
from app.kernels.tensor import make_generator
from app.models.aqm import (
    AqmParams,
    AqmTrace,
    SeBlockParams,
    aqm_backward,
    aqm_forward,
    aqm_forward_trace,
    gate_levels,
    se_block,
)
from app.schemas.config import PoolMode


def positive_map(generator, shape=(2, 4, 3, 3)) -> torch.Tensor:
    return torch.rand(shape, generator=generator, dtype=torch.float64) + 0.05


class TestAqmForward:
    def test_zero_weights_halve_the_input(self, generator):
        y = positive_map(generator)
        gated, gates = aqm_forward(y, AqmParams.initialize(4))
        assert torch.equal(gates, torch.full((2, 4), 0.5, dtype=torch.float64))
        assert torch.allclose(gated, 0.5 * y, rtol=0, atol=1e-15)

    def test_identity_weights_gate_by_pooled_value(self):
        y = torch.tensor([[[[1.0]], [[3.0]]]], dtype=torch.float64)
        params = AqmParams(torch.eye(2, dtype=torch.float64), PoolMode.EVAL)
        gated, gates = aqm_forward(y, params)
        expected = torch.tensor([1 / (1 + math.exp(-1.0)), 1 / (1 + math.exp(-3.0))], dtype=torch.float64)
        assert torch.allclose(gates[0], expected)
        assert torch.allclose(gated.flatten(), expected * torch.tensor([1.0, 3.0], dtype=torch.float64))

    def test_gates_lie_strictly_between_zero_and_one(self, generator):
        params = AqmParams.initialize(4, generator, std=0.5)
        _, gates = aqm_forward(positive_map(generator), params)
        assert ((gates > 0) & (gates < 1)).all()

    def test_zero_channel_stays_zero(self, generator):
        y = positive_map(generator)
        y[:, 2] = 0.0
        params = AqmParams.initialize(4, generator, std=0.5)
        gated, _ = aqm_forward(y, params)
        assert not gated[:, 2].any()

    def test_train_mode_is_reproducible(self):
        y = positive_map(make_generator(3))
        params = AqmParams.initialize(4, make_generator(4), std=0.5, mode=PoolMode.TRAIN)
        first, _ = aqm_forward(y, params, make_generator(9))
        second, _ = aqm_forward(y, params, make_generator(9))
        assert torch.equal(first, second)

    def test_negative_activations(self, generator):
        y = positive_map(generator)
        y[0, 0, 0, 0] = -1.0
        with pytest.raises(DomainError):
            aqm_forward(y, AqmParams.initialize(4))

    def test_channel_count_must_match(self, generator):
        with pytest.raises(DimensionError):
            aqm_forward(positive_map(generator), AqmParams.initialize(3))


class TestAqmBackward:
    def test_zero_upstream_gives_zero_gradients(self, generator):
        y = positive_map(generator)
        params = AqmParams.initialize(4, generator, std=0.5)
        _, trace = aqm_forward_trace(y, params, None)
        grads = aqm_backward(trace, params, torch.zeros_like(y))
        assert not grads.input.any() and not grads.weight.any()

    def test_gradient_shapes(self, generator):
        y = positive_map(generator)
        params = AqmParams.initialize(4, generator, std=0.5, mode=PoolMode.TRAIN)
        _, trace = aqm_forward_trace(y, params, generator)
        grads = aqm_backward(trace, params, torch.ones_like(y))
        assert grads.input.shape == y.shape
        assert grads.weight.shape == (4, 4)


class TestGateLevels:
    def test_one_module_per_level(self, generator):
        levels = [positive_map(generator, (1, 4, s, s)) for s in (4, 2)]
        gated, traces = gate_levels(levels, [AqmParams.initialize(4), AqmParams.initialize(4)])
        assert len(gated) == len(traces) == 2
        assert all(isinstance(t, AqmTrace) for t in traces)
        assert all(torch.allclose(g, 0.5 * y) for g, y in zip(gated, levels))

    def test_shared_module(self, generator):
        levels = [positive_map(generator, (1, 4, s, s)) for s in (4, 2, 1)]
        gated, _ = gate_levels(levels, AqmParams.initialize(4))
        assert len(gated) == 3

    def test_parameter_count_mismatch(self, generator):
        levels = [positive_map(generator, (1, 4, 2, 2))] * 3
        with pytest.raises(ConfigurationError):
            gate_levels(levels, [AqmParams.initialize(4)] * 2)


class TestSeBlock:
    def test_zero_weights_halve_the_input(self, generator):
        y = torch.randn((2, 8, 3, 3), generator=generator, dtype=torch.float64)
        params = SeBlockParams.initialize(8, 4, generator, zero=True)
        assert torch.allclose(se_block(y, params), 0.5 * y, rtol=0, atol=1e-15)

    def test_reduction_must_divide_channels(self, generator):
        with pytest.raises(ConfigurationError):
            SeBlockParams.initialize(6, 4, generator)

    def test_shape_is_preserved(self, generator):
        y = torch.randn((1, 16, 5, 5), generator=generator, dtype=torch.float64)
        assert se_block(y, SeBlockParams.initialize(16, 4, generator)).shape == y.shape
