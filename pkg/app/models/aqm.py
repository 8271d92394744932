"""
Adaptive quantization module and SE channel recalibration.

The adaptive quantization module gates each channel of a (post-ReLU) fused
map by a sigmoid of a linear mix of stochastically pooled channel values::

    P = [stochastic_pool(y_1), ..., stochastic_pool(y_C)]
    G = sigmoid(W_FC P)
    y'_c = G_c * y_c

Despite the name nothing here reduces numeric precision.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch

from app.core.errors import ConfigurationError, DimensionError
from app.kernels.activations import relu, relu_backward, sigmoid, sigmoid_backward
from app.kernels.linear import LinearParams, fully_connected, fully_connected_backward
from app.kernels.pooling import (
    StochasticPoolResult,
    global_avg_pool,
    global_avg_pool_backward,
    stochastic_pool,
    stochastic_pool_backward,
)
from app.kernels.tensor import check_rank4, default_dtype
from app.schemas.config import PoolMode

logger = logging.getLogger(__name__)


@dataclass
class AqmParams:
    """
    Parameters of one adaptive quantization module.

    Attributes:
        weight: Square W_FC (C, C), no bias
        mode: train samples the pooling, eval uses the weighted average
    """

    weight: torch.Tensor
    mode: PoolMode = PoolMode.EVAL

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def initialize(
        cls,
        channels: int,
        generator: Optional[torch.Generator] = None,
        std: float = 0.0,
        mode: PoolMode = PoolMode.EVAL,
    ) -> "AqmParams":
        """Zero init (every gate starts at 0.5) unless ``std`` is positive."""
        dtype = default_dtype()
        if std > 0:
            weight = torch.randn((channels, channels), generator=generator, dtype=dtype) * std
        else:
            weight = torch.zeros((channels, channels), dtype=dtype)
        return cls(weight, PoolMode(mode))

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {f"{prefix}.weight": self.weight}


class AqmTrace(NamedTuple):
    input: torch.Tensor
    pool: StochasticPoolResult
    gates: torch.Tensor


class AqmGrads(NamedTuple):
    input: torch.Tensor
    weight: torch.Tensor


def _check_aqm(y: torch.Tensor, params: AqmParams) -> None:
    _, c, _, _ = check_rank4(y, "aqm input")
    if params.weight.dim() != 2 or params.weight.shape[0] != params.weight.shape[1]:
        raise DimensionError(f"aqm: W_FC must be square, got {tuple(params.weight.shape)}")
    if c != params.channels:
        raise DimensionError(f"aqm: input has {c} channels, W_FC expects {params.channels}")


def aqm_forward_trace(
    y: torch.Tensor, params: AqmParams, generator: Optional[torch.Generator]
) -> Tuple[torch.Tensor, AqmTrace]:
    _check_aqm(y, params)
    pool = stochastic_pool(y, generator, params.mode)
    gates = sigmoid(fully_connected(pool.pooled, params.weight))
    gated = y * gates.unsqueeze(-1).unsqueeze(-1)
    return gated, AqmTrace(y, pool, gates)


def aqm_forward(
    y: torch.Tensor, params: AqmParams, generator: Optional[torch.Generator] = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Gate every channel of ``y``.

    Args:
        y: (N, C, H, W) nonnegative map
        params: Square W_FC with side C
        generator: Random source for train-mode pooling

    Returns:
        (gated map, gates of shape (N, C) in (0, 1))

    Raises:
        DomainError: Negative activations
        DimensionError: Channel count differs from W_FC
    """
    gated, trace = aqm_forward_trace(y, params, generator)
    return gated, trace.gates


def aqm_backward(trace: AqmTrace, params: AqmParams, upstream_grad: torch.Tensor) -> AqmGrads:
    """Gradients for Y and W_FC; train mode routes the pooling gradient straight through."""
    y, gates = trace.input, trace.gates
    grad_gates = (upstream_grad * y).sum(dim=(2, 3))
    grad_logits = sigmoid_backward(gates, grad_gates)
    fc = fully_connected_backward(trace.pool.pooled, params.weight, None, grad_logits)
    grad_input = upstream_grad * gates.unsqueeze(-1).unsqueeze(-1)
    grad_input = grad_input + stochastic_pool_backward(y, trace.pool, fc.input)
    return AqmGrads(grad_input, fc.weight)


@dataclass
class SeBlockParams:
    """
    Squeeze-and-excitation parameters.

    Attributes:
        squeeze: FC C -> C/r (with bias)
        excite: FC C/r -> C (with bias)
        reduction: Ratio r
    """

    squeeze: LinearParams
    excite: LinearParams
    reduction: int = 16

    @property
    def channels(self) -> int:
        return self.squeeze.weight.shape[1]

    @classmethod
    def initialize(
        cls,
        channels: int,
        reduction: int,
        generator: torch.Generator,
        zero: bool = False,
    ) -> "SeBlockParams":
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"SE block: {channels} channels not divisible by reduction {reduction}")
        hidden = channels // reduction
        return cls(
            LinearParams.initialize(channels, hidden, generator, zero=zero),
            LinearParams.initialize(hidden, channels, generator, zero=zero),
            reduction,
        )

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        tensors = dict(self.squeeze.named_tensors(f"{prefix}.squeeze"))
        tensors.update(self.excite.named_tensors(f"{prefix}.excite"))
        return tensors


class SeTrace(NamedTuple):
    input: torch.Tensor
    squeezed: torch.Tensor
    hidden_pre: torch.Tensor
    hidden: torch.Tensor
    gates: torch.Tensor


class SeGrads(NamedTuple):
    input: torch.Tensor
    params: Dict[str, torch.Tensor]


def se_block_forward(y: torch.Tensor, params: SeBlockParams) -> Tuple[torch.Tensor, SeTrace]:
    _, c, _, _ = check_rank4(y, "se_block input")
    if c % params.reduction:
        raise ConfigurationError(f"SE block: {c} channels not divisible by reduction {params.reduction}")
    if c != params.channels:
        raise DimensionError(f"se_block: input has {c} channels, parameters expect {params.channels}")
    squeezed = global_avg_pool(y)
    hidden_pre = fully_connected(squeezed, params.squeeze.weight, params.squeeze.bias)
    hidden = relu(hidden_pre)
    gates = sigmoid(fully_connected(hidden, params.excite.weight, params.excite.bias))
    out = y * gates.unsqueeze(-1).unsqueeze(-1)
    return out, SeTrace(y, squeezed, hidden_pre, hidden, gates)


def se_block(y: torch.Tensor, params: SeBlockParams) -> torch.Tensor:
    """Global average pool, FC, ReLU, FC, sigmoid, then channelwise scaling."""
    return se_block_forward(y, params)[0]


def se_block_backward(
    trace: SeTrace, params: SeBlockParams, upstream_grad: torch.Tensor, prefix: str = "se"
) -> SeGrads:
    y, gates = trace.input, trace.gates
    grad_gates = (upstream_grad * y).sum(dim=(2, 3))
    excite = fully_connected_backward(
        trace.hidden, params.excite.weight, params.excite.bias, sigmoid_backward(gates, grad_gates)
    )
    squeeze = fully_connected_backward(
        trace.squeezed,
        params.squeeze.weight,
        params.squeeze.bias,
        relu_backward(trace.hidden_pre, excite.input),
    )
    grad_input = upstream_grad * gates.unsqueeze(-1).unsqueeze(-1)
    grad_input = grad_input + global_avg_pool_backward(y, squeeze.input)
    grads = {
        f"{prefix}.squeeze.weight": squeeze.weight,
        f"{prefix}.squeeze.bias": squeeze.bias,
        f"{prefix}.excite.weight": excite.weight,
        f"{prefix}.excite.bias": excite.bias,
    }
    return SeGrads(grad_input, grads)


def gate_levels(
    levels: Sequence[torch.Tensor],
    params: Union[AqmParams, List[AqmParams]],
    generator: Optional[torch.Generator] = None,
) -> Tuple[List[torch.Tensor], List[AqmTrace]]:
    """
    Apply one AQM per level (or one shared AQM to every level).

    Returns:
        (gated levels, per-level traces)
    """
    per_level = params if isinstance(params, list) else [params] * len(levels)
    if len(per_level) != len(levels):
        raise ConfigurationError(f"{len(per_level)} AQM parameter sets for {len(levels)} levels")
    gated, traces = [], []
    for level, level_params in zip(levels, per_level):
        out, trace = aqm_forward_trace(level, level_params, generator)
        gated.append(out)
        traces.append(trace)
    return gated, traces
