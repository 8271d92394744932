"""Fully connected layer and channel concatenation."""

from dataclasses import dataclass
import math
from typing import Dict, NamedTuple, Optional, Tuple

import torch

from app.core.errors import DimensionError
from app.kernels.tensor import default_dtype


@dataclass
class LinearParams:
    """Affine map ``v @ weight.T + bias`` with weight (out, in)."""

    weight: torch.Tensor
    bias: Optional[torch.Tensor] = None

    @classmethod
    def initialize(
        cls,
        in_features: int,
        out_features: int,
        generator: torch.Generator,
        bias: bool = True,
        zero: bool = False,
        std: Optional[float] = None,
    ) -> "LinearParams":
        dtype = default_dtype()
        if zero:
            weight = torch.zeros((out_features, in_features), dtype=dtype)
        else:
            scale = math.sqrt(2.0 / in_features) if std is None else std
            weight = torch.randn((out_features, in_features), generator=generator, dtype=dtype) * scale
        return cls(weight, torch.zeros(out_features, dtype=dtype) if bias else None)

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        tensors = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            tensors[f"{prefix}.bias"] = self.bias
        return tensors


class LinearGrads(NamedTuple):
    input: torch.Tensor
    weight: torch.Tensor
    bias: Optional[torch.Tensor]


def _check_fc(v: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]) -> None:
    if weight.dim() != 2:
        raise DimensionError(f"fully_connected: weight must be a matrix, got shape {tuple(weight.shape)}")
    if v.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"fully_connected: input length {v.shape[-1]} != weight columns {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"fully_connected: bias shape {tuple(bias.shape)} != ({weight.shape[0]},)"
        )


def fully_connected(v: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map on a vector (in,) or a batch of row vectors (M, in)."""
    _check_fc(v, weight, bias)
    out = v @ weight.T
    if bias is not None:
        out = out + bias
    return out


def fully_connected_backward(
    v: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor],
    upstream_grad: torch.Tensor,
) -> LinearGrads:
    _check_fc(v, weight, bias)
    rows = v.reshape(-1, v.shape[-1])
    grad_rows = upstream_grad.reshape(-1, weight.shape[0])
    grad_input = (grad_rows @ weight).reshape(v.shape)
    grad_weight = grad_rows.T @ rows
    grad_bias = grad_rows.sum(dim=0) if bias is not None else None
    return LinearGrads(grad_input, grad_weight, grad_bias)


def concat_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Channels of ``a`` occupy [0, C1), channels of ``b`` occupy [C1, C1 + C2)."""
    if a.dim() != 4 or b.dim() != 4:
        raise DimensionError(f"concat_channels: rank-4 tensors required, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels: batch/spatial axes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return torch.cat([a, b], dim=1)


def concat_channels_backward(upstream_grad: torch.Tensor, split: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split the gradient at channel ``split`` (= C1)."""
    return upstream_grad[:, :split].contiguous(), upstream_grad[:, split:].contiguous()
