"""
Pooling kernels: max pooling, global average pooling and stochastic pooling.

Stochastic pooling reduces each (nonnegative) channel plane to one value.
In train mode one element is drawn with probability proportional to its
value; in eval mode the probability-weighted mean sum(y^2) / sum(y) is used.
"""

from typing import NamedTuple, Optional, Union

import torch
import torch.nn.functional as F

from app.core.errors import DimensionError, DomainError
from app.kernels.tensor import check_rank4
from app.schemas.config import PoolMode


def _pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def maxpool2d(t: torch.Tensor, window: int, stride: int) -> torch.Tensor:
    """Max over each window; window 1 with stride 2 is strided subsampling."""
    n, c, h, w = check_rank4(t, "maxpool2d input")
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} larger than spatial size ({h}, {w})")
    cols = F.unfold(t.reshape(n * c, 1, h, w), window, stride=stride)
    out = cols.max(dim=1).values
    return out.reshape(n, c, _pool_output_size(h, window, stride), _pool_output_size(w, window, stride))


def maxpool2d_backward(t: torch.Tensor, window: int, stride: int, upstream_grad: torch.Tensor) -> torch.Tensor:
    """Route each output gradient to the (first) arg-max of its window."""
    n, c, h, w = check_rank4(t, "maxpool2d input")
    cols = F.unfold(t.reshape(n * c, 1, h, w), window, stride=stride)
    arg = cols.argmax(dim=1, keepdim=True)
    grad_cols = torch.zeros_like(cols).scatter_(1, arg, upstream_grad.reshape(n * c, 1, -1))
    grad = F.fold(grad_cols, (h, w), window, stride=stride)
    return grad.reshape(n, c, h, w)


def global_avg_pool(t: torch.Tensor) -> torch.Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    check_rank4(t, "global_avg_pool input")
    return t.mean(dim=(2, 3))


def global_avg_pool_backward(t: torch.Tensor, upstream_grad: torch.Tensor) -> torch.Tensor:
    n, c, h, w = t.shape
    return (upstream_grad / (h * w)).view(n, c, 1, 1).expand(n, c, h, w).contiguous()


class StochasticPoolResult(NamedTuple):
    """
    Pooled values and the sampled flat positions.

    Attributes:
        pooled: (N, C) pooled value per channel plane
        indices: (N, C) flat index of the sampled element (train mode); -1 for
            all-zero planes; None in eval mode
    """

    pooled: torch.Tensor
    indices: Optional[torch.Tensor]


def stochastic_pool(
    t: torch.Tensor,
    generator: Optional[torch.Generator],
    mode: Union[PoolMode, str] = PoolMode.EVAL,
) -> StochasticPoolResult:
    """
    Stochastic pooling of every channel plane of a nonnegative tensor.

    Args:
        t: (N, C, H, W) tensor, typically post-ReLU
        generator: Seeded random source (required in train mode)
        mode: train samples, eval averages

    Raises:
        DomainError: If any value is negative
    """
    n, c, h, w = check_rank4(t, "stochastic_pool input")
    mode = PoolMode(mode)
    if bool((t < 0).any()):
        raise DomainError("stochastic pooling needs nonnegative activations (apply ReLU first)")
    flat = t.reshape(n * c, h * w)
    totals = flat.sum(dim=1)
    alive = totals > 0

    if mode == PoolMode.EVAL:
        squares = (flat * flat).sum(dim=1)
        pooled = torch.where(alive, squares / torch.where(alive, totals, torch.ones_like(totals)), torch.zeros_like(totals))
        return StochasticPoolResult(pooled.reshape(n, c), None)

    if generator is None:
        raise DomainError("train-mode stochastic pooling needs an explicit generator")
    indices = torch.full((n * c,), -1, dtype=torch.long)
    pooled = torch.zeros(n * c, dtype=t.dtype)
    if bool(alive.any()):
        rows = flat[alive]
        picks = torch.multinomial(rows / rows.sum(dim=1, keepdim=True), 1, generator=generator).squeeze(1)
        indices[alive] = picks
        pooled[alive] = rows.gather(1, picks.unsqueeze(1)).squeeze(1)
    return StochasticPoolResult(pooled.reshape(n, c), indices.reshape(n, c))


def stochastic_pool_backward(
    t: torch.Tensor,
    result: StochasticPoolResult,
    upstream_grad: torch.Tensor,
) -> torch.Tensor:
    """
    Gradient of stochastic pooling.

    Eval mode differentiates sum(y^2) / sum(y) exactly; train mode uses the
    straight-through rule (the whole gradient goes to the sampled element).
    """
    n, c, h, w = t.shape
    flat = t.reshape(n * c, h * w)
    g = upstream_grad.reshape(n * c, 1)

    if result.indices is None:
        totals = flat.sum(dim=1, keepdim=True)
        squares = (flat * flat).sum(dim=1, keepdim=True)
        alive = totals > 0
        safe = torch.where(alive, totals, torch.ones_like(totals))
        local = (2.0 * flat * safe - squares) / (safe * safe)
        grad = torch.where(alive, local, torch.zeros_like(local)) * g
        return grad.reshape(n, c, h, w)

    grad = torch.zeros_like(flat)
    idx = result.indices.reshape(n * c)
    sampled = idx >= 0
    rows = torch.nonzero(sampled).squeeze(1)
    grad[rows, idx[rows]] = g.squeeze(1)[rows]
    return grad.reshape(n, c, h, w)


def stochastic_pool_channel(
    plane: torch.Tensor,
    generator: Optional[torch.Generator],
    mode: Union[PoolMode, str] = PoolMode.EVAL,
) -> float:
    """Stochastic pooling of a single 2-D plane; 0 for an all-zero plane."""
    if plane.dim() != 2:
        raise DimensionError(f"stochastic_pool_channel expects a 2-D plane, got shape {tuple(plane.shape)}")
    result = stochastic_pool(plane.reshape(1, 1, *plane.shape), generator, mode)
    return float(result.pooled[0, 0])
