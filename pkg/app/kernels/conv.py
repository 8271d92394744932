"""
Convolution and transposed convolution kernels with explicit backward passes.

Both kernels are written as im2col (``unfold``) / col2im (``fold``) plus a
grouped ``einsum``; no autograd is involved. Layout is NCHW.
"""

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional

import torch
import torch.nn.functional as F

from app.core.errors import ConfigurationError, DimensionError
from app.kernels.tensor import check_rank4, default_dtype


@dataclass
class ConvParams:
    """
    Convolution parameters.

    Attributes:
        weight: (C_out, C_in / groups, k_h, k_w)
        bias: (C_out,)
        stride: Spatial stride
        padding: Symmetric zero padding
        groups: Channel groups; C_in and C_out must both be divisible by it
    """

    weight: torch.Tensor
    bias: torch.Tensor
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple:
        return tuple(self.weight.shape[2:])

    @classmethod
    def initialize(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        generator: torch.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        zero: bool = False,
        std: Optional[float] = None,
    ) -> "ConvParams":
        """Kaiming fan-in init (std = sqrt(2 / fan_in)), zero bias."""
        if in_channels % groups or out_channels % groups:
            raise ConfigurationError(
                f"channels ({in_channels} -> {out_channels}) not divisible by groups {groups}"
            )
        shape = (out_channels, in_channels // groups, kernel, kernel)
        dtype = default_dtype()
        if zero:
            weight = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = (in_channels // groups) * kernel * kernel
            scale = math.sqrt(2.0 / fan_in) if std is None else std
            weight = torch.randn(shape, generator=generator, dtype=dtype) * scale
        return cls(weight, torch.zeros(out_channels, dtype=dtype), stride, padding, groups)

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class DeconvParams:
    """
    Transposed convolution parameters.

    Attributes:
        weight: (C_in, C_out, k_h, k_w)
        bias: (C_out,)
        stride: Upsampling stride
        padding: Cropping applied to each border of the scattered output
    """

    weight: torch.Tensor
    bias: torch.Tensor
    stride: int = 2
    padding: int = 1

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def initialize(
        cls,
        in_channels: int,
        out_channels: int,
        generator: torch.Generator,
        kernel: int = 4,
        stride: int = 2,
        padding: int = 1,
    ) -> "DeconvParams":
        dtype = default_dtype()
        # each output pixel receives (kernel / stride)^2 taps per input channel
        fan_in = in_channels * max(1, (kernel // stride) ** 2)
        weight = torch.randn(
            (in_channels, out_channels, kernel, kernel), generator=generator, dtype=dtype
        ) * math.sqrt(2.0 / fan_in)
        return cls(weight, torch.zeros(out_channels, dtype=dtype), stride, padding)

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class ConvGrads(NamedTuple):
    input: torch.Tensor
    weight: torch.Tensor
    bias: torch.Tensor


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return stride * (size - 1) - 2 * padding + kernel


def _check_conv(x: torch.Tensor, params: ConvParams) -> tuple:
    n, c, h, w = check_rank4(x, "conv2d input")
    c_out, c_in_g, kh, kw = params.weight.shape
    g = params.groups
    if c_out % g:
        raise DimensionError(f"conv2d: C_out {c_out} not divisible by groups {g}")
    if c != c_in_g * g:
        raise DimensionError(
            f"conv2d: input channel axis has {c}, weight expects {c_in_g * g} (groups={g})"
        )
    if params.bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {tuple(params.bias.shape)} != ({c_out},)")
    if h + 2 * params.padding < kh or w + 2 * params.padding < kw:
        raise DimensionError(
            f"conv2d: padded spatial size ({h + 2 * params.padding}, {w + 2 * params.padding}) "
            f"smaller than kernel ({kh}, {kw})"
        )
    h_out = conv_output_size(h, kh, params.stride, params.padding)
    w_out = conv_output_size(w, kw, params.stride, params.padding)
    return n, c, h, w, c_out, kh, kw, h_out, w_out


def conv2d(x: torch.Tensor, params: ConvParams) -> torch.Tensor:
    """
    Direct 2-D convolution (cross-correlation) plus bias.

    Output shape is (N, C_out, (H + 2p - k_h) / s + 1, (W + 2p - k_w) / s + 1).
    """
    n, c, h, w, c_out, kh, kw, h_out, w_out = _check_conv(x, params)
    g = params.groups
    cols = F.unfold(x, (kh, kw), padding=params.padding, stride=params.stride)
    cols = cols.reshape(n, g, (c // g) * kh * kw, h_out * w_out)
    weight = params.weight.reshape(g, c_out // g, -1)
    out = torch.einsum("gok,ngkl->ngol", weight, cols)
    out = out.reshape(n, c_out, h_out, w_out)
    return out + params.bias.view(1, -1, 1, 1)


def conv2d_backward(x: torch.Tensor, params: ConvParams, upstream_grad: torch.Tensor) -> ConvGrads:
    """Gradients of conv2d with respect to input, weight and bias."""
    n, c, h, w, c_out, kh, kw, h_out, w_out = _check_conv(x, params)
    if tuple(upstream_grad.shape) != (n, c_out, h_out, w_out):
        raise DimensionError(
            f"conv2d_backward: upstream gradient {tuple(upstream_grad.shape)} does not match "
            f"forward output {(n, c_out, h_out, w_out)}"
        )
    g = params.groups
    cols = F.unfold(x, (kh, kw), padding=params.padding, stride=params.stride)
    cols = cols.reshape(n, g, (c // g) * kh * kw, h_out * w_out)
    grad_out = upstream_grad.reshape(n, g, c_out // g, h_out * w_out)
    weight = params.weight.reshape(g, c_out // g, -1)

    grad_weight = torch.einsum("ngol,ngkl->gok", grad_out, cols).reshape(params.weight.shape)
    grad_bias = upstream_grad.sum(dim=(0, 2, 3))
    grad_cols = torch.einsum("gok,ngol->ngkl", weight, grad_out).reshape(n, c * kh * kw, h_out * w_out)
    grad_input = F.fold(
        grad_cols, (h, w), (kh, kw), padding=params.padding, stride=params.stride
    )
    return ConvGrads(grad_input, grad_weight, grad_bias)


def _check_deconv(x: torch.Tensor, params: DeconvParams) -> tuple:
    n, c, h, w = check_rank4(x, "deconv2d input")
    c_in, c_out, kh, kw = params.weight.shape
    if c != c_in:
        raise DimensionError(f"deconv2d: input channel axis has {c}, weight expects {c_in}")
    if params.bias.shape != (c_out,):
        raise DimensionError(f"deconv2d: bias shape {tuple(params.bias.shape)} != ({c_out},)")
    h_out = deconv_output_size(h, kh, params.stride, params.padding)
    w_out = deconv_output_size(w, kw, params.stride, params.padding)
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(
            f"deconv2d: kernel {kh}x{kw}, stride {params.stride}, padding {params.padding} "
            f"gives non-positive output ({h_out}, {w_out}) for input ({h}, {w})"
        )
    return n, c, h, w, c_out, kh, kw, h_out, w_out


def deconv2d(x: torch.Tensor, params: DeconvParams) -> torch.Tensor:
    """
    Transposed convolution: scatter every input pixel times the kernel onto a
    stride-spaced grid, then crop ``padding`` from each border.

    Output spatial size is stride * (H - 1) - 2 * padding + k; with k=4, s=2,
    p=1 it is exactly 2H x 2W.
    """
    n, c, h, w, c_out, kh, kw, h_out, w_out = _check_deconv(x, params)
    cols = torch.einsum("ik,nil->nkl", params.weight.reshape(c, -1), x.reshape(n, c, h * w))
    out = F.fold(cols, (h_out, w_out), (kh, kw), padding=params.padding, stride=params.stride)
    return out + params.bias.view(1, -1, 1, 1)


def deconv2d_backward(x: torch.Tensor, params: DeconvParams, upstream_grad: torch.Tensor) -> ConvGrads:
    n, c, h, w, c_out, kh, kw, h_out, w_out = _check_deconv(x, params)
    if tuple(upstream_grad.shape) != (n, c_out, h_out, w_out):
        raise DimensionError(
            f"deconv2d_backward: upstream gradient {tuple(upstream_grad.shape)} does not match "
            f"forward output {(n, c_out, h_out, w_out)}"
        )
    grad_cols = F.unfold(upstream_grad, (kh, kw), padding=params.padding, stride=params.stride)
    weight = params.weight.reshape(c, -1)
    grad_input = torch.einsum("ik,nkl->nil", weight, grad_cols).reshape(n, c, h, w)
    grad_weight = torch.einsum("nil,nkl->ik", x.reshape(n, c, h * w), grad_cols).reshape(
        params.weight.shape
    )
    grad_bias = upstream_grad.sum(dim=(0, 2, 3))
    return ConvGrads(grad_input, grad_weight, grad_bias)
