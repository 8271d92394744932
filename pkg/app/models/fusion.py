"""
Layer-weakening feature fusion.

The top-down pathway upsamples the level above with a x2 deconvolution,
compresses it with a 1x1 conv to a channel share that shrinks at every lower
merge (the layer-weakening schedule), and concatenates it with a 1x1 lateral
projection of the bottom-up feature so every merged map has exactly
``output_channels`` channels::

    Z = relu(C_conv * relu(D_dec^T * X))          (expansion-compression)
    P = concat(lateral(C_i), Z)                    (merge)

The ``add`` merge mode reproduces an FPN-style sum and ``none`` drops the
top-down pathway; both keep the output shapes of the concat mode.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from app.core.errors import ConfigurationError, DimensionError
from app.kernels.activations import relu, relu_backward
from app.kernels.conv import (
    ConvGrads,
    ConvParams,
    DeconvParams,
    conv2d,
    conv2d_backward,
    deconv2d,
    deconv2d_backward,
)
from app.kernels.linear import concat_channels, concat_channels_backward
from app.kernels.pooling import maxpool2d, maxpool2d_backward
from app.schemas.config import FusionConfig, MergeMode

logger = logging.getLogger(__name__)

LEVEL_NAMES = ("P2", "P3", "P4", "P5", "P6")


@dataclass
class PyramidInputs:
    """Bottom-up backbone outputs C2..C5 at strides 4, 8, 16, 32."""

    c2: torch.Tensor
    c3: torch.Tensor
    c4: torch.Tensor
    c5: torch.Tensor

    def levels(self) -> List[torch.Tensor]:
        return [self.c2, self.c3, self.c4, self.c5]

    def validate(self) -> None:
        """Check that each level is exactly half the spatial size of the one below."""
        levels = self.levels()
        for i, t in enumerate(levels):
            if t.dim() != 4:
                raise ConfigurationError(f"C{i + 2}: expected a rank-4 tensor, got {tuple(t.shape)}")
        for i in range(1, len(levels)):
            lower, upper = levels[i - 1], levels[i]
            if upper.shape[0] != lower.shape[0]:
                raise ConfigurationError(f"C{i + 2}: batch size differs from C{i + 1}")
            if lower.shape[2] != 2 * upper.shape[2] or lower.shape[3] != 2 * upper.shape[3]:
                raise ConfigurationError(
                    f"C{i + 2}: spatial size {tuple(upper.shape[2:])} is not half of "
                    f"C{i + 1} {tuple(lower.shape[2:])}"
                )


@dataclass
class PyramidOutputs:
    """Fused maps P2..P6 delivered to the detection head."""

    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor
    p6: torch.Tensor

    def levels(self) -> List[torch.Tensor]:
        return [self.p2, self.p3, self.p4, self.p5, self.p6]


@dataclass
class MergeStepParams:
    """
    Parameters of one merge step.

    Attributes:
        lateral: 1x1 conv projecting the bottom-up map
        deconv: x2 upsampler D_dec (absent in the none mode)
        compress: 1x1 compression C_conv to the scheduled share
        smooth: Optional 3x3 conv applied to the merged map
    """

    lateral: ConvParams
    deconv: Optional[DeconvParams] = None
    compress: Optional[ConvParams] = None
    smooth: Optional[ConvParams] = None


@dataclass
class FusionParams:
    """P5 projection plus the P4, P3, P2 merge steps (in that order)."""

    p5: ConvParams
    steps: List[MergeStepParams] = field(default_factory=list)

    @classmethod
    def initialize(
        cls,
        config: FusionConfig,
        in_channels: Sequence[int],
        generator: torch.Generator,
        top_only: bool = False,
    ) -> "FusionParams":
        """
        Random parameters consistent with ``config``.

        Args:
            config: Fusion configuration
            in_channels: Channel counts of C2..C5
            generator: Seeded random source
            top_only: Build only the P5 projection (single-map ablation)
        """
        if len(in_channels) != 4:
            raise ConfigurationError(f"expected channels of C2..C5, got {list(in_channels)}")
        out = config.output_channels
        p5 = ConvParams.initialize(in_channels[3], config.p5_channels, 1, generator)
        steps: List[MergeStepParams] = []
        if top_only:
            return cls(p5, steps)
        for step in range(3):
            bottom = in_channels[2 - step]
            step_params = MergeStepParams(
                lateral=ConvParams.initialize(bottom, config.lateral_channels(step), 1, generator)
            )
            if config.merge_mode != MergeMode.NONE:
                step_params.deconv = DeconvParams.initialize(
                    out,
                    out,
                    generator,
                    kernel=config.deconv_kernel,
                    stride=config.deconv_stride,
                    padding=config.deconv_padding,
                )
                step_params.compress = ConvParams.initialize(out, config.topdown_channels(step), 1, generator)
            if config.post_merge_smoothing:
                step_params.smooth = ConvParams.initialize(out, out, 3, generator, padding=1)
            steps.append(step_params)
        return cls(p5, steps)

    def named_tensors(self, prefix: str = "fusion") -> Dict[str, torch.Tensor]:
        tensors = dict(self.p5.named_tensors(f"{prefix}.p5"))
        for i, step in enumerate(self.steps):
            for part in ("lateral", "deconv", "compress", "smooth"):
                params = getattr(step, part)
                if params is not None:
                    tensors.update(params.named_tensors(f"{prefix}.steps.{i}.{part}"))
        return tensors


def _grad_entries(prefix: str, grads: ConvGrads) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.weight": grads.weight, f"{prefix}.bias": grads.bias}


class ExpandCompressTrace(NamedTuple):
    input: torch.Tensor
    expanded_pre: torch.Tensor
    expanded: torch.Tensor
    compressed_pre: torch.Tensor
    output: torch.Tensor


class ExpandCompressGrads(NamedTuple):
    input: torch.Tensor
    deconv: ConvGrads
    compress: ConvGrads


def expand_compress_forward(x: torch.Tensor, dec: DeconvParams, comp: ConvParams) -> ExpandCompressTrace:
    if comp.kernel_size != (1, 1):
        raise ConfigurationError(f"compression conv must be 1x1, got {comp.kernel_size}")
    if comp.in_channels != dec.out_channels:
        raise ConfigurationError(
            f"compression conv expects {comp.in_channels} channels, deconv yields {dec.out_channels}"
        )
    expanded_pre = deconv2d(x, dec)
    expanded = relu(expanded_pre)
    compressed_pre = conv2d(expanded, comp)
    return ExpandCompressTrace(x, expanded_pre, expanded, compressed_pre, relu(compressed_pre))


def expand_compress(
    x: torch.Tensor,
    dec: DeconvParams,
    comp: ConvParams,
    channels: Optional[int] = None,
) -> torch.Tensor:
    """
    Expansion-compression: ReLU(conv1x1(ReLU(deconv(X)))).

    Args:
        x: Map of the level above
        dec: x2 deconvolution
        comp: 1x1 compression conv
        channels: Scheduled channel share; checked against ``comp`` when given

    Raises:
        ConfigurationError: Compression channels differ from the schedule
    """
    if channels is not None and comp.out_channels != channels:
        raise ConfigurationError(
            f"compression conv yields {comp.out_channels} channels, schedule expects {channels}"
        )
    return expand_compress_forward(x, dec, comp).output


def expand_compress_backward(
    trace: ExpandCompressTrace,
    dec: DeconvParams,
    comp: ConvParams,
    upstream_grad: torch.Tensor,
) -> ExpandCompressGrads:
    g = relu_backward(trace.compressed_pre, upstream_grad)
    comp_grads = conv2d_backward(trace.expanded, comp, g)
    g = relu_backward(trace.expanded_pre, comp_grads.input)
    dec_grads = deconv2d_backward(trace.input, dec, g)
    return ExpandCompressGrads(dec_grads.input, dec_grads, comp_grads)


def lateral_merge(
    bottom_up: torch.Tensor,
    top_down: Optional[torch.Tensor],
    lateral: ConvParams,
    mode: MergeMode = MergeMode.CONCAT,
    output_channels: Optional[int] = None,
) -> torch.Tensor:
    """
    Merge a bottom-up map with the top-down map of the same resolution.

    Concat mode returns concat(conv1x1(bottom_up), top_down): the lateral
    channels come first. Add mode sums the two; none mode ignores top_down.

    Raises:
        DimensionError: Spatial sizes differ (malformed pyramid)
        ConfigurationError: Channel total differs from ``output_channels``
    """
    projected = conv2d(bottom_up, lateral)
    if mode == MergeMode.NONE or top_down is None:
        merged = projected
    else:
        if projected.shape[2:] != top_down.shape[2:] or projected.shape[0] != top_down.shape[0]:
            raise DimensionError(
                f"lateral_merge: bottom-up map {tuple(bottom_up.shape)} and top-down map "
                f"{tuple(top_down.shape)} differ in batch/spatial axes"
            )
        if mode == MergeMode.CONCAT:
            merged = concat_channels(projected, top_down)
        else:
            if projected.shape[1] != top_down.shape[1]:
                raise DimensionError(
                    f"lateral_merge(add): lateral yields {projected.shape[1]} channels, "
                    f"top-down has {top_down.shape[1]}"
                )
            merged = projected + top_down
    if output_channels is not None and merged.shape[1] != output_channels:
        raise ConfigurationError(
            f"merged map has {merged.shape[1]} channels, expected {output_channels}"
        )
    return merged


def lateral_merge_backward(
    bottom_up: torch.Tensor,
    lateral: ConvParams,
    mode: MergeMode,
    upstream_grad: torch.Tensor,
) -> Tuple[torch.Tensor, Optional[torch.Tensor], ConvGrads]:
    """Returns (bottom-up gradient, top-down gradient or None, lateral conv grads)."""
    if mode == MergeMode.CONCAT:
        g_lateral, g_top = concat_channels_backward(upstream_grad, lateral.out_channels)
    elif mode == MergeMode.ADD:
        g_lateral, g_top = upstream_grad, upstream_grad
    else:
        g_lateral, g_top = upstream_grad, None
    lat_grads = conv2d_backward(bottom_up, lateral, g_lateral)
    return lat_grads.input, g_top, lat_grads


class MergeTrace(NamedTuple):
    top_input: torch.Tensor
    expand: Optional[ExpandCompressTrace]
    merged: torch.Tensor
    output: torch.Tensor


class PyramidTrace(NamedTuple):
    p5: torch.Tensor
    steps: List[MergeTrace]


def _check_params(inputs: PyramidInputs, params: FusionParams, config: FusionConfig) -> None:
    if len(params.steps) != 3:
        raise ConfigurationError(f"fusion params hold {len(params.steps)} merge steps, expected 3")
    levels = inputs.levels()
    if params.p5.in_channels != levels[3].shape[1]:
        raise ConfigurationError(
            f"P5: projection expects {params.p5.in_channels} channels, C5 has {levels[3].shape[1]}"
        )
    if params.p5.out_channels != config.output_channels:
        raise ConfigurationError(
            f"P5: projection yields {params.p5.out_channels} channels, expected {config.output_channels}"
        )
    for step, step_params in enumerate(params.steps):
        name = LEVEL_NAMES[2 - step]
        bottom = levels[2 - step]
        if step_params.lateral.in_channels != bottom.shape[1]:
            raise ConfigurationError(
                f"{name}: lateral expects {step_params.lateral.in_channels} channels, "
                f"C{4 - step} has {bottom.shape[1]}"
            )
        if step_params.lateral.out_channels != config.lateral_channels(step):
            raise ConfigurationError(
                f"{name}: lateral yields {step_params.lateral.out_channels} channels, "
                f"schedule gives {config.lateral_channels(step)}"
            )
        if config.merge_mode == MergeMode.NONE:
            continue
        if step_params.deconv is None or step_params.compress is None:
            raise ConfigurationError(f"{name}: top-down parameters missing for {config.merge_mode.value} mode")
        if step_params.compress.out_channels != config.topdown_channels(step):
            raise ConfigurationError(
                f"{name}: compression yields {step_params.compress.out_channels} channels, "
                f"schedule gives {config.topdown_channels(step)}"
            )


def build_pyramid_forward(
    inputs: PyramidInputs, params: FusionParams, config: FusionConfig
) -> Tuple[PyramidOutputs, PyramidTrace]:
    inputs.validate()
    _check_params(inputs, params, config)
    levels = inputs.levels()

    p5 = conv2d(inputs.c5, params.p5)
    top = p5
    traces: List[MergeTrace] = []
    for step, step_params in enumerate(params.steps):
        expand = None
        top_down = None
        if config.merge_mode != MergeMode.NONE:
            expand = expand_compress_forward(top, step_params.deconv, step_params.compress)
            top_down = expand.output
        merged = lateral_merge(
            levels[2 - step], top_down, step_params.lateral, config.merge_mode, config.output_channels
        )
        output = conv2d(merged, step_params.smooth) if step_params.smooth is not None else merged
        traces.append(MergeTrace(top, expand, merged, output))
        top = merged

    outputs = PyramidOutputs(
        p2=traces[2].output,
        p3=traces[1].output,
        p4=traces[0].output,
        p5=p5,
        p6=maxpool2d(p5, 1, 2),
    )
    return outputs, PyramidTrace(p5, traces)


def build_pyramid(inputs: PyramidInputs, params: FusionParams, config: FusionConfig) -> PyramidOutputs:
    """
    Build P2..P6 from C2..C5.

    P5 is a 1x1 projection of C5; P4..P2 are built top-down by
    expand_compress then lateral_merge, optionally smoothed by a 3x3 conv;
    P6 is P5 subsampled by max pooling with window 1, stride 2.
    """
    return build_pyramid_forward(inputs, params, config)[0]


def build_pyramid_backward(
    inputs: PyramidInputs,
    trace: PyramidTrace,
    params: FusionParams,
    config: FusionConfig,
    level_grads: Sequence[Optional[torch.Tensor]],
    prefix: str = "fusion",
) -> Tuple[List[torch.Tensor], Dict[str, torch.Tensor]]:
    """
    Backpropagate gradients of P2..P6 to C2..C5 and to the fusion parameters.

    Args:
        level_grads: Gradients of P2..P6; None means zero

    Returns:
        (gradients of C2..C5, parameter gradients keyed like named_tensors)
    """
    outputs = [trace.steps[2].output, trace.steps[1].output, trace.steps[0].output, trace.p5]
    p6 = maxpool2d(trace.p5, 1, 2)
    grads_in = [
        g if g is not None else torch.zeros_like(ref)
        for g, ref in zip(level_grads, outputs + [p6])
    ]
    levels = inputs.levels()
    param_grads: Dict[str, torch.Tensor] = {}
    input_grads: List[Optional[torch.Tensor]] = [None] * 4

    g_p5 = grads_in[3] + maxpool2d_backward(trace.p5, 1, 2, grads_in[4])
    carry: Optional[torch.Tensor] = None
    for step in reversed(range(len(params.steps))):
        step_params, step_trace = params.steps[step], trace.steps[step]
        step_prefix = f"{prefix}.steps.{step}"
        g_merged = grads_in[2 - step]
        if step_params.smooth is not None:
            smooth_grads = conv2d_backward(step_trace.merged, step_params.smooth, g_merged)
            param_grads.update(_grad_entries(f"{step_prefix}.smooth", smooth_grads))
            g_merged = smooth_grads.input
        if carry is not None:
            g_merged = g_merged + carry

        g_bottom, g_top, lat_grads = lateral_merge_backward(
            levels[2 - step], step_params.lateral, config.merge_mode, g_merged
        )
        param_grads.update(_grad_entries(f"{step_prefix}.lateral", lat_grads))
        input_grads[2 - step] = g_bottom

        carry = None
        if step_trace.expand is not None and g_top is not None:
            ec_grads = expand_compress_backward(step_trace.expand, step_params.deconv, step_params.compress, g_top)
            param_grads.update(_grad_entries(f"{step_prefix}.deconv", ec_grads.deconv))
            param_grads.update(_grad_entries(f"{step_prefix}.compress", ec_grads.compress))
            carry = ec_grads.input

    if carry is not None:
        g_p5 = g_p5 + carry
    p5_grads = conv2d_backward(inputs.c5, params.p5, g_p5)
    param_grads.update(_grad_entries(f"{prefix}.p5", p5_grads))
    input_grads[3] = p5_grads.input
    return input_grads, param_grads
