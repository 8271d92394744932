"""
Analytical FLOP and parameter counting over declarative architectures.

Convention: one multiply-accumulate counts as one FLOP. Batch norm adds 2C
parameters and no MACs; max pooling adds no MACs; global average pooling
adds C*H*W; an SE block adds 2*C^2/r plus its C*H*W squeeze.
"""

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from pydantic import ValidationError

from app.core.errors import ConfigurationError, ParseError
from app.core.storage import atomic_write_text
from app.schemas.config import BackboneConfig
from app.schemas.modelspec import GraphSpec, LayerKind, LayerSpec, StridePlacement
from app.schemas.reports import CostReport, StageCost

logger = logging.getLogger(__name__)

_STAGE_WIDTHS = (64, 128, 256, 512)
_STAGE_BLOCKS = (3, 4, 6, 3)


def resnet50_spec() -> GraphSpec:
    """ResNet-50 (v1: the stride sits on the first 1x1 conv of each stage)."""
    layers = [
        LayerSpec(kind=LayerKind.CONV, stage="conv1", in_channels=3, out_channels=64,
                  kernel=7, stride=2, padding=3, batch_norm=True),
        LayerSpec(kind=LayerKind.POOL, stage="conv1", in_channels=64, out_channels=64,
                  kernel=3, stride=2, padding=1),
    ]
    in_channels = 64
    for i, (width, blocks) in enumerate(zip(_STAGE_WIDTHS, _STAGE_BLOCKS)):
        out_channels = width * 4
        layers.append(
            LayerSpec(
                kind=LayerKind.RESIDUAL_BLOCK,
                stage=f"conv{i + 2}_x",
                in_channels=in_channels,
                mid_channels=width,
                out_channels=out_channels,
                stride=1 if i == 0 else 2,
                repeat=blocks,
                batch_norm=True,
            )
        )
        in_channels = out_channels
    layers += [
        LayerSpec(kind=LayerKind.GLOBAL_POOL, stage="fc", in_channels=2048, out_channels=2048),
        LayerSpec(kind=LayerKind.FC, stage="fc", in_channels=2048, out_channels=1000, bias=True),
    ]
    return GraphSpec(name="resnet50", input_shape=(3, 224, 224), layers=layers)


def se_resnext50_spec(stride_on: Optional[StridePlacement] = None) -> GraphSpec:
    """
    SE-ResNeXt-50 (32x4d): grouped 3x3 bottlenecks of twice the ResNet width
    and an SE block (r = 16, FC biases) closing every block.

    By default conv3_x strides its grouped 3x3 conv and the other stages
    stride the first 1x1, which puts the cost at 3.93 GFLOPs. ``stride_on``
    applies one placement to every stage instead: FIRST gives 3.78 GFLOPs,
    MIDDLE 4.24 GFLOPs. Parameters do not depend on the placement.
    """
    spec = resnet50_spec()
    layers = []
    for layer in spec.layers:
        if layer.kind == LayerKind.RESIDUAL_BLOCK:
            layer = layer.model_copy(
                update={
                    "mid_channels": layer.mid_channels * 2,
                    "groups": 32,
                    "se_reduction": 16,
                    "stride_on": stride_on or (
                        StridePlacement.MIDDLE if layer.stage == "conv3_x" else StridePlacement.FIRST
                    ),
                }
            )
        layers.append(layer)
    return GraphSpec(name="se_resnext50", input_shape=spec.input_shape, layers=layers)


def toy_backbone_spec(config: BackboneConfig, image_size: int = 64) -> GraphSpec:
    """Cost description of the executable toy backbone."""
    layers = [
        LayerSpec(kind=LayerKind.CONV, stage="stem", in_channels=config.in_channels,
                  out_channels=config.stem_channels, kernel=3, stride=2, padding=1, bias=True)
    ]
    previous = config.stem_channels
    for i, width in enumerate(config.stage_channels):
        stage = f"C{i + 2}"
        layers.append(LayerSpec(kind=LayerKind.CONV, stage=stage, in_channels=previous, out_channels=width,
                                kernel=3, stride=1 if i == 0 else 2, padding=1, bias=True))
        layers.append(LayerSpec(kind=LayerKind.CONV, stage=stage, in_channels=width, out_channels=width,
                                kernel=3, padding=1, bias=True))
        if config.se:
            layers.append(LayerSpec(kind=LayerKind.SE, stage=stage, in_channels=width, out_channels=width,
                                    se_reduction=config.se_reduction))
        previous = width
    return GraphSpec(name="toy-backbone", input_shape=(config.in_channels, image_size, image_size), layers=layers)


BUILTIN_SPECS = {
    "resnet50": resnet50_spec,
    "se_resnext50": se_resnext50_spec,
    "se-resnext50": se_resnext50_spec,
}


def _out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_cost(
    c_in: int, c_out: int, kernel: int, stride: int, padding: int, groups: int,
    h: int, w: int, bias: bool, batch_norm: bool,
) -> Tuple[int, int, int, int]:
    """(MACs, params, H_out, W_out) of one convolution."""
    h_out, w_out = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(f"conv {c_in}->{c_out} k{kernel} s{stride} collapses a {h}x{w} input")
    weights = c_out * (c_in // groups) * kernel * kernel
    params = weights + (c_out if bias else 0) + (2 * c_out if batch_norm else 0)
    return weights * h_out * w_out, params, h_out, w_out


def _se_cost(channels: int, reduction: int, h: int, w: int) -> Tuple[int, int]:
    if channels % reduction:
        raise ConfigurationError(f"SE block: {channels} channels not divisible by reduction {reduction}")
    hidden = channels // reduction
    macs = 2 * channels * hidden + channels * h * w
    params = 2 * channels * hidden + hidden + channels
    return macs, params


def _residual_cost(layer: LayerSpec, h: int, w: int) -> Tuple[int, int, int, int]:
    macs = params = 0
    mid, out = layer.mid_channels, layer.out_channels
    for block in range(layer.repeat):
        c_in = layer.in_channels if block == 0 else out
        stride = layer.stride if block == 0 else 1
        first_stride = stride if layer.stride_on == StridePlacement.FIRST else 1
        middle_stride = stride if layer.stride_on == StridePlacement.MIDDLE else 1

        m1, p1, h1, w1 = _conv_cost(c_in, mid, 1, first_stride, 0, 1, h, w, layer.bias, layer.batch_norm)
        m2, p2, h2, w2 = _conv_cost(mid, mid, 3, middle_stride, 1, layer.groups, h1, w1, layer.bias, layer.batch_norm)
        m3, p3, h3, w3 = _conv_cost(mid, out, 1, 1, 0, 1, h2, w2, layer.bias, layer.batch_norm)
        macs += m1 + m2 + m3
        params += p1 + p2 + p3
        if block == 0 and (c_in != out or stride != 1):
            ms, ps, _, _ = _conv_cost(c_in, out, 1, stride, 0, 1, h, w, layer.bias, layer.batch_norm)
            macs += ms
            params += ps
        if layer.se_reduction:
            ms, ps = _se_cost(out, layer.se_reduction, h3, w3)
            macs += ms
            params += ps
        h, w = h3, w3
    return macs, params, h, w


def validate_spec(spec: GraphSpec) -> None:
    """
    Check channel chaining from layer to layer.

    Raises:
        ConfigurationError: Names the first inconsistent layer
    """
    channels = spec.input_shape[0]
    for i, layer in enumerate(spec.layers):
        if layer.in_channels != channels:
            raise ConfigurationError(
                f"{spec.name}: layer {i} ({layer.kind.value}, stage '{layer.stage}') expects "
                f"{layer.in_channels} input channels, previous layer yields {channels}"
            )
        channels = layer.out_channels


def count_cost(spec: GraphSpec, input_shape: Optional[Sequence[int]] = None) -> CostReport:
    """
    MACs and parameters of one forward pass.

    Args:
        spec: Architecture description
        input_shape: (N, C, H, W); defaults to batch 1 at spec.input_shape

    Raises:
        ConfigurationError: Inconsistent spec (the message names the layer)
    """
    validate_spec(spec)
    if input_shape is None:
        input_shape = (1, *spec.input_shape)
    n, c, h, w = (int(d) for d in input_shape)
    if c != spec.input_shape[0]:
        raise ConfigurationError(f"{spec.name}: input has {c} channels, spec expects {spec.input_shape[0]}")

    stages: Dict[str, List[int]] = OrderedDict()
    flat = False
    channels = c
    for i, layer in enumerate(spec.layers):
        if flat and layer.kind != LayerKind.FC:
            raise ConfigurationError(f"{spec.name}: layer {i} ({layer.kind.value}) follows a flattening layer")
        if layer.kind in (LayerKind.CONV, LayerKind.GROUPED_CONV):
            macs, params, h, w = _conv_cost(
                layer.in_channels, layer.out_channels, layer.kernel, layer.stride, layer.padding,
                layer.groups, h, w, layer.bias, layer.batch_norm,
            )
        elif layer.kind == LayerKind.POOL:
            macs, params = 0, 0
            h, w = _out_size(h, layer.kernel, layer.stride, layer.padding), _out_size(w, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == LayerKind.GLOBAL_POOL:
            macs, params = layer.in_channels * h * w, 0
            h = w = 1
            flat = True
        elif layer.kind == LayerKind.SE:
            macs, params = _se_cost(layer.in_channels, layer.se_reduction, h, w)
        elif layer.kind == LayerKind.RESIDUAL_BLOCK:
            macs, params, h, w = _residual_cost(layer, h, w)
        else:
            macs = layer.in_channels * layer.out_channels
            params = macs + (layer.out_channels if layer.bias else 0)
            flat = True
        channels = layer.out_channels
        totals = stages.setdefault(layer.stage or f"layer{i}", [0, 0])
        totals[0] += macs * n
        totals[1] += params

    output_shape = (n, channels) if flat else (n, channels, h, w)
    report = CostReport(
        name=spec.name,
        input_shape=(n, c, int(input_shape[2]), int(input_shape[3])),
        output_shape=output_shape,
        total_macs=sum(v[0] for v in stages.values()),
        params=sum(v[1] for v in stages.values()),
        stages=[StageCost(stage=name, macs=v[0], params=v[1]) for name, v in stages.items()],
    )
    logger.info(f"{spec.name}: {report.gflops:.3f} GFLOPs, {report.params / 1e6:.2f}M params")
    return report


def load_graph_spec(path: Union[str, Path]) -> GraphSpec:
    """Read a GraphSpec from its JSON text form."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read spec file {path}: {e}") from e
    try:
        spec = GraphSpec.model_validate_json(text)
    except ValidationError as e:
        raise ConfigurationError(f"invalid spec file {path}: {e.errors()[0]['msg']}") from e
    validate_spec(spec)
    return spec


def save_graph_spec(spec: GraphSpec, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, spec.model_dump_json(indent=2) + "\n")


def resolve_spec(name_or_path: str, backbone: Optional[BackboneConfig] = None) -> GraphSpec:
    """Built-in spec name (resnet50, se_resnext50, toy) or a JSON spec file."""
    if name_or_path in BUILTIN_SPECS:
        return BUILTIN_SPECS[name_or_path]()
    if name_or_path == "toy":
        return toy_backbone_spec(backbone or BackboneConfig())
    return load_graph_spec(name_or_path)
