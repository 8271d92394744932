"""
Executable toy backbone producing C2..C5.

A 3x3 stride-2 stem is followed by four stages of (conv 3x3 -> ReLU ->
conv 3x3 -> ReLU [-> SE]). The first stage keeps the stem resolution and
each later stage enters with stride 2, so a 64x64 image yields C2..C5 of
32, 16, 8 and 4 pixels and the outputs satisfy the pyramid halving rule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from app.core.errors import ConfigurationError
from app.kernels.activations import relu, relu_backward
from app.kernels.conv import ConvParams, conv2d, conv2d_backward
from app.models.aqm import SeBlockParams, SeTrace, se_block_backward, se_block_forward
from app.models.fusion import PyramidInputs
from app.schemas.config import BackboneConfig

logger = logging.getLogger(__name__)


@dataclass
class StageParams:
    entry: ConvParams
    body: ConvParams
    se: Optional[SeBlockParams] = None

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        tensors = dict(self.entry.named_tensors(f"{prefix}.entry"))
        tensors.update(self.body.named_tensors(f"{prefix}.body"))
        if self.se is not None:
            tensors.update(self.se.named_tensors(f"{prefix}.se"))
        return tensors


class ConvTrace(NamedTuple):
    input: torch.Tensor
    pre: torch.Tensor


class BackboneTrace(NamedTuple):
    stem: ConvTrace
    entries: List[ConvTrace]
    bodies: List[ConvTrace]
    se: List[Optional[SeTrace]]


@dataclass
class ToyBackbone:
    stem: ConvParams
    stages: List[StageParams] = field(default_factory=list)

    @property
    def out_channels(self) -> List[int]:
        return [stage.body.out_channels for stage in self.stages]

    def named_tensors(self, prefix: str = "backbone") -> Dict[str, torch.Tensor]:
        tensors = dict(self.stem.named_tensors(f"{prefix}.stem"))
        for i, stage in enumerate(self.stages):
            tensors.update(stage.named_tensors(f"{prefix}.stages.{i}"))
        return tensors

    def forward_trace(self, images: torch.Tensor) -> Tuple[PyramidInputs, BackboneTrace]:
        stem_pre = conv2d(images, self.stem)
        x = relu(stem_pre)
        entries, bodies, se_traces, levels = [], [], [], []
        for stage in self.stages:
            entry_pre = conv2d(x, stage.entry)
            hidden = relu(entry_pre)
            body_pre = conv2d(hidden, stage.body)
            entries.append(ConvTrace(x, entry_pre))
            bodies.append(ConvTrace(hidden, body_pre))
            x = relu(body_pre)
            se_trace = None
            if stage.se is not None:
                x, se_trace = se_block_forward(x, stage.se)
            se_traces.append(se_trace)
            levels.append(x)
        return PyramidInputs(*levels), BackboneTrace(ConvTrace(images, stem_pre), entries, bodies, se_traces)

    def forward(self, images: torch.Tensor) -> PyramidInputs:
        return self.forward_trace(images)[0]

    def backward(
        self,
        trace: BackboneTrace,
        level_grads: Sequence[Optional[torch.Tensor]],
        prefix: str = "backbone",
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """
        Backpropagate gradients of C2..C5 to the images and parameters.

        Returns:
            (image gradient, parameter gradients keyed like named_tensors)
        """
        grads: Dict[str, torch.Tensor] = {}
        carry: Optional[torch.Tensor] = None
        for i in reversed(range(len(self.stages))):
            stage, name = self.stages[i], f"{prefix}.stages.{i}"
            body = trace.bodies[i]
            g = level_grads[i]
            if g is None:
                g = torch.zeros_like(body.pre)
            if carry is not None:
                g = g + carry
            if stage.se is not None:
                se_grads = se_block_backward(trace.se[i], stage.se, g, prefix=f"{name}.se")
                grads.update(se_grads.params)
                g = se_grads.input
            body_grads = conv2d_backward(body.input, stage.body, relu_backward(body.pre, g))
            grads[f"{name}.body.weight"] = body_grads.weight
            grads[f"{name}.body.bias"] = body_grads.bias

            entry = trace.entries[i]
            entry_grads = conv2d_backward(entry.input, stage.entry, relu_backward(entry.pre, body_grads.input))
            grads[f"{name}.entry.weight"] = entry_grads.weight
            grads[f"{name}.entry.bias"] = entry_grads.bias
            carry = entry_grads.input

        stem_grads = conv2d_backward(trace.stem.input, self.stem, relu_backward(trace.stem.pre, carry))
        grads[f"{prefix}.stem.weight"] = stem_grads.weight
        grads[f"{prefix}.stem.bias"] = stem_grads.bias
        return stem_grads.input, grads


def build_toy_backbone(config: BackboneConfig, generator: torch.Generator) -> ToyBackbone:
    """Randomly initialised backbone; stage channels give the C2..C5 widths."""
    if len(config.stage_channels) != 4:
        raise ConfigurationError(
            f"toy backbone needs 4 stage widths (C2..C5), got {config.stage_channels}"
        )
    stem = ConvParams.initialize(config.in_channels, config.stem_channels, 3, generator, stride=2, padding=1)
    stages = []
    previous = config.stem_channels
    for i, width in enumerate(config.stage_channels):
        stride = 1 if i == 0 else 2
        stage = StageParams(
            entry=ConvParams.initialize(previous, width, 3, generator, stride=stride, padding=1),
            body=ConvParams.initialize(width, width, 3, generator, padding=1),
        )
        if config.se:
            stage.se = SeBlockParams.initialize(width, config.se_reduction, generator)
        stages.append(stage)
        previous = width
    logger.debug(f"Toy backbone: stem {config.stem_channels}, stages {config.stage_channels}, se={config.se}")
    return ToyBackbone(stem, stages)
