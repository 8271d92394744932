"""
Pydantic schemas for declarative architecture descriptions.
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class LayerKind(str, Enum):
    CONV = "conv"
    GROUPED_CONV = "grouped-conv"
    FC = "fc"
    POOL = "pool"
    GLOBAL_POOL = "global-pool"
    SE = "se"
    RESIDUAL_BLOCK = "residual-block"


class StridePlacement(str, Enum):
    """Which conv of a bottleneck block carries the downsampling stride."""

    FIRST = "first"
    MIDDLE = "middle"


class LayerSpec(BaseModel):
    """
    One layer (or a repeated bottleneck stage) of a GraphSpec.

    Attributes:
        kind: Layer type
        stage: Name of the stage the cost is reported under
        in_channels: Input channels (features for fc)
        out_channels: Output channels (features for fc)
        kernel: Square kernel side (conv, pool)
        stride: Spatial stride (the first block only, for residual blocks)
        padding: Symmetric padding
        groups: Channel groups of the (middle) conv
        repeat: Number of stacked blocks (residual-block only)
        mid_channels: Bottleneck width of a residual block
        stride_on: Conv of the first bottleneck block that carries the stride
        se_reduction: SE reduction ratio (se kind, or SE inside residual blocks)
        bias: Convs/fc carry a bias vector
        batch_norm: Each conv is followed by batch norm (2C params, no MACs)
    """

    kind: LayerKind
    stage: str = ""
    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    kernel: int = Field(1, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    groups: int = Field(1, ge=1)
    repeat: int = Field(1, ge=1)
    mid_channels: Optional[int] = Field(None, ge=1)
    stride_on: StridePlacement = StridePlacement.FIRST
    se_reduction: Optional[int] = Field(None, ge=1)
    bias: bool = False
    batch_norm: bool = False

    @model_validator(mode="after")
    def geometry_complete(self) -> "LayerSpec":
        if self.kind == LayerKind.RESIDUAL_BLOCK and self.mid_channels is None:
            raise ValueError("residual-block needs mid_channels")
        if self.kind == LayerKind.SE and self.se_reduction is None:
            raise ValueError("se layer needs se_reduction")
        if self.kind == LayerKind.SE and self.in_channels != self.out_channels:
            raise ValueError("se layer keeps the channel count")
        if self.kind in (LayerKind.POOL, LayerKind.GLOBAL_POOL) and self.in_channels != self.out_channels:
            raise ValueError(f"{self.kind.value} keeps the channel count")
        if self.kind != LayerKind.RESIDUAL_BLOCK and self.repeat != 1:
            raise ValueError("repeat applies to residual-block layers only")
        groups_channels = self.mid_channels if self.kind == LayerKind.RESIDUAL_BLOCK else self.in_channels
        if groups_channels % self.groups:
            raise ValueError(f"{groups_channels} channels not divisible by {self.groups} groups")
        return self


class GraphSpec(BaseModel):
    """
    Ordered layer list with its input shape (C, H, W).

    The JSON rendering of this model is the structured text format read by
    the ``cost`` command.
    """

    name: str
    input_shape: Tuple[int, int, int] = (3, 224, 224)
    layers: List[LayerSpec] = Field(default_factory=list)
