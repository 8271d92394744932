"""Pydantic schemas for configuration, domain records, reports and API payloads."""

from app.schemas.config import (
    AblationMode,
    AnchorConfig,
    ApMethod,
    EvalConfig,
    FusionConfig,
    MergeMode,
    NmsConfig,
    NmsMode,
    PoolMode,
    RunConfig,
)
from app.schemas.detection import AnchorState, Box, Detection, GroundTruth
from app.schemas.modelspec import GraphSpec, LayerKind, LayerSpec
from app.schemas.reports import CostReport, EvalReport, GradCheckReport, LossBreakdown, PRPoint

__all__ = [
    "AblationMode",
    "AnchorConfig",
    "AnchorState",
    "ApMethod",
    "Box",
    "CostReport",
    "Detection",
    "EvalConfig",
    "EvalReport",
    "FusionConfig",
    "GradCheckReport",
    "GraphSpec",
    "GroundTruth",
    "LayerKind",
    "LayerSpec",
    "LossBreakdown",
    "MergeMode",
    "NmsConfig",
    "NmsMode",
    "PRPoint",
    "PoolMode",
    "RunConfig",
]
