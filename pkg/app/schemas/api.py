"""
Pydantic schemas for HTTP requests and responses.
"""

from typing import List, Optional, Union

from pydantic import BaseModel, Field, field_validator

from app.schemas.config import EvalConfig, NmsConfig
from app.schemas.detection import Detection, GroundTruth
from app.schemas.modelspec import GraphSpec


class HealthResponse(BaseModel):
    """
    Response model for health check.

    Attributes:
        status: Overall service status
        detector_loaded: Whether a checkpoint is served by /detect
        mode: Ablation mode of the served detector
        iteration: Training iteration of the served checkpoint
        num_threads: Torch intra-op threads
        version: API version
    """

    status: str = Field(..., description="Service status", examples=["healthy", "degraded"])
    detector_loaded: bool = Field(..., description="Detector checkpoint loaded")
    mode: Optional[str] = Field(None, description="Ablation mode of the detector", examples=["lffn+aqm"])
    iteration: int = Field(0, ge=0, description="Training iteration of the checkpoint")
    num_threads: int = Field(..., description="Torch intra-op threads")
    version: str = Field(..., description="API version", examples=["1.0.0"])


class ErrorResponse(BaseModel):
    """
    Error response model.

    Attributes:
        detail: Error message
        error_code: Machine-parsable error code
    """

    detail: str = Field(..., description="Error message")
    error_code: Optional[str] = Field(None, description="Error code", examples=["DATA_ERROR"])


class NmsRequest(BaseModel):
    """Detections to suppress, grouped internally by (image, class)."""

    detections: List[Detection] = Field(default_factory=list, description="Scored detections")
    config: NmsConfig = Field(default_factory=NmsConfig, description="NMS settings")


class NmsResponse(BaseModel):
    detections: List[Detection] = Field(..., description="Surviving detections")
    removed: int = Field(..., ge=0, description="Number of suppressed detections")


class EvaluateRequest(BaseModel):
    detections: List[Detection] = Field(default_factory=list)
    ground_truths: List[GroundTruth] = Field(default_factory=list)
    config: EvalConfig = Field(default_factory=EvalConfig)


class CostRequest(BaseModel):
    """
    Analytical cost request.

    Attributes:
        spec: Built-in spec name (resnet50, se_resnext50, toy) or an inline GraphSpec
        input_shape: Optional (N, C, H, W) or (C, H, W) overriding the spec input
    """

    spec: Union[str, GraphSpec] = Field("resnet50", description="Spec name or inline graph")
    input_shape: Optional[List[int]] = Field(None, description="Input shape override")

    @field_validator("input_shape")
    @classmethod
    def shape_rank(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is not None and len(v) not in (3, 4):
            raise ValueError("input_shape must be (C, H, W) or (N, C, H, W)")
        return v


class DetectRequest(BaseModel):
    """
    One image as a nested [channel][row][column] list of values in [0, 1].

    Attributes:
        image: 3 x H x W pixel values
        nms: Optional NMS settings overriding the checkpoint's
    """

    image: List[List[List[float]]] = Field(..., description="3 x H x W pixel values")
    nms: Optional[NmsConfig] = Field(None, description="NMS settings")

    @field_validator("image")
    @classmethod
    def image_must_be_rectangular(cls, v: List[List[List[float]]]) -> List[List[List[float]]]:
        if len(v) != 3:
            raise ValueError(f"image must have 3 channels, got {len(v)}")
        rows = {len(plane) for plane in v}
        cols = {len(row) for plane in v for row in plane}
        if len(rows) != 1 or len(cols) != 1 or 0 in rows or 0 in cols:
            raise ValueError("image planes must be non-empty and rectangular")
        return v


class DetectResponse(BaseModel):
    detections: List[Detection] = Field(..., description="Detections after NMS")
    checkpoint_iteration: int = Field(..., ge=0)
