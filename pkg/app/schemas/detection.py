"""
Pydantic schemas for boxes, detections and ground truths.
"""

import math
from enum import IntEnum
from typing import List

from pydantic import BaseModel, Field, field_validator, model_validator


class AnchorState(IntEnum):
    """Label assigned to an anchor; stored as int8 in label tensors."""

    IGNORE = -1
    NEGATIVE = 0
    POSITIVE = 1


class Box(BaseModel):
    """
    Axis-aligned rectangle in image pixels.

    Attributes:
        x1: Left edge
        y1: Top edge
        x2: Right edge (> x1)
        y2: Bottom edge (> y1)
    """

    x1: float
    y1: float
    x2: float
    y2: float

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def positive_area(self) -> "Box":
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) has no positive area")
        return self

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)


class Detection(BaseModel):
    """
    Scored detection.

    Attributes:
        box: Detected rectangle
        score: Confidence s_i, finite and >= 0
        class_id: Object class
        image_id: Image the detection belongs to
    """

    box: Box
    score: float = Field(..., ge=0.0)
    class_id: int = Field(0, ge=0)
    image_id: int = Field(0, ge=0)

    model_config = {"frozen": True}

    @field_validator("score")
    @classmethod
    def score_must_be_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("score must be finite")
        return v


class GroundTruth(BaseModel):
    """Annotated object: ``image_id class_id x1 y1 x2 y2``."""

    box: Box
    class_id: int = Field(..., ge=0)
    image_id: int = Field(0, ge=0)

    model_config = {"frozen": True}
