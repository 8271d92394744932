"""Builders shared by several test modules."""

from pathlib import Path
from typing import List

import torch

from app.schemas.detection import Box, Detection, GroundTruth

DEFAULT_CFG = Path(__file__).resolve().parent.parent / "default.cfg"


def detection(x1, y1, x2, y2, score, class_id=0, image_id=0) -> Detection:
    return Detection(box=Box(x1=x1, y1=y1, x2=x2, y2=y2), score=score, class_id=class_id, image_id=image_id)


def ground_truth(x1, y1, x2, y2, class_id=0, image_id=0) -> GroundTruth:
    return GroundTruth(box=Box(x1=x1, y1=y1, x2=x2, y2=y2), class_id=class_id, image_id=image_id)


def random_detections(generator: torch.Generator, count: int, extent: float = 60.0) -> List[Detection]:
    """Random boxes with distinct scores, all of class 0 on image 0."""
    corners = torch.rand((count, 2), generator=generator, dtype=torch.float64) * extent
    sizes = 4.0 + torch.rand((count, 2), generator=generator, dtype=torch.float64) * 30.0
    scores = torch.randperm(count, generator=generator).to(torch.float64) / count + 0.5 / count
    return [
        detection(
            float(corners[i, 0]), float(corners[i, 1]),
            float(corners[i, 0] + sizes[i, 0]), float(corners[i, 1] + sizes[i, 1]),
            float(scores[i]),
        )
        for i in range(count)
    ]
