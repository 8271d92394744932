"""
Detection pipeline API endpoints.

This module exposes NMS, evaluation, analytical cost counting and detection
with the loaded checkpoint.
"""

import logging

import torch
from fastapi import APIRouter, HTTPException, status

from app.core.errors import ConfigurationError
from app.kernels.tensor import default_dtype
from app.models.registry import detector_registry
from app.schemas.api import (
    CostRequest,
    DetectRequest,
    DetectResponse,
    ErrorResponse,
    EvaluateRequest,
    NmsRequest,
    NmsResponse,
)
from app.schemas.reports import CostReport, EvalReport
from app.services.detection import DetectionService
from app.services.evalkit import evaluate
from app.services.modelspec import BUILTIN_SPECS, count_cost, resolve_spec
from app.services.nms import batched_nms

logger = logging.getLogger(__name__)

router = APIRouter(tags=["detection"])

_ERRORS = {
    400: {"model": ErrorResponse, "description": "Invalid input"},
    422: {"model": ErrorResponse, "description": "Validation error"},
}


@router.post(
    "/nms",
    response_model=NmsResponse,
    status_code=status.HTTP_200_OK,
    summary="Suppress overlapping detections",
    description="""
    Run traditional or stochastic NMS independently per (image, class).

    Stochastic NMS keeps each overlapping frame with the probability that
    its own area is covered by the selected frame; the draws are seeded by
    `config.seed`, so identical requests give identical responses.
    """,
    responses=_ERRORS,
)
async def suppress(request: NmsRequest) -> NmsResponse:
    """
    Apply NMS to the posted detections.

    Args:
        request: Detections and NMS settings

    Returns:
        NmsResponse with the survivors ordered by image and descending score
    """
    kept = batched_nms(request.detections, request.config)
    return NmsResponse(detections=kept, removed=len(request.detections) - len(kept))


@router.post(
    "/evaluate",
    response_model=EvalReport,
    status_code=status.HTTP_200_OK,
    summary="Per-class AP and mAP",
    responses=_ERRORS,
)
async def evaluate_detections(request: EvaluateRequest) -> EvalReport:
    """
    Evaluate detections against ground truths with VOC-style matching.

    Raises:
        HTTPException: 400 when there is nothing to evaluate
    """
    return evaluate(request.detections, request.ground_truths, request.config)


@router.post(
    "/cost",
    response_model=CostReport,
    status_code=status.HTTP_200_OK,
    summary="Analytical MACs and parameters",
    description=f"""
    Count multiply-accumulates and parameters of one forward pass.

    `spec` is either a built-in name ({", ".join(sorted(BUILTIN_SPECS))}, toy)
    or an inline layer list.
    """,
    responses=_ERRORS,
)
async def cost(request: CostRequest) -> CostReport:
    spec = request.spec
    if isinstance(spec, str):
        if spec not in BUILTIN_SPECS and spec != "toy":
            raise ConfigurationError(f"unknown built-in spec '{spec}'")
        spec = resolve_spec(spec)
    shape = request.input_shape
    if shape is not None and len(shape) == 3:
        shape = [1, *shape]
    return count_cost(spec, shape)


@router.post(
    "/detect",
    response_model=DetectResponse,
    status_code=status.HTTP_200_OK,
    summary="Detect objects in one image",
    responses={
        **_ERRORS,
        503: {"model": ErrorResponse, "description": "No checkpoint loaded"},
    },
)
async def detect(request: DetectRequest) -> DetectResponse:
    """
    Run the loaded detector on a single image.

    Raises:
        HTTPException: 503 if no detector is loaded
    """
    if not detector_registry.detector_loaded():
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No detector checkpoint loaded (set LFFN_CHECKPOINT_PATH)",
        )
    detector = detector_registry.get_detector()
    image = torch.tensor(request.image, dtype=default_dtype()).unsqueeze(0)
    logger.info(f"Detecting on a {image.shape[2]}x{image.shape[3]} image")
    dets = DetectionService.detect(detector, image, request.nms or detector.config.nms)
    return DetectResponse(detections=dets, checkpoint_iteration=detector_registry.iteration)
