"""
Liveness, readiness and served-checkpoint status.

NMS, evaluation and cost work without a checkpoint, so a missing detector
degrades the service instead of failing it.
"""

import logging

import torch
from fastapi import APIRouter, status
from fastapi.responses import JSONResponse

from app.core.config import settings
from app.models.registry import detector_registry
from app.schemas.api import HealthResponse

logger = logging.getLogger(__name__)

router = APIRouter(tags=["health"])

_READY_EXAMPLES = {
    200: {"description": "Detector loaded", "content": {"application/json": {"example": {"ready": True}}}},
    503: {"description": "No detector loaded", "content": {"application/json": {"example": {"ready": False}}}},
}


@router.get("/", response_model=dict, summary="Service banner")
async def root():
    return {
        "service": settings.app_name,
        "version": settings.app_version,
        "status": "running",
        "detector_loaded": detector_registry.detector_loaded(),
        "docs": "/docs",
    }


@router.get(
    "/health",
    response_model=HealthResponse,
    summary="Served checkpoint status",
    description="""
    Reports the ablation mode and training iteration of the served
    checkpoint and the torch thread count. `status` is `degraded` while no
    checkpoint is loaded.
    """,
)
async def health_check() -> HealthResponse:
    detector = detector_registry.detector
    return HealthResponse(
        status="healthy" if detector is not None else "degraded",
        detector_loaded=detector is not None,
        mode=detector.config.mode.value if detector is not None else None,
        iteration=detector_registry.iteration,
        num_threads=torch.get_num_threads(),
        version=settings.app_version,
    )


@router.get("/readiness", summary="Readiness (200 once a detector is loaded)", responses=_READY_EXAMPLES)
async def readiness():
    ready = detector_registry.detector_loaded()
    if not ready:
        logger.debug("Not ready: no detector loaded")
    code = status.HTTP_200_OK if ready else status.HTTP_503_SERVICE_UNAVAILABLE
    return JSONResponse(status_code=code, content={"ready": ready})


@router.get("/liveness", status_code=status.HTTP_200_OK, summary="Liveness")
async def liveness():
    return {"alive": True}
