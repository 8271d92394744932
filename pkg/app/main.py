"""
LFFN Detection Bench - HTTP Application

Serves the model-free pipeline stages (NMS, VOC evaluation, analytical cost)
and, when ``LFFN_CHECKPOINT_PATH`` points at a trained checkpoint, detection
on posted images.
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.api.routes import detection, health
from app.core.config import settings
from app.core.errors import InternalError, LffnError, NumericError
from app.models.registry import detector_registry

logging.basicConfig(
    level=settings.log_level,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Restore the served detector on startup and drop it on shutdown.

    A missing checkpoint is not fatal: the registry stays empty and
    ``/detect`` answers 503. An unreadable checkpoint aborts startup.
    """
    logger.info(f"Starting {settings.app_name} {settings.app_version}")
    try:
        await detector_registry.load_detector()
    except Exception as e:
        logger.error(f"Checkpoint {settings.checkpoint_path} could not be restored: {str(e)}")
        raise
    logger.info(f"Ready (detector loaded: {detector_registry.detector_loaded()})")

    yield

    logger.info("Releasing detector")
    detector_registry.unload()


app = FastAPI(
    title=settings.app_name,
    description=settings.app_description,
    version=settings.app_version,
    lifespan=lifespan,
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_url="/openapi.json",
    openapi_tags=[
        {"name": "health", "description": "Liveness, readiness and served-checkpoint status"},
        {"name": "detection", "description": "NMS, evaluation, cost counting and detection"},
    ],
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(LffnError)
async def domain_exception_handler(request: Request, exc: LffnError):
    """Configuration and data errors answer 400, numeric failures 422."""
    status_code = 422 if isinstance(exc, NumericError) else 400
    logger.warning(f"{exc.error_code} on {request.url.path}: {exc.message}")
    return JSONResponse(status_code=status_code, content={"detail": exc.message, "error_code": exc.error_code})


@app.exception_handler(Exception)
async def unexpected_exception_handler(request: Request, exc: Exception):
    """
    Last-resort handler; the message is only echoed in debug mode.

    Args:
        request: Failing request
        exc: Uncaught exception

    Returns:
        500 response in the ErrorResponse shape
    """
    logger.error(f"Unhandled {type(exc).__name__} on {request.url.path}: {str(exc)}", exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "detail": str(exc) if settings.debug else "Internal server error",
            "error_code": InternalError.error_code,
        },
    )


app.include_router(health.router)
app.include_router(detection.router)


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("app.main:app", host=settings.host, port=settings.port, reload=settings.debug, log_level="info")
