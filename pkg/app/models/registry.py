"""
Loaded-detector management for the HTTP API.

The registry holds the detector restored from ``settings.checkpoint_path``
so it is loaded once at startup and reused by every request.
"""

import logging
from pathlib import Path
from typing import Optional

import torch

from app.core.config import settings
from app.models.detector import LffnDetector
from app.services.checkpoint import load_checkpoint

logger = logging.getLogger(__name__)


class DetectorRegistry:
    """
    Singleton class for managing the served detector.

    Attributes:
        detector: Detector restored from the checkpoint, or None
        checkpoint_path: Path the detector was loaded from
        iteration: Training iteration stored in the checkpoint
    """

    _instance: Optional["DetectorRegistry"] = None
    _initialized: bool = False

    def __new__(cls) -> "DetectorRegistry":
        """Ensure only one instance of DetectorRegistry exists (Singleton pattern)."""
        if cls._instance is None:
            cls._instance = super(DetectorRegistry, cls).__new__(cls)
        return cls._instance

    def __init__(self):
        """Initialize the registry state (only once)."""
        if not DetectorRegistry._initialized:
            self.detector: Optional[LffnDetector] = None
            self.checkpoint_path: Optional[Path] = None
            self.iteration: int = 0
            DetectorRegistry._initialized = True

    async def load_detector(self, path: Optional[Path] = None) -> None:
        """
        Load the detector from a checkpoint.

        Without a configured checkpoint the registry stays empty and only
        the model-free endpoints (NMS, evaluation, cost) are available.

        Raises:
            VersionError: If the checkpoint cannot be read
        """
        path = path or settings.checkpoint_path
        torch.set_num_threads(settings.num_threads)
        if path is None:
            logger.info("No checkpoint configured; /detect is disabled")
            return
        if not Path(path).exists():
            logger.warning(f"Checkpoint {path} does not exist yet; /detect is disabled")
            return

        logger.info(f"Loading detector from {path}...")
        try:
            checkpoint = load_checkpoint(path)
            self.detector = checkpoint.to_detector()
            self.checkpoint_path = Path(path)
            self.iteration = checkpoint.iteration
            logger.info(f"Detector ({checkpoint.config.mode.value}, iteration {checkpoint.iteration}) loaded")
        except Exception as e:
            logger.error(f"Error loading detector: {str(e)}")
            raise

    def unload(self) -> None:
        self.detector = None
        self.checkpoint_path = None
        self.iteration = 0

    def detector_loaded(self) -> bool:
        return self.detector is not None

    def get_detector(self) -> LffnDetector:
        """
        Get the loaded detector.

        Raises:
            RuntimeError: If no detector is loaded
        """
        if self.detector is None:
            raise RuntimeError("Detector not loaded")
        return self.detector


# Global instance
detector_registry = DetectorRegistry()
