"""Business logic services."""

from app.services.detection import DetectionService

__all__ = ["DetectionService"]
