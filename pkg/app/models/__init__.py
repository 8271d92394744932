"""Detector components: fusion pyramid, AQM, anchors, head, toy backbone."""

from app.models.detector import LffnDetector

__all__ = ["LffnDetector"]
