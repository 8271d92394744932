"""
Line-oriented ground-truth and prediction files.

Ground truth: ``image_id class_id x1 y1 x2 y2``
Prediction:   ``image_id class_id score x1 y1 x2 y2``

Blank lines and lines starting with ``#`` are ignored.
"""

import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Union

from pydantic import ValidationError

from app.core.errors import ParseError
from app.core.storage import atomic_write_text
from app.schemas.detection import Box, Detection, GroundTruth

logger = logging.getLogger(__name__)

GT_HEADER = "# image_id class_id x1 y1 x2 y2"
PREDICTION_HEADER = "# image_id class_id score x1 y1 x2 y2"


def _records(text: str, fields: int, kind: str) -> Iterable[tuple]:
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != fields:
            raise ParseError(f"{kind} line needs {fields} fields, got {len(parts)}: '{line}'", number)
        try:
            image_id, class_id = int(parts[0]), int(parts[1])
            values = [float(p) for p in parts[2:]]
        except ValueError:
            raise ParseError(f"non-numeric field in {kind} line: '{line}'", number) from None
        yield number, image_id, class_id, values


def parse_ground_truths(text: str) -> List[GroundTruth]:
    """Parse ground-truth text; a malformed line raises ParseError with its number."""
    gts = []
    for number, image_id, class_id, values in _records(text, 6, "ground-truth"):
        try:
            gts.append(GroundTruth(box=Box.from_list(values), class_id=class_id, image_id=image_id))
        except ValidationError as e:
            raise ParseError(e.errors()[0]["msg"], number) from None
    return gts


def parse_predictions(text: str) -> List[Detection]:
    dets = []
    for number, image_id, class_id, values in _records(text, 7, "prediction"):
        try:
            dets.append(
                Detection(
                    box=Box.from_list(values[1:]),
                    score=values[0],
                    class_id=class_id,
                    image_id=image_id,
                )
            )
        except ValidationError as e:
            raise ParseError(e.errors()[0]["msg"], number) from None
    return dets


def _read(path: Union[str, Path]) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e


def read_ground_truths(path: Union[str, Path]) -> List[GroundTruth]:
    return parse_ground_truths(_read(path))


def read_predictions(path: Union[str, Path]) -> List[Detection]:
    return parse_predictions(_read(path))


def _number(value: float) -> str:
    """Shortest text that parses back to the same float."""
    return repr(float(value))


def _box_fields(box: Box) -> str:
    return " ".join(_number(v) for v in (box.x1, box.y1, box.x2, box.y2))


def format_ground_truths(gts: Sequence[GroundTruth]) -> str:
    lines = [GT_HEADER]
    for gt in gts:
        lines.append(f"{gt.image_id} {gt.class_id} {_box_fields(gt.box)}")
    return "\n".join(lines) + "\n"


def format_predictions(dets: Sequence[Detection]) -> str:
    lines = [PREDICTION_HEADER]
    for det in dets:
        lines.append(f"{det.image_id} {det.class_id} {_number(det.score)} {_box_fields(det.box)}")
    return "\n".join(lines) + "\n"


def write_ground_truths(gts: Sequence[GroundTruth], path: Union[str, Path]) -> Path:
    return atomic_write_text(path, format_ground_truths(gts))


def write_predictions(dets: Sequence[Detection], path: Union[str, Path]) -> Path:
    written = atomic_write_text(path, format_predictions(dets))
    logger.info(f"Wrote {len(dets)} predictions to {written}")
    return written
