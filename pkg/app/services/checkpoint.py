"""
Versioned checkpoint container.

Layout::

    b"LFFC" | version u32
    LFFT blob per tagged tensor (parameters, optimizer velocities, rng state)
    JSON footer: format version, iteration, run config echo, loss history,
                 and the tensor index (tag, offset, length, shape)
    footer length u64 | b"LFFC"

Saving is deterministic, so save -> load -> save reproduces the bytes.
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
from pydantic import ValidationError

from app.core.errors import VersionError
from app.core.storage import atomic_write_bytes
from app.kernels.tensor import make_generator, tensor_from_bytes, tensor_to_bytes
from app.models.detector import LffnDetector
from app.schemas.config import RunConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LFFC"
CHECKPOINT_VERSION = 1
RNG_TAG = "rng.state"
OPTIM_PREFIX = "optim."

_HEAD = struct.Struct("<4sI")
_TAIL = struct.Struct("<Q4s")


@dataclass
class Checkpoint:
    """
    Attributes:
        config: Run configuration echo
        iteration: Completed training iterations
        tensors: Tagged tensors in storage order
        history: Loss log rows [iteration, classification, localization, total]
    """

    config: RunConfig
    iteration: int = 0
    tensors: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    history: List[List[float]] = field(default_factory=list)

    @classmethod
    def from_state(
        cls,
        detector: LffnDetector,
        iteration: int = 0,
        velocities: Optional[Dict[str, torch.Tensor]] = None,
        generator: Optional[torch.Generator] = None,
        history: Optional[List[List[float]]] = None,
    ) -> "Checkpoint":
        tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for tag, tensor in detector.named_tensors().items():
            tensors[tag] = tensor.detach().clone()
        for tag, tensor in (velocities or {}).items():
            tensors[f"{OPTIM_PREFIX}{tag}"] = tensor.detach().clone()
        if generator is not None:
            tensors[RNG_TAG] = generator.get_state().to(torch.float64)
        return cls(detector.config, iteration, tensors, list(history or []))

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {
            tag: t for tag, t in self.tensors.items()
            if not tag.startswith(OPTIM_PREFIX) and tag != RNG_TAG
        }

    def velocities(self) -> Dict[str, torch.Tensor]:
        return {
            tag[len(OPTIM_PREFIX):]: t for tag, t in self.tensors.items() if tag.startswith(OPTIM_PREFIX)
        }

    def generator(self) -> Optional[torch.Generator]:
        if RNG_TAG not in self.tensors:
            return None
        generator = make_generator(0)
        generator.set_state(self.tensors[RNG_TAG].to(torch.uint8))
        return generator

    def to_detector(self, config: Optional[RunConfig] = None) -> LffnDetector:
        """
        Rebuild the detector and load the stored parameters.

        Raises:
            VersionError: The checkpoint does not fit ``config`` (tags or shapes differ)
        """
        config = config or self.config
        detector = LffnDetector.initialize(config, make_generator(config.seed))
        stored = self.parameters()
        expected = detector.named_tensors()
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))[:3]
            extra = sorted(set(stored) - set(expected))[:3]
            raise VersionError(
                f"checkpoint does not match the {config.mode.value} configuration "
                f"(missing {missing}, unexpected {extra})"
            )
        for tag, target in expected.items():
            source = stored[tag]
            if tuple(source.shape) != tuple(target.shape):
                raise VersionError(
                    f"checkpoint tensor {tag} has shape {tuple(source.shape)}, configuration expects {tuple(target.shape)}"
                )
            target.copy_(source)
        return detector


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    chunks = [_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)]
    offset = _HEAD.size
    index = []
    for tag, tensor in checkpoint.tensors.items():
        blob = tensor_to_bytes(tensor)
        index.append({"tag": tag, "offset": offset, "length": len(blob), "shape": list(tensor.shape)})
        chunks.append(blob)
        offset += len(blob)
    footer = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": checkpoint.iteration,
        "config": checkpoint.config.model_dump(mode="json"),
        "history": checkpoint.history,
        "tensors": index,
    }
    encoded = json.dumps(footer, separators=(",", ":")).encode("utf-8")
    chunks.append(encoded)
    chunks.append(_TAIL.pack(len(encoded), CHECKPOINT_MAGIC))
    return b"".join(chunks)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    """
    Decode a checkpoint container.

    Raises:
        VersionError: Bad magic, unsupported version or a corrupt index
    """
    if len(data) < _HEAD.size + _TAIL.size:
        raise VersionError("checkpoint file is truncated")
    magic, version = _HEAD.unpack_from(data, 0)
    footer_length, trailer = _TAIL.unpack_from(data, len(data) - _TAIL.size)
    if magic != CHECKPOINT_MAGIC or trailer != CHECKPOINT_MAGIC:
        raise VersionError("not a checkpoint file (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    footer_start = len(data) - _TAIL.size - footer_length
    if footer_start < _HEAD.size:
        raise VersionError("checkpoint footer length is corrupt")
    try:
        footer = json.loads(data[footer_start:len(data) - _TAIL.size].decode("utf-8"))
        config = RunConfig.model_validate(footer["config"])
    except (ValueError, KeyError, ValidationError) as e:
        raise VersionError(f"checkpoint footer is unreadable: {e}") from e
    if footer.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint footer version {footer.get('format_version')}")

    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for entry in footer["tensors"]:
        start, end = entry["offset"], entry["offset"] + entry["length"]
        if end > footer_start:
            raise VersionError(f"tensor {entry['tag']} runs past the footer")
        tensors[entry["tag"]] = tensor_from_bytes(memoryview(data)[start:end], entry["shape"])
    return Checkpoint(config, int(footer["iteration"]), tensors, footer.get("history", []))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    written = atomic_write_bytes(path, checkpoint_to_bytes(checkpoint))
    logger.info(f"Saved checkpoint at iteration {checkpoint.iteration} to {written}")
    return written


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise VersionError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data)
