"""
Tensor helpers and the ``LFFT`` binary container.

Tensors are plain ``torch.Tensor`` objects in (batch, channel, row, column)
layout. The container stores one rank-4 tensor as::

    b"LFFT" | version u32 | 4 x u64 shape | little-endian f64 data
"""

import struct
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.core.config import settings
from app.core.errors import ConfigurationError, DataError, DimensionError, VersionError
from app.core.storage import atomic_write_bytes

TENSOR_MAGIC = b"LFFT"
TENSOR_VERSION = 1
_HEADER = struct.Struct("<4sI4Q")

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def default_dtype() -> torch.dtype:
    """Floating point type selected by ``settings.dtype``."""
    try:
        return _DTYPES[settings.dtype]
    except KeyError:
        raise ConfigurationError(f"unsupported dtype '{settings.dtype}'") from None


def make_generator(seed: int) -> torch.Generator:
    """Explicitly seeded CPU random source."""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def check_rank4(t: torch.Tensor, name: str) -> Tuple[int, int, int, int]:
    """Validate a (batch, channel, height, width) tensor and return its shape."""
    if t.dim() != 4:
        raise DimensionError(f"{name}: expected rank-4 (N, C, H, W) tensor, got shape {tuple(t.shape)}")
    if any(d < 1 for d in t.shape):
        raise DimensionError(f"{name}: all dimensions must be >= 1, got {tuple(t.shape)}")
    n, c, h, w = t.shape
    return n, c, h, w


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")


def pad_shape4(shape: Sequence[int]) -> Tuple[int, int, int, int]:
    """Left-pad a shape of rank <= 4 with ones."""
    if len(shape) > 4:
        raise DimensionError(f"container holds rank <= 4 tensors, got shape {tuple(shape)}")
    padded = (1,) * (4 - len(shape)) + tuple(int(d) for d in shape)
    return padded  # type: ignore[return-value]


def tensor_to_bytes(t: torch.Tensor) -> bytes:
    """Serialize a tensor (rank <= 4) into one LFFT blob."""
    shape = pad_shape4(t.shape)
    data = t.detach().to(torch.float64).contiguous().numpy().astype("<f8", copy=False)
    return _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, *shape) + data.tobytes()


def tensor_from_bytes(blob: Union[bytes, memoryview], shape: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    Decode one LFFT blob.

    Args:
        blob: Bytes produced by tensor_to_bytes
        shape: Optional original shape to restore (the blob always stores 4 dims)

    Raises:
        VersionError: Wrong magic bytes, unknown version or truncated data
    """
    if len(blob) < _HEADER.size:
        raise VersionError("truncated LFFT header")
    magic, version, *dims = _HEADER.unpack_from(blob, 0)
    if magic != TENSOR_MAGIC:
        raise VersionError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor format version {version}")
    count = int(np.prod(dims))
    expected = _HEADER.size + 8 * count
    if len(blob) != expected:
        raise VersionError(f"tensor payload has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(bytes(blob[_HEADER.size:]), dtype="<f8").reshape(dims)
    t = torch.from_numpy(data.astype(np.float64))
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def save_tensor(path: Union[str, Path], t: torch.Tensor) -> Path:
    return atomic_write_bytes(path, tensor_to_bytes(t))


def load_tensor(path: Union[str, Path]) -> torch.Tensor:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read tensor file {path}: {e}") from e
    return tensor_from_bytes(blob)
