"""
Seeded synthetic multi-scale detection dataset.

Each image holds class-coloured geometric shapes on a textured noise
background. The four classes stand in for plane (cross), bridge (thin bar),
storage (disc) and harbor (L shape) and span a wide range of sizes, with one
class small enough to cover less than 3% of the image.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import torch
import torch.nn.functional as F

from app.core.errors import DataError, GenerationError
from app.kernels.tensor import default_dtype, load_tensor, make_generator, save_tensor
from app.models.anchors import box_iou
from app.schemas.config import CLASS_NAMES, DatasetConfig
from app.schemas.detection import Box, GroundTruth
from app.services.annotations import read_ground_truths, write_ground_truths

logger = logging.getLogger(__name__)

CLASS_COLORS = (
    (0.95, 0.95, 0.95),
    (0.85, 0.55, 0.15),
    (0.20, 0.45, 0.95),
    (0.90, 0.15, 0.20),
)

SPLITS = ("train", "test")


@dataclass
class SyntheticDataset:
    """
    Attributes:
        images: (N, 3, H, W) tensor with values in [0, 1]
        ground_truths: One entry per object; image_id indexes ``images``
        split: train or test
    """

    images: torch.Tensor
    ground_truths: List[GroundTruth] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return self.images.shape[0]

    def boxes_for(self, image_id: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """(G, 4) boxes and (G,) class ids of one image."""
        own = [g for g in self.ground_truths if g.image_id == image_id]
        boxes = torch.tensor([g.box.as_list() for g in own], dtype=self.images.dtype).reshape(-1, 4)
        classes = torch.tensor([g.class_id for g in own], dtype=torch.long)
        return boxes, classes


def _shape_mask(class_id: int, size: int, generator: torch.Generator) -> torch.Tensor:
    """Boolean mask of the class shape inside its bounding rectangle."""
    if class_id == 0:
        thick = max(1, size // 3)
        mask = torch.zeros((size, size), dtype=torch.bool)
        lo = (size - thick) // 2
        mask[lo:lo + thick, :] = True
        mask[:, lo:lo + thick] = True
        return mask
    if class_id == 1:
        thick = max(2, size // 3)
        mask = torch.ones((thick, size), dtype=torch.bool)
        vertical = bool(torch.randint(0, 2, (1,), generator=generator))
        return mask.T.contiguous() if vertical else mask
    if class_id == 2:
        coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
        radius = size / 2.0
        return coords[:, None] ** 2 + coords[None, :] ** 2 <= radius * radius
    thick = max(2, size // 4)
    mask = torch.zeros((size, size), dtype=torch.bool)
    mask[:, :thick] = True
    mask[size - thick:, :] = True
    return mask


def _background(config: DatasetConfig, generator: torch.Generator) -> torch.Tensor:
    size = config.image_size
    dtype = default_dtype()
    coarse = torch.randn((1, 3, 8, 8), generator=generator, dtype=dtype) * 0.08
    texture = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)[0]
    pixel_noise = torch.randn((3, size, size), generator=generator, dtype=dtype) * config.noise_std
    return (0.35 + texture + pixel_noise).clamp(0.0, 1.0)


def _render_image(
    config: DatasetConfig, image_id: int, generator: torch.Generator
) -> Tuple[torch.Tensor, List[GroundTruth]]:
    image = _background(config, generator)
    size = config.image_size
    count = int(torch.randint(config.objects_min, config.objects_max + 1, (1,), generator=generator))
    placed = torch.zeros((0, 4), dtype=torch.float64)
    gts: List[GroundTruth] = []

    for _ in range(count):
        class_id = int(torch.randint(0, config.num_classes, (1,), generator=generator))
        lo, hi = config.class_sizes[class_id]
        for _attempt in range(config.placement_retries):
            extent = int(torch.randint(lo, hi + 1, (1,), generator=generator))
            mask = _shape_mask(class_id, extent, generator)
            mh, mw = mask.shape
            top = int(torch.randint(0, size - mh + 1, (1,), generator=generator))
            left = int(torch.randint(0, size - mw + 1, (1,), generator=generator))
            rows, cols = torch.nonzero(mask, as_tuple=True)
            box = torch.tensor(
                [[
                    left + int(cols.min()),
                    top + int(rows.min()),
                    left + int(cols.max()) + 1,
                    top + int(rows.max()) + 1,
                ]],
                dtype=torch.float64,
            )
            if placed.shape[0] and float(box_iou(box, placed).max()) > config.max_overlap_iou:
                continue
            color = torch.tensor(CLASS_COLORS[class_id], dtype=image.dtype).view(3, 1)
            shade = torch.randn((3, rows.numel()), generator=generator, dtype=image.dtype) * 0.02
            image[:, top + rows, left + cols] = (color + shade).clamp(0.0, 1.0)
            placed = torch.cat([placed, box])
            gts.append(GroundTruth(box=Box.from_list(box[0].tolist()), class_id=class_id, image_id=image_id))
            break
        else:
            raise GenerationError(
                f"image {image_id}: could not place a {CLASS_NAMES[class_id]} after "
                f"{config.placement_retries} attempts"
            )
    return image, gts


def _split_seed(seed: int, split: str) -> int:
    if split not in SPLITS:
        raise DataError(f"unknown split '{split}' (expected one of {SPLITS})")
    return 2 * int(seed) + SPLITS.index(split)


def gen_synthetic(config: DatasetConfig, seed: int, split: str = "train") -> SyntheticDataset:
    """
    Generate one split deterministically from ``seed``.

    Raises:
        GenerationError: An object could not be placed within the retry budget
    """
    generator = make_generator(_split_seed(seed, split))
    count = config.num_train if split == "train" else config.num_test
    images, gts = [], []
    for image_id in range(count):
        image, image_gts = _render_image(config, image_id, generator)
        images.append(image)
        gts.extend(image_gts)
    size = config.image_size
    stacked = torch.stack(images) if images else torch.zeros((0, 3, size, size), dtype=default_dtype())
    logger.info(f"Generated {split} split: {count} images, {len(gts)} objects (seed {seed})")
    return SyntheticDataset(stacked, gts, split)


def save_dataset(dataset: SyntheticDataset, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<split>_images.lfft`` and ``<split>_gt.txt``."""
    directory = Path(directory)
    images = save_tensor(directory / f"{dataset.split}_images.lfft", dataset.images)
    gts = write_ground_truths(dataset.ground_truths, directory / f"{dataset.split}_gt.txt")
    return images, gts


def load_dataset(directory: Union[str, Path], split: str = "train") -> SyntheticDataset:
    directory = Path(directory)
    images_path = directory / f"{split}_images.lfft"
    if not images_path.exists():
        raise DataError(f"no {split} images at {images_path}; run 'gen' first")
    images = load_tensor(images_path).to(default_dtype())
    return SyntheticDataset(images, read_ground_truths(directory / f"{split}_gt.txt"), split)
