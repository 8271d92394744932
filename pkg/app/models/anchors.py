"""
Anchor generation, labeling, minibatch sampling and box encoding.

Boxes are handled as (M, 4) tensors of ``x1, y1, x2, y2`` rows. Anchors of a
level are ordered cell by cell in row-major order and, inside a cell, by
size then aspect ratio; the head flattens its predictions in the same order.
"""

import logging
import math
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import torch

from app.core.errors import ConfigurationError, DomainError, SamplingError
from app.kernels.tensor import default_dtype
from app.schemas.config import AnchorConfig
from app.schemas.detection import AnchorState, Box

logger = logging.getLogger(__name__)

# exp() of the width/height deltas is clamped here when decoding predictions
MAX_LOG_RATIO = math.log(1000.0 / 16.0)


def tile_anchors(
    feature_h: int,
    feature_w: int,
    stride: float,
    sizes: Sequence[float],
    ratios: Sequence[float],
) -> torch.Tensor:
    """
    Tile anchors of every (size, ratio) pair over an h x w grid.

    Each anchor has area size^2 and height / width = ratio, and is centred on
    (stride * (j + 0.5), stride * (i + 0.5)).
    """
    dtype = default_dtype()
    shapes = []
    for size in sizes:
        for ratio in ratios:
            width = size / math.sqrt(ratio)
            height = size * math.sqrt(ratio)
            shapes.append((width, height))
    wh = torch.tensor(shapes, dtype=dtype)

    ys = (torch.arange(feature_h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(feature_w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)

    half = wh / 2.0
    c = centers[:, None, :]
    boxes = torch.cat([c - half[None], c + half[None]], dim=2)
    return boxes.reshape(-1, 4)


def generate_anchors(
    level: int,
    feature_h: int,
    feature_w: int,
    config: AnchorConfig,
    stride: Optional[float] = None,
) -> torch.Tensor:
    """
    Anchors of one pyramid level (0 = P2).

    Args:
        level: Index into config.strides / config.base_sizes
        feature_h: Rows of the feature map
        feature_w: Columns of the feature map
        config: Anchor configuration
        stride: Overrides config.strides[level] (used when images are smaller
            than the configured strides assume)

    Returns:
        (len(aspect_ratios) * h * w, 4) tensor

    Raises:
        ConfigurationError: Unknown level
    """
    if not 0 <= level < len(config.base_sizes):
        raise ConfigurationError(f"unknown pyramid level {level}; {len(config.base_sizes)} levels configured")
    step = config.strides[level] if stride is None else stride
    return tile_anchors(feature_h, feature_w, step, [config.base_sizes[level]], config.aspect_ratios)


def generate_single_map_anchors(
    feature_h: int, feature_w: int, stride: float, config: AnchorConfig
) -> torch.Tensor:
    """Anchors of every configured size on one map (single-map head)."""
    return tile_anchors(feature_h, feature_w, stride, config.base_sizes, config.aspect_ratios)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix (M, K) between box rows of ``a`` and ``b``."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    ta = torch.tensor([a.as_list()], dtype=torch.float64)
    tb = torch.tensor([b.as_list()], dtype=torch.float64)
    return float(box_iou(ta, tb)[0, 0])


class AnchorLabels(NamedTuple):
    """
    Labels of all anchors of one image.

    Attributes:
        states: (M,) int8 AnchorState values
        matched: (M,) index of the matched ground truth, -1 unless positive
    """

    states: torch.Tensor
    matched: torch.Tensor

    def positive_indices(self) -> torch.Tensor:
        return torch.nonzero(self.states == AnchorState.POSITIVE).squeeze(1)

    def negative_indices(self) -> torch.Tensor:
        return torch.nonzero(self.states == AnchorState.NEGATIVE).squeeze(1)


def label_anchors(
    anchors: torch.Tensor,
    gts: torch.Tensor,
    pos_thresh: float = 0.7,
    neg_thresh: float = 0.3,
    image_size: Optional[Tuple[int, int]] = None,
) -> AnchorLabels:
    """
    Label anchors positive, negative or ignore against the ground truths.

    An anchor is positive when its IoU with some ground truth exceeds
    ``pos_thresh`` or when it attains the largest IoU for some ground truth
    (forced match, IoU > 0). It is negative when every IoU is below
    ``neg_thresh`` and ignored otherwise.

    Args:
        anchors: (M, 4) anchor boxes
        gts: (G, 4) ground-truth boxes
        pos_thresh: Positive threshold
        neg_thresh: Negative threshold
        image_size: (height, width); anchors crossing the border are ignored

    Raises:
        ConfigurationError: No anchors, or invalid thresholds
    """
    if not 0 < neg_thresh < pos_thresh < 1:
        raise ConfigurationError(f"thresholds must satisfy 0 < neg ({neg_thresh}) < pos ({pos_thresh}) < 1")
    m = anchors.shape[0]
    if m == 0:
        raise ConfigurationError("label_anchors: empty anchor list")
    states = torch.full((m,), int(AnchorState.NEGATIVE), dtype=torch.int8)
    matched = torch.full((m,), -1, dtype=torch.long)

    inside = torch.ones(m, dtype=torch.bool)
    if image_size is not None:
        height, width = image_size
        inside = (
            (anchors[:, 0] >= 0) & (anchors[:, 1] >= 0) & (anchors[:, 2] <= width) & (anchors[:, 3] <= height)
        )
        states[~inside] = int(AnchorState.IGNORE)

    if gts.shape[0] == 0:
        return AnchorLabels(states, matched)

    overlaps = box_iou(anchors, gts)
    overlaps[~inside] = -1.0
    best_iou, best_gt = overlaps.max(dim=1)

    states[inside & (best_iou >= neg_thresh)] = int(AnchorState.IGNORE)
    positive = inside & (best_iou > pos_thresh)
    states[positive] = int(AnchorState.POSITIVE)
    matched[positive] = best_gt[positive]

    gt_best = overlaps.max(dim=0).values
    for j in range(gts.shape[0]):
        if gt_best[j] <= 0:
            continue
        winners = torch.nonzero(overlaps[:, j] == gt_best[j]).squeeze(1)
        states[winners] = int(AnchorState.POSITIVE)
        matched[winners] = j
    return AnchorLabels(states, matched)


def sample_minibatch(
    labels: AnchorLabels,
    generator: torch.Generator,
    total: int = 128,
    neg_to_pos: float = 3.0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Sample positives and negatives uniformly without replacement.

    At most ``total / (1 + neg_to_pos)`` positives are drawn; negatives fill
    the rest of the batch, so a positive shortfall yields extra negatives.

    Returns:
        (positive indices, negative indices), each sorted

    Raises:
        SamplingError: No positive and no negative anchors
    """
    pos = labels.positive_indices()
    neg = labels.negative_indices()
    if pos.numel() == 0 and neg.numel() == 0:
        raise SamplingError("no positive or negative anchors to sample")
    max_pos = int(total / (1.0 + neg_to_pos))
    num_pos = min(pos.numel(), max_pos)
    num_neg = min(neg.numel(), total - num_pos)
    pos_pick = pos[torch.randperm(pos.numel(), generator=generator)[:num_pos]]
    neg_pick = neg[torch.randperm(neg.numel(), generator=generator)[:num_neg]]
    return pos_pick.sort().values, neg_pick.sort().values


def _centers(boxes: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * widths, boxes[:, 1] + 0.5 * heights, widths, heights


def encode_boxes(anchors: torch.Tensor, gts: torch.Tensor) -> torch.Tensor:
    """Regression targets (dcx / w_a, dcy / h_a, ln(w_g / w_a), ln(h_g / h_a))."""
    ax, ay, aw, ah = _centers(anchors)
    gx, gy, gw, gh = _centers(gts)
    if bool((gw <= 0).any() or (gh <= 0).any()):
        raise DomainError("cannot encode a ground truth with non-positive width or height")
    if bool((aw <= 0).any() or (ah <= 0).any()):
        raise DomainError("cannot encode against an anchor with non-positive width or height")
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """Inverse of encode_boxes; width/height deltas are clamped for raw predictions."""
    ax, ay, aw, ah = _centers(anchors)
    dw, dh = deltas[:, 2], deltas[:, 3]
    if clamp:
        dw = dw.clamp(max=MAX_LOG_RATIO)
        dh = dh.clamp(max=MAX_LOG_RATIO)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def encode_box(anchor: Box, gt: Box) -> Tuple[float, float, float, float]:
    deltas = encode_boxes(
        torch.tensor([anchor.as_list()], dtype=torch.float64),
        torch.tensor([gt.as_list()], dtype=torch.float64),
    )
    return tuple(float(d) for d in deltas[0])  # type: ignore[return-value]


def decode_box(anchor: Box, deltas: Union[Sequence[float], torch.Tensor]) -> Box:
    out = decode_boxes(
        torch.tensor([anchor.as_list()], dtype=torch.float64),
        torch.as_tensor(deltas, dtype=torch.float64).reshape(1, 4),
        clamp=False,
    )
    return Box.from_list(out[0].tolist())


def clip_boxes(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Clip box rows to the image rectangle."""
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)
