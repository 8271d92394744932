"""
Anchor-based detection head, joint loss and the optional refinement head.

The head is shared across pyramid levels: a 3x3 conv with ReLU followed by
two 1x1 branches. For A anchors per cell and K scores per anchor (background
plus the object classes) the classification branch emits A*K channels laid
out anchor-major (channel a*K + k) and the regression branch A*4 channels.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch

from app.core.errors import ConfigurationError, DimensionError, LossError, NumericError
from app.kernels.activations import relu, relu_backward
from app.kernels.conv import ConvGrads, ConvParams, conv2d, conv2d_backward
from app.kernels.linear import LinearParams, fully_connected, fully_connected_backward
from app.kernels.losses import smooth_l1, softmax_cross_entropy
from app.models.anchors import AnchorLabels, encode_boxes
from app.schemas.reports import LossBreakdown

logger = logging.getLogger(__name__)

OUTPUT_INIT_STD = 0.01


@dataclass
class RefinementParams:
    """Second-stage head: two hidden FC layers, then class and box outputs."""

    fc1: LinearParams
    fc2: LinearParams
    cls: LinearParams
    reg: LinearParams
    pool_size: int = 7

    @classmethod
    def initialize(
        cls,
        channels: int,
        num_scores: int,
        generator: torch.Generator,
        hidden: int = 1024,
        pool_size: int = 7,
    ) -> "RefinementParams":
        return cls(
            LinearParams.initialize(channels * pool_size * pool_size, hidden, generator),
            LinearParams.initialize(hidden, hidden, generator),
            LinearParams.initialize(hidden, num_scores, generator, std=OUTPUT_INIT_STD),
            LinearParams.initialize(hidden, 4, generator, std=OUTPUT_INIT_STD / 10),
            pool_size,
        )

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        tensors: Dict[str, torch.Tensor] = {}
        for part in ("fc1", "fc2", "cls", "reg"):
            tensors.update(getattr(self, part).named_tensors(f"{prefix}.{part}"))
        return tensors


@dataclass
class HeadParams:
    """
    Detection head parameters shared by every pyramid level.

    Attributes:
        shared: 3x3 conv (C -> C, padding 1) followed by ReLU
        cls: 1x1 conv C -> A*K
        reg: 1x1 conv C -> A*4
        anchors_per_cell: A
        num_scores: K (background included)
        refinement: Optional second-stage head
    """

    shared: ConvParams
    cls: ConvParams
    reg: ConvParams
    anchors_per_cell: int
    num_scores: int
    refinement: Optional[RefinementParams] = None

    @classmethod
    def initialize(
        cls,
        channels: int,
        anchors_per_cell: int,
        num_classes: int,
        generator: torch.Generator,
        refinement: bool = False,
        refinement_hidden: int = 1024,
        refinement_pool_size: int = 7,
    ) -> "HeadParams":
        """num_classes counts object classes; one background score is added."""
        k = num_classes + 1
        params = cls(
            shared=ConvParams.initialize(channels, channels, 3, generator, padding=1),
            cls=ConvParams.initialize(channels, anchors_per_cell * k, 1, generator, std=OUTPUT_INIT_STD),
            reg=ConvParams.initialize(channels, anchors_per_cell * 4, 1, generator, std=OUTPUT_INIT_STD),
            anchors_per_cell=anchors_per_cell,
            num_scores=k,
        )
        if refinement:
            params.refinement = RefinementParams.initialize(
                channels, k, generator, hidden=refinement_hidden, pool_size=refinement_pool_size
            )
        return params

    def named_tensors(self, prefix: str = "head") -> Dict[str, torch.Tensor]:
        tensors = dict(self.shared.named_tensors(f"{prefix}.shared"))
        tensors.update(self.cls.named_tensors(f"{prefix}.cls"))
        tensors.update(self.reg.named_tensors(f"{prefix}.reg"))
        if self.refinement is not None:
            tensors.update(self.refinement.named_tensors(f"{prefix}.refinement"))
        return tensors


class HeadOutput(NamedTuple):
    logits: torch.Tensor
    deltas: torch.Tensor


class HeadTrace(NamedTuple):
    inputs: List[torch.Tensor]
    shared_pre: List[torch.Tensor]
    shared: List[torch.Tensor]


def _check_head(levels: Sequence[torch.Tensor], params: HeadParams) -> None:
    a, k = params.anchors_per_cell, params.num_scores
    if params.cls.out_channels != a * k:
        raise ConfigurationError(f"classification branch has {params.cls.out_channels} channels, expected {a}*{k}")
    if params.reg.out_channels != a * 4:
        raise ConfigurationError(f"regression branch has {params.reg.out_channels} channels, expected {a}*4")
    for i, level in enumerate(levels):
        if level.dim() != 4 or level.shape[1] != params.shared.in_channels:
            raise DimensionError(
                f"head: level {i} has shape {tuple(level.shape)}, expected {params.shared.in_channels} channels"
            )


def head_forward_trace(
    levels: Sequence[torch.Tensor], params: HeadParams
) -> Tuple[List[HeadOutput], HeadTrace]:
    _check_head(levels, params)
    outputs, shared_pre, shared = [], [], []
    for level in levels:
        pre = conv2d(level, params.shared)
        hidden = relu(pre)
        outputs.append(HeadOutput(conv2d(hidden, params.cls), conv2d(hidden, params.reg)))
        shared_pre.append(pre)
        shared.append(hidden)
    return outputs, HeadTrace(list(levels), shared_pre, shared)


def head_forward(levels: Sequence[torch.Tensor], params: HeadParams) -> List[HeadOutput]:
    """
    Per-level logits (N, A*K, h, w) and deltas (N, A*4, h, w).

    Raises:
        DimensionError: A level's channel count differs from the head's
    """
    return head_forward_trace(levels, params)[0]


def head_backward(
    trace: HeadTrace,
    params: HeadParams,
    output_grads: Sequence[HeadOutput],
    prefix: str = "head",
) -> Tuple[List[torch.Tensor], Dict[str, torch.Tensor]]:
    """Level gradients plus parameter gradients accumulated over all levels."""
    totals: Dict[str, ConvGrads] = {}
    level_grads = []
    for level, pre, hidden, grads in zip(trace.inputs, trace.shared_pre, trace.shared, output_grads):
        cls_grads = conv2d_backward(hidden, params.cls, grads.logits)
        reg_grads = conv2d_backward(hidden, params.reg, grads.deltas)
        g_hidden = relu_backward(pre, cls_grads.input + reg_grads.input)
        shared_grads = conv2d_backward(level, params.shared, g_hidden)
        level_grads.append(shared_grads.input)
        for name, g in (("shared", shared_grads), ("cls", cls_grads), ("reg", reg_grads)):
            if name in totals:
                prev = totals[name]
                totals[name] = ConvGrads(None, prev.weight + g.weight, prev.bias + g.bias)
            else:
                totals[name] = ConvGrads(None, g.weight, g.bias)
    param_grads: Dict[str, torch.Tensor] = {}
    for name, g in totals.items():
        param_grads[f"{prefix}.{name}.weight"] = g.weight
        param_grads[f"{prefix}.{name}.bias"] = g.bias
    return level_grads, param_grads


def flatten_outputs(outputs: Sequence[HeadOutput], params: HeadParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Concatenate per-level predictions into anchor order.

    Returns:
        (logits (N, T, K), deltas (N, T, 4)) with T the total anchor count
    """
    a, k = params.anchors_per_cell, params.num_scores
    logits, deltas = [], []
    for out in outputs:
        n, _, h, w = out.logits.shape
        logits.append(out.logits.reshape(n, a, k, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, k))
        deltas.append(out.deltas.reshape(n, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(n, h * w * a, 4))
    return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


def unflatten_grads(
    grad_logits: torch.Tensor,
    grad_deltas: torch.Tensor,
    outputs: Sequence[HeadOutput],
    params: HeadParams,
) -> List[HeadOutput]:
    """Inverse of flatten_outputs for gradients."""
    a, k = params.anchors_per_cell, params.num_scores
    grads, start = [], 0
    for out in outputs:
        n, _, h, w = out.logits.shape
        count = h * w * a
        gl = grad_logits[:, start:start + count].reshape(n, h, w, a, k).permute(0, 3, 4, 1, 2)
        gd = grad_deltas[:, start:start + count].reshape(n, h, w, a, 4).permute(0, 3, 4, 1, 2)
        grads.append(HeadOutput(gl.reshape(n, a * k, h, w).contiguous(), gd.reshape(n, a * 4, h, w).contiguous()))
        start += count
    return grads


def build_targets(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_classes: torch.Tensor,
    labels: AnchorLabels,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Classification targets (0 = background, c + 1 for class c) and encoded
    regression targets (zero except at positive anchors).
    """
    m = anchors.shape[0]
    class_targets = torch.zeros(m, dtype=torch.long)
    reg_targets = torch.zeros((m, 4), dtype=anchors.dtype)
    pos = labels.positive_indices()
    if pos.numel():
        matched = labels.matched[pos]
        class_targets[pos] = gt_classes[matched].long() + 1
        reg_targets[pos] = encode_boxes(anchors[pos], gt_boxes[matched])
    return class_targets, reg_targets


class LossResult(NamedTuple):
    breakdown: LossBreakdown
    grad_logits: torch.Tensor
    grad_deltas: torch.Tensor


def compute_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    class_targets: torch.Tensor,
    reg_targets: torch.Tensor,
    pos_idx: torch.Tensor,
    neg_idx: torch.Tensor,
    loss_weight: float = 1.0,
    beta: float = 1.0,
) -> LossResult:
    """
    Joint loss of one image's sampled anchors.

    classification = mean softmax cross-entropy over sampled anchors (negatives
    target the background score); localization = mean over positives of the
    summed smooth-L1 of the four deltas; total = classification + loss_weight *
    localization.

    Args:
        logits: (M, K) anchor scores
        deltas: (M, 4) predicted deltas
        class_targets: (M,) targets from build_targets
        reg_targets: (M, 4) encoded targets
        pos_idx: Sampled positive indices
        neg_idx: Sampled negative indices

    Raises:
        LossError: No anchor was sampled
        NumericError: The loss is not finite
    """
    num_pos, num_neg = pos_idx.numel(), neg_idx.numel()
    if num_pos + num_neg == 0:
        raise LossError("no sampled anchors to compute the loss on")
    sampled = torch.cat([pos_idx, neg_idx])
    targets = torch.cat([class_targets[pos_idx], torch.zeros(num_neg, dtype=torch.long)])

    cls_loss, g_sampled = softmax_cross_entropy(logits[sampled], targets)
    grad_logits = torch.zeros_like(logits)
    grad_logits[sampled] = g_sampled

    grad_deltas = torch.zeros_like(deltas)
    loc_loss = 0.0
    if num_pos:
        summed, g_pos = smooth_l1(deltas[pos_idx], reg_targets[pos_idx], beta)
        loc_loss = summed / num_pos
        grad_deltas[pos_idx] = loss_weight * g_pos / num_pos

    if not (math.isfinite(cls_loss) and math.isfinite(loc_loss)):
        raise NumericError(f"non-finite loss: classification {cls_loss}, localization {loc_loss}")
    breakdown = LossBreakdown(
        classification=cls_loss,
        localization=loc_loss,
        total=cls_loss + loss_weight * loc_loss,
        loss_weight=loss_weight,
        positives=num_pos,
        negatives=num_neg,
    )
    return LossResult(breakdown, grad_logits, grad_deltas)


def _sample_positions(start: float, length: float, stride: float, size: int, bins: int) -> torch.Tensor:
    points = start + (torch.arange(bins, dtype=torch.float64) + 0.5) * (length / bins)
    return (points / stride).floor().clamp(0, size - 1).long()


def crop_and_resize(feature: torch.Tensor, box: torch.Tensor, stride: float, pool_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Nearest-neighbour crop of a (C, H, W) map onto a pool_size grid.

    Returns:
        (pooled (C, P, P), flat source indices (P * P,))
    """
    _, h, w = feature.shape
    x1, y1, x2, y2 = (float(v) for v in box)
    cols = _sample_positions(x1, max(x2 - x1, 1e-6), stride, w, pool_size)
    rows = _sample_positions(y1, max(y2 - y1, 1e-6), stride, h, pool_size)
    flat = (rows[:, None] * w + cols[None, :]).reshape(-1)
    pooled = feature.reshape(feature.shape[0], -1)[:, flat]
    return pooled.reshape(feature.shape[0], pool_size, pool_size), flat


class RefinementTrace(NamedTuple):
    indices: List[torch.Tensor]
    pooled: torch.Tensor
    hidden1_pre: torch.Tensor
    hidden1: torch.Tensor
    hidden2_pre: torch.Tensor
    hidden2: torch.Tensor


def refinement_forward(
    feature: torch.Tensor, rois: torch.Tensor, stride: float, params: RefinementParams
) -> Tuple[torch.Tensor, torch.Tensor, RefinementTrace]:
    """
    Classify and refine ``rois`` (R, 4) on one image's (C, H, W) map.

    Returns:
        (scores logits (R, K), deltas (R, 4), trace)
    """
    if feature.dim() != 3:
        raise DimensionError(f"refinement head expects a (C, H, W) map, got {tuple(feature.shape)}")
    pooled, indices = [], []
    for roi in rois:
        crop, flat = crop_and_resize(feature, roi, stride, params.pool_size)
        pooled.append(crop.reshape(-1))
        indices.append(flat)
    vectors = torch.stack(pooled) if pooled else feature.new_zeros((0, params.fc1.weight.shape[1]))
    h1_pre = fully_connected(vectors, params.fc1.weight, params.fc1.bias)
    h1 = relu(h1_pre)
    h2_pre = fully_connected(h1, params.fc2.weight, params.fc2.bias)
    h2 = relu(h2_pre)
    logits = fully_connected(h2, params.cls.weight, params.cls.bias)
    deltas = fully_connected(h2, params.reg.weight, params.reg.bias)
    return logits, deltas, RefinementTrace(indices, vectors, h1_pre, h1, h2_pre, h2)


def refinement_backward(
    feature: torch.Tensor,
    trace: RefinementTrace,
    params: RefinementParams,
    grad_logits: torch.Tensor,
    grad_deltas: torch.Tensor,
    prefix: str = "head.refinement",
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    cls_g = fully_connected_backward(trace.hidden2, params.cls.weight, params.cls.bias, grad_logits)
    reg_g = fully_connected_backward(trace.hidden2, params.reg.weight, params.reg.bias, grad_deltas)
    g = relu_backward(trace.hidden2_pre, cls_g.input + reg_g.input)
    fc2_g = fully_connected_backward(trace.hidden1, params.fc2.weight, params.fc2.bias, g)
    g = relu_backward(trace.hidden1_pre, fc2_g.input)
    fc1_g = fully_connected_backward(trace.pooled, params.fc1.weight, params.fc1.bias, g)

    c = feature.shape[0]
    grad_feature = torch.zeros_like(feature).reshape(c, -1)
    for row, flat in zip(fc1_g.input, trace.indices):
        grad_feature.index_add_(1, flat, row.reshape(c, -1))

    grads: Dict[str, torch.Tensor] = {}
    for name, lg in (("fc1", fc1_g), ("fc2", fc2_g), ("cls", cls_g), ("reg", reg_g)):
        grads[f"{prefix}.{name}.weight"] = lg.weight
        grads[f"{prefix}.{name}.bias"] = lg.bias
    return grad_feature.reshape(feature.shape), grads
