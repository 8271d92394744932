"""
Traditional and stochastic non-maximum suppression.

Both variants run the same greedy loop: the highest-scoring remaining frame M
is kept and every other remaining frame b_i with IoU(M, b_i) >= N_t is
examined. Traditional NMS removes all of them. Stochastic NMS keeps each one
with probability p_i = area(M and b_i) / area(b_i) (independent Bernoulli
draws from the supplied generator) and otherwise removes it; kept frames
retain their original score.
"""

import logging
from collections import defaultdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from app.kernels.tensor import make_generator
from app.models.anchors import box_iou
from app.schemas.config import NmsConfig, NmsMode, RetentionRule
from app.schemas.detection import Detection

logger = logging.getLogger(__name__)

# Called with (input index of b_i, retention probability p_i); returns True to keep b_i.
RetentionFn = Callable[[int, float], bool]


def _areas(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def _intersections(box: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    lt = torch.maximum(box[:2], boxes[:, :2])
    rb = torch.minimum(box[2:], boxes[:, 2:])
    wh = (rb - lt).clamp(min=0)
    return wh[:, 0] * wh[:, 1]


def retention_probability(
    selected: torch.Tensor,
    boxes: torch.Tensor,
    rule: RetentionRule = RetentionRule.COVERAGE,
) -> torch.Tensor:
    """
    Probability that each of ``boxes`` survives suppression by ``selected``.

    coverage: area(M and b) / area(b). iou-over-area: IoU(M, b) / area(b).
    Both are clamped to [0, 1].
    """
    areas = _areas(boxes)
    if rule == RetentionRule.COVERAGE:
        p = _intersections(selected, boxes) / areas
    else:
        p = box_iou(selected.unsqueeze(0), boxes)[0] / areas
    return p.clamp(0.0, 1.0)


def nms_indices(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    threshold: float,
    mode: NmsMode = NmsMode.TRADITIONAL,
    generator: Optional[torch.Generator] = None,
    rule: RetentionRule = RetentionRule.COVERAGE,
    retention: Optional[RetentionFn] = None,
) -> torch.Tensor:
    """
    Greedy NMS over one class.

    Args:
        boxes: (M, 4) boxes
        scores: (M,) scores
        threshold: Overlap threshold N_t; IoU >= N_t triggers suppression
        mode: traditional or stochastic
        generator: Random source of the stochastic retention draws
        rule: Retention probability rule (stochastic mode)
        retention: Overrides the Bernoulli draw (stochastic mode)

    Returns:
        Indices of surviving boxes, by descending score (ties by input index)
    """
    if boxes.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    order = torch.sort(scores, descending=True, stable=True).indices
    stochastic = NmsMode(mode) == NmsMode.STOCHASTIC
    remaining = order
    keep: List[int] = []
    while remaining.numel() > 0:
        m = int(remaining[0])
        keep.append(m)
        rest = remaining[1:]
        if rest.numel() == 0:
            break
        overlap = box_iou(boxes[m].unsqueeze(0), boxes[rest])[0] >= threshold
        if not bool(overlap.any()):
            remaining = rest
            continue
        survive = ~overlap
        if stochastic:
            candidates = torch.nonzero(overlap).squeeze(1)
            p = retention_probability(boxes[m], boxes[rest[candidates]], rule)
            if retention is not None:
                retained = torch.tensor(
                    [bool(retention(int(rest[c]), float(pi))) for c, pi in zip(candidates, p)],
                    dtype=torch.bool,
                )
            else:
                draws = torch.rand(candidates.numel(), generator=generator, dtype=p.dtype)
                retained = draws < p
            survive[candidates[retained]] = True
        remaining = rest[survive]
    return torch.tensor(keep, dtype=torch.long)


def _as_tensors(dets: Sequence[Detection]) -> Tuple[torch.Tensor, torch.Tensor]:
    boxes = torch.tensor([d.box.as_list() for d in dets], dtype=torch.float64).reshape(-1, 4)
    scores = torch.tensor([d.score for d in dets], dtype=torch.float64)
    return boxes, scores


def nms_traditional(dets: Sequence[Detection], config: NmsConfig) -> List[Detection]:
    """Greedy NMS; the caller groups detections by class."""
    boxes, scores = _as_tensors(dets)
    return [dets[i] for i in nms_indices(boxes, scores, config.threshold).tolist()]


def stochastic_nms(
    dets: Sequence[Detection],
    config: NmsConfig,
    generator: torch.Generator,
    retention: Optional[RetentionFn] = None,
) -> List[Detection]:
    """
    Stochastic NMS; overlapping frames survive with their coverage probability.

    A ``retention`` callable that always returns False reproduces
    nms_traditional; one that always returns True keeps every input.
    """
    boxes, scores = _as_tensors(dets)
    keep = nms_indices(
        boxes,
        scores,
        config.threshold,
        NmsMode.STOCHASTIC,
        generator,
        config.retention_rule,
        retention,
    )
    return [dets[i] for i in keep.tolist()]


def batched_nms(
    dets: Sequence[Detection],
    config: NmsConfig,
    generator: Optional[torch.Generator] = None,
) -> List[Detection]:
    """
    Run NMS independently per (image, class) group.

    Groups are processed in (image_id, class_id) order so one seeded
    generator gives reproducible stochastic results. Output is ordered by
    image, then by descending score.
    """
    groups: Dict[Tuple[int, int], List[Detection]] = defaultdict(list)
    for det in dets:
        groups[(det.image_id, det.class_id)].append(det)

    if config.mode == NmsMode.STOCHASTIC and generator is None:
        generator = make_generator(config.seed)

    per_image: Dict[int, List[Detection]] = defaultdict(list)
    for key in sorted(groups):
        group = groups[key]
        if config.mode == NmsMode.STOCHASTIC:
            survivors = stochastic_nms(group, config, generator)
        else:
            survivors = nms_traditional(group, config)
        per_image[key[0]].extend(survivors)

    result: List[Detection] = []
    for image_id in sorted(per_image):
        result.extend(sorted(per_image[image_id], key=lambda d: -d.score))
    logger.info(f"NMS ({config.mode.value}, N_t={config.threshold}): {len(dets)} -> {len(result)} detections")
    return result
