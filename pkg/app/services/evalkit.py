"""
Detection evaluation: greedy matching, precision/recall curves, AP and mAP.

Both VOC interpolation rules are supported: ``elevenpoint`` averages the
best precision at recall >= {0, 0.1, ..., 1} and ``continuous`` integrates
the right-to-left maximum precision envelope.
"""

import csv
import logging
from collections import defaultdict
from io import StringIO
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch

from app.core.errors import ConfigurationError
from app.core.storage import atomic_write_text
from app.models.anchors import box_iou
from app.schemas.config import ApMethod, EvalConfig
from app.schemas.detection import Detection, GroundTruth
from app.schemas.reports import ClassEvaluation, EvalReport, PRPoint

logger = logging.getLogger(__name__)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> List[Tuple[Detection, bool]]:
    """
    Greedily match detections to ground truths.

    Detections are visited by descending score; each one takes the unmatched
    ground truth of the same image and class with the highest IoU, and is a
    true positive when that IoU reaches ``iou_threshold``. Every ground truth
    is matched at most once.

    Returns:
        (detection, true-positive flag) pairs in descending score order
    """
    by_key: Dict[Tuple[int, int], List[GroundTruth]] = defaultdict(list)
    for gt in gts:
        by_key[(gt.image_id, gt.class_id)].append(gt)
    boxes = {
        key: torch.tensor([g.box.as_list() for g in items], dtype=torch.float64)
        for key, items in by_key.items()
    }
    used = {key: torch.zeros(len(items), dtype=torch.bool) for key, items in by_key.items()}

    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched: List[Tuple[Detection, bool]] = []
    for i in order:
        det = dets[i]
        key = (det.image_id, det.class_id)
        if key not in boxes:
            matched.append((det, False))
            continue
        overlaps = box_iou(torch.tensor([det.box.as_list()], dtype=torch.float64), boxes[key])[0]
        overlaps[used[key]] = -1.0
        best = int(torch.argmax(overlaps))
        if float(overlaps[best]) >= iou_threshold:
            used[key][best] = True
            matched.append((det, True))
        else:
            matched.append((det, False))
    return matched


def pr_curve(matched: Sequence[Tuple[Detection, bool]], total_gts: int) -> List[PRPoint]:
    """
    Cumulative precision/recall over descending score.

    An empty list is returned when there are no detections or no ground truths.
    """
    if total_gts <= 0 or not matched:
        return []
    ordered = sorted(matched, key=lambda pair: -pair[0].score)
    flags = np.array([tp for _, tp in ordered], dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    precision = tp / (tp + fp)
    recall = tp / float(total_gts)
    return [
        PRPoint(recall=float(r), precision=float(p), score_threshold=det.score)
        for r, p, (det, _) in zip(recall, precision, ordered)
    ]


def average_precision(curve: Sequence[PRPoint], method: ApMethod = ApMethod.CONTINUOUS) -> float:
    """Area under the interpolated precision/recall curve; 0 for an empty curve."""
    if not curve:
        return 0.0
    recall = np.array([p.recall for p in curve], dtype=np.float64)
    precision = np.array([p.precision for p in curve], dtype=np.float64)

    if ApMethod(method) == ApMethod.ELEVEN_POINT:
        total = 0.0
        for t in np.arange(11) / 10.0:
            reached = precision[recall >= t]
            total += float(reached.max()) if reached.size else 0.0
        return total / 11.0

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: Union[Sequence[float], Dict[int, float]]) -> float:
    """Arithmetic mean of per-class APs."""
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    if not values:
        raise ConfigurationError("mean_ap needs at least one class")
    return float(np.mean(values))


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    config: EvalConfig,
) -> EvalReport:
    """
    Per-class AP and mAP over the union of ground-truth and predicted classes.

    A class without ground truths gets AP 0 and a warning.
    """
    class_ids = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    if not class_ids:
        raise ConfigurationError("nothing to evaluate: no ground truths and no detections")

    classes: List[ClassEvaluation] = []
    for class_id in class_ids:
        class_dets = [d for d in dets if d.class_id == class_id]
        class_gts = [g for g in gts if g.class_id == class_id]
        warning = None
        if not class_gts:
            warning = f"class {class_id} has no ground truths; AP set to 0"
            logger.warning(warning)
        matched = match_detections(class_dets, class_gts, config.iou_threshold)
        curve = pr_curve(matched, len(class_gts))
        ap = average_precision(curve, config.ap_method)
        classes.append(
            ClassEvaluation(
                class_id=class_id,
                ap=min(max(ap, 0.0), 1.0),
                num_ground_truths=len(class_gts),
                num_detections=len(class_dets),
                curve=curve,
                warning=warning,
            )
        )

    per_class = {c.class_id: c.ap for c in classes}
    report = EvalReport(per_class_ap=per_class, mean_ap=mean_ap(per_class), classes=classes, config=config)
    logger.info(f"Evaluated {len(dets)} detections against {len(gts)} ground truths: mAP {report.mean_ap:.4f}")
    return report


def write_pr_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    """One row per PR point: class_id, recall, precision, score_threshold."""
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["class_id", "recall", "precision", "score_threshold"])
    for cls in report.classes:
        for point in cls.curve:
            writer.writerow([cls.class_id, f"{point.recall:.6f}", f"{point.precision:.6f}", f"{point.score_threshold:.6f}"])
    return atomic_write_text(path, buffer.getvalue())
