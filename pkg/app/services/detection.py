"""
Detection service.

Turns the raw head outputs of a trained detector into scored boxes: softmax
over the classes, box decoding against the anchors, clipping to the image,
score thresholding, per-class top-k, per-class NMS and the per-image cap.
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import torch

from app.core.errors import ConfigurationError
from app.kernels.activations import softmax
from app.kernels.tensor import check_rank4, make_generator
from app.models.anchors import clip_boxes, decode_boxes
from app.models.detector import ForwardResult, LffnDetector
from app.models.head import flatten_outputs, refinement_forward
from app.schemas.config import NmsConfig, NmsMode, PoolMode
from app.schemas.detection import Box, Detection
from app.services.annotations import write_predictions
from app.services.checkpoint import load_checkpoint
from app.services.nms import batched_nms

logger = logging.getLogger(__name__)


class DetectionService:
    """
    Service for running a detector over images.

    The methods are stateless; the detector and NMS configuration are passed
    in by the CLI, the ablation runner or the HTTP routes.
    """

    @staticmethod
    def candidates(
        detector: LffnDetector,
        result: ForwardResult,
        image_index: int,
        image_size: tuple,
        config: NmsConfig,
        image_id: int = 0,
    ) -> List[Detection]:
        """
        Thresholded, per-class top-k candidates of one image before NMS.

        Args:
            detector: Detector that produced ``result``
            result: Forward pass over a batch of images
            image_index: Position of the image in that batch
            image_size: (height, width) used for clipping
            config: Score threshold and top-k settings
            image_id: Identifier written to the detections

        Returns:
            Detections with class ids in [0, num_classes)
        """
        logits, deltas = flatten_outputs(result.outputs, detector.head)
        probs = softmax(logits[image_index], dim=-1)
        height, width = image_size
        boxes = clip_boxes(decode_boxes(result.anchors, deltas[image_index]), height, width)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])

        found: List[Detection] = []
        for k in range(1, probs.shape[1]):
            scores = torch.where(valid, probs[:, k], torch.zeros_like(probs[:, k]))
            keep = torch.nonzero(scores >= config.score_threshold).flatten()
            if keep.numel() == 0:
                continue
            if keep.numel() > config.pre_nms_top_k:
                order = torch.argsort(scores[keep], descending=True, stable=True)
                keep = keep[order[:config.pre_nms_top_k]]
            for idx in keep.tolist():
                found.append(
                    Detection(
                        box=Box.from_list(boxes[idx].tolist()),
                        score=float(scores[idx]),
                        class_id=k - 1,
                        image_id=image_id,
                    )
                )
        return found

    @staticmethod
    def refine(
        detector: LffnDetector,
        result: ForwardResult,
        image_index: int,
        image_size: tuple,
        dets: List[Detection],
    ) -> List[Detection]:
        """
        Rescore and refine detections with the second-stage head.

        Each box is pooled from the pyramid level whose base size is closest
        to the box side; the new score is the refinement probability of the
        detection's class.
        """
        params = detector.head.refinement
        if params is None or not dets:
            return list(dets)
        height, width = image_size
        sizes = torch.tensor(detector.config.anchors.base_sizes, dtype=torch.float64)
        refined: List[Detection] = []
        for det in dets:
            side = (det.box.width * det.box.height) ** 0.5
            level = 0 if detector.config.single_map else int(torch.argmin((sizes - side).abs()))
            level = min(level, len(result.levels) - 1)
            roi = torch.tensor([det.box.as_list()], dtype=result.levels[level].dtype)
            logits, deltas, _ = refinement_forward(
                result.levels[level][image_index], roi, result.strides[level], params
            )
            score = float(softmax(logits, dim=-1)[0, det.class_id + 1])
            box = clip_boxes(decode_boxes(roi, deltas), height, width)[0]
            if not (box[2] > box[0] and box[3] > box[1]):
                box = roi[0]
            refined.append(
                Detection(box=Box.from_list(box.tolist()), score=score, class_id=det.class_id, image_id=det.image_id)
            )
        return refined

    @staticmethod
    def detect(
        detector: LffnDetector,
        images: torch.Tensor,
        config: NmsConfig,
        generator: Optional[torch.Generator] = None,
        first_image_id: int = 0,
    ) -> List[Detection]:
        """
        Run the full detection pipeline on (N, 3, H, W) images.

        Args:
            detector: Trained detector (AQM runs in eval mode)
            images: Image batch; an empty batch yields no detections
            config: NMS and candidate settings
            generator: Source for stochastic NMS (seeded from config.seed if None)
            first_image_id: image_id of the first image

        Returns:
            Detections ordered by image, then by descending score
        """
        if images.shape[0] == 0:
            return []
        check_rank4(images, "images")
        if config.mode == NmsMode.STOCHASTIC and generator is None:
            generator = make_generator(config.seed)

        image_size = (images.shape[2], images.shape[3])
        result = detector.forward(images, pool_mode=PoolMode.EVAL)
        per_image: List[Detection] = []
        for i in range(images.shape[0]):
            image_id = first_image_id + i
            candidates = DetectionService.candidates(detector, result, i, image_size, config, image_id)
            kept = batched_nms(candidates, config, generator)
            if detector.head.refinement is not None:
                kept = DetectionService.refine(detector, result, i, image_size, kept)
                kept = [d for d in kept if d.score >= config.score_threshold]
                kept = sorted(kept, key=lambda d: -d.score)
            per_image.extend(kept[:config.max_detections])
        logger.info(f"Detected {len(per_image)} objects in {images.shape[0]} images")
        return per_image

    @staticmethod
    def detect_in_chunks(
        detector: LffnDetector,
        images: torch.Tensor,
        config: NmsConfig,
        chunk_size: int = 8,
    ) -> List[Detection]:
        """detect() over fixed-size chunks sharing one NMS generator."""
        if chunk_size < 1:
            raise ConfigurationError(f"chunk_size must be positive, got {chunk_size}")
        generator = make_generator(config.seed) if config.mode == NmsMode.STOCHASTIC else None
        dets: List[Detection] = []
        for start in range(0, images.shape[0], chunk_size):
            chunk = images[start:start + chunk_size]
            dets.extend(DetectionService.detect(detector, chunk, config, generator, first_image_id=start))
        return dets

    @staticmethod
    def detect_to_file(
        checkpoint_path: Union[str, Path],
        images: torch.Tensor,
        output_path: Union[str, Path],
        config: Optional[NmsConfig] = None,
    ) -> Path:
        """
        Load a checkpoint, detect and write the prediction file.

        Raises:
            VersionError: The checkpoint cannot be loaded into its own configuration
        """
        checkpoint = load_checkpoint(checkpoint_path)
        detector = checkpoint.to_detector()
        dets = DetectionService.detect_in_chunks(detector, images, config or checkpoint.config.nms)
        return write_predictions(dets, output_path)
