"""
Toy LFFN detector: backbone, fusion, optional AQM gating and detection head.

The ablation mode of the run configuration selects the architecture:

    single-map      C5 -> 1x1 projection -> head (all anchor sizes on one map)
    pyramid-nofuse  lateral projections only, no top-down pathway
    fpn-add         top-down pathway merged by element-wise addition
    lffn            layer-weakening concat fusion
    lffn+aqm        lffn followed by one AQM per level

Forward and backward passes are explicit; parameters are plain tensors
reachable through ``named_tensors`` with the same keys as the gradients.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Tuple

import torch

from app.core.errors import ConfigurationError
from app.kernels.activations import relu, relu_backward
from app.kernels.conv import conv2d, conv2d_backward
from app.kernels.losses import smooth_l1, softmax_cross_entropy
from app.models.anchors import (
    box_iou,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    generate_single_map_anchors,
    label_anchors,
    sample_minibatch,
)
from app.models.aqm import AqmParams, AqmTrace, aqm_backward, aqm_forward_trace
from app.models.backbone import BackboneTrace, ToyBackbone, build_toy_backbone
from app.models.fusion import (
    FusionParams,
    PyramidInputs,
    PyramidTrace,
    build_pyramid_backward,
    build_pyramid_forward,
)
from app.models.head import (
    HeadOutput,
    HeadParams,
    HeadTrace,
    build_targets,
    compute_loss,
    flatten_outputs,
    head_backward,
    head_forward_trace,
    refinement_backward,
    refinement_forward,
    unflatten_grads,
)
from app.schemas.config import PoolMode, RunConfig
from app.schemas.reports import LossBreakdown

logger = logging.getLogger(__name__)

NUM_LEVELS = 5
REFINEMENT_FG_IOU = 0.5


class ForwardResult(NamedTuple):
    """
    Attributes:
        outputs: Per-level head outputs
        levels: Maps fed to the head
        strides: Pixel stride of each level
        anchors: (T, 4) anchors in flattened prediction order
        anchor_levels: (T,) level index of every anchor
    """

    outputs: List[HeadOutput]
    levels: List[torch.Tensor]
    strides: List[float]
    anchors: torch.Tensor
    anchor_levels: torch.Tensor
    backbone: BackboneTrace
    pyramid: Optional[PyramidTrace]
    inputs: PyramidInputs
    pre_gate: List[torch.Tensor]
    aqm: List[AqmTrace]
    head: HeadTrace


@dataclass
class LffnDetector:
    config: RunConfig
    backbone: ToyBackbone
    fusion: FusionParams
    head: HeadParams
    aqm: List[AqmParams] = field(default_factory=list)

    @classmethod
    def initialize(cls, config: RunConfig, generator: torch.Generator) -> "LffnDetector":
        """Seeded random parameters for ``config.mode``."""
        backbone = build_toy_backbone(config.backbone, generator)
        fusion_config = config.effective_fusion()
        fusion = FusionParams.initialize(
            fusion_config, backbone.out_channels, generator, top_only=config.single_map
        )
        if config.single_map:
            anchors_per_cell = config.anchors.anchors_per_cell * len(config.anchors.base_sizes)
        else:
            anchors_per_cell = config.anchors.anchors_per_cell
        head = HeadParams.initialize(
            fusion_config.output_channels,
            anchors_per_cell,
            config.head.num_classes,
            generator,
            refinement=config.head.refinement_enabled,
            refinement_hidden=config.head.refinement_hidden,
            refinement_pool_size=config.head.refinement_pool_size,
        )
        aqm: List[AqmParams] = []
        if config.uses_aqm:
            count = 1 if config.aqm.shared else NUM_LEVELS
            aqm = [
                AqmParams.initialize(fusion_config.output_channels, generator, std=config.aqm.init_std)
                for _ in range(count)
            ]
        detector = cls(config, backbone, fusion, head, aqm)
        count = sum(t.numel() for t in detector.named_tensors().values())
        logger.info(f"Initialized {config.mode.value} detector with {count} parameters")
        return detector

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        """Every parameter tensor keyed by its checkpoint tag."""
        tensors = dict(self.backbone.named_tensors("backbone"))
        tensors.update(self.fusion.named_tensors("fusion"))
        for i, params in enumerate(self.aqm):
            tensors.update(params.named_tensors(f"aqm.{i}"))
        tensors.update(self.head.named_tensors("head"))
        return tensors

    def _aqm_for(self, level: int) -> AqmParams:
        return self.aqm[0] if len(self.aqm) == 1 else self.aqm[level]

    def anchors_for(self, image_size: Tuple[int, int], level_shapes: List[Tuple[int, int]]) -> Tuple[torch.Tensor, torch.Tensor, List[float]]:
        """Anchors of every level in prediction order, their level ids and the level strides."""
        image_h, _ = image_size
        strides = [image_h / h for h, _ in level_shapes]
        if self.config.single_map:
            (h, w), stride = level_shapes[0], strides[0]
            anchors = generate_single_map_anchors(h, w, stride, self.config.anchors)
            return anchors, torch.zeros(anchors.shape[0], dtype=torch.long), strides
        per_level = [
            generate_anchors(i, h, w, self.config.anchors, stride=stride)
            for i, ((h, w), stride) in enumerate(zip(level_shapes, strides))
        ]
        levels = torch.cat([torch.full((a.shape[0],), i, dtype=torch.long) for i, a in enumerate(per_level)])
        return torch.cat(per_level), levels, strides

    def forward(
        self,
        images: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        pool_mode: PoolMode = PoolMode.EVAL,
    ) -> ForwardResult:
        """Run the detector on (N, 3, H, W) images."""
        inputs, backbone_trace = self.backbone.forward_trace(images)
        pyramid_trace = None
        if self.config.single_map:
            levels = [conv2d(inputs.c5, self.fusion.p5)]
        else:
            outputs, pyramid_trace = build_pyramid_forward(inputs, self.fusion, self.config.effective_fusion())
            levels = outputs.levels()

        pre_gate: List[torch.Tensor] = []
        aqm_traces: List[AqmTrace] = []
        if self.aqm:
            gated = []
            for i, level in enumerate(levels):
                params = replace(self._aqm_for(i), mode=pool_mode)
                out, trace = aqm_forward_trace(relu(level), params, generator)
                pre_gate.append(level)
                aqm_traces.append(trace)
                gated.append(out)
            levels = gated

        head_outputs, head_trace = head_forward_trace(levels, self.head)
        anchors, anchor_levels, strides = self.anchors_for(
            (images.shape[2], images.shape[3]), [(t.shape[2], t.shape[3]) for t in levels]
        )
        return ForwardResult(
            head_outputs, levels, strides, anchors, anchor_levels,
            backbone_trace, pyramid_trace, inputs, pre_gate, aqm_traces, head_trace,
        )

    def backward(
        self, result: ForwardResult, output_grads: List[HeadOutput], extra_level_grads: Optional[List[torch.Tensor]] = None
    ) -> Dict[str, torch.Tensor]:
        """Parameter gradients from gradients of the head outputs (and optional extra level gradients)."""
        level_grads, grads = head_backward(result.head, self.head, output_grads, prefix="head")
        if extra_level_grads is not None:
            level_grads = [g + e for g, e in zip(level_grads, extra_level_grads)]

        if self.aqm:
            ungated = []
            for i, (g, trace) in enumerate(zip(level_grads, result.aqm)):
                aqm_grads = aqm_backward(trace, self._aqm_for(i), g)
                key = f"aqm.{0 if len(self.aqm) == 1 else i}.weight"
                grads[key] = grads[key] + aqm_grads.weight if key in grads else aqm_grads.weight
                ungated.append(relu_backward(result.pre_gate[i], aqm_grads.input))
            level_grads = ungated

        if self.config.single_map:
            p5_grads = conv2d_backward(result.inputs.c5, self.fusion.p5, level_grads[0])
            grads["fusion.p5.weight"] = p5_grads.weight
            grads["fusion.p5.bias"] = p5_grads.bias
            c_grads = [None, None, None, p5_grads.input]
        else:
            c_grads, fusion_grads = build_pyramid_backward(
                result.inputs, result.pyramid, self.fusion, self.config.effective_fusion(), level_grads
            )
            grads.update(fusion_grads)

        _, backbone_grads = self.backbone.backward(result.backbone, c_grads)
        grads.update(backbone_grads)
        return grads

    def loss_and_grads(
        self,
        image: torch.Tensor,
        gt_boxes: torch.Tensor,
        gt_classes: torch.Tensor,
        generator: torch.Generator,
    ) -> Tuple[LossBreakdown, Dict[str, torch.Tensor]]:
        """
        Joint loss of one image and the gradient of every parameter.

        Randomness is drawn from ``generator`` in a fixed order: AQM pooling
        samples first, then the anchor minibatch.
        """
        if image.shape[0] != 1:
            raise ConfigurationError(f"training uses batch size 1, got {image.shape[0]}")
        head_cfg = self.config.head
        result = self.forward(image, generator, PoolMode.TRAIN)
        logits, deltas = flatten_outputs(result.outputs, self.head)
        logits, deltas = logits[0], deltas[0]

        image_size = (image.shape[2], image.shape[3]) if self.config.anchors.ignore_cross_boundary else None
        labels = label_anchors(
            result.anchors, gt_boxes, head_cfg.pos_iou_threshold, head_cfg.neg_iou_threshold, image_size
        )
        pos_idx, neg_idx = sample_minibatch(labels, generator, head_cfg.sample_total, head_cfg.neg_to_pos)
        class_targets, reg_targets = build_targets(result.anchors, gt_boxes, gt_classes, labels)
        loss = compute_loss(
            logits, deltas, class_targets, reg_targets, pos_idx, neg_idx,
            head_cfg.loss_weight, head_cfg.smooth_l1_beta,
        )
        breakdown = loss.breakdown
        output_grads = unflatten_grads(loss.grad_logits.unsqueeze(0), loss.grad_deltas.unsqueeze(0), result.outputs, self.head)

        extra = None
        refinement_grads: Dict[str, torch.Tensor] = {}
        if self.head.refinement is not None and gt_boxes.shape[0]:
            sampled = torch.cat([pos_idx, neg_idx])
            breakdown, extra, refinement_grads = self._refinement_loss(
                result, deltas.detach(), sampled, gt_boxes, gt_classes, (image.shape[2], image.shape[3]), breakdown
            )

        grads = self.backward(result, output_grads, extra)
        grads.update(refinement_grads)
        return breakdown, grads

    def _refinement_loss(
        self,
        result: ForwardResult,
        deltas: torch.Tensor,
        sampled: torch.Tensor,
        gt_boxes: torch.Tensor,
        gt_classes: torch.Tensor,
        image_size: Tuple[int, int],
        breakdown: LossBreakdown,
    ):
        """Second-stage loss on the decoded boxes of the sampled anchors, added to the first-stage terms."""
        params = self.head.refinement
        height, width = image_size
        rois = clip_boxes(decode_boxes(result.anchors[sampled], deltas[sampled]), height, width)
        valid = ((rois[:, 2] - rois[:, 0]) >= 1.0) & ((rois[:, 3] - rois[:, 1]) >= 1.0)
        rois, roi_levels = rois[valid], result.anchor_levels[sampled][valid]
        extra = [torch.zeros_like(level) for level in result.levels]
        grads: Dict[str, torch.Tensor] = {}
        if rois.shape[0] == 0:
            return breakdown, extra, grads

        overlaps = box_iou(rois, gt_boxes)
        best_iou, best_gt = overlaps.max(dim=1)
        foreground = best_iou >= REFINEMENT_FG_IOU
        targets = torch.where(foreground, gt_classes[best_gt].long() + 1, torch.zeros_like(best_gt))
        total = rois.shape[0]
        cls_sum = loc_sum = 0.0
        num_fg = int(foreground.sum())
        beta, weight = self.config.head.smooth_l1_beta, self.config.head.loss_weight

        for level in torch.unique(roi_levels).tolist():
            mask = roi_levels == level
            feature = result.levels[level][0]
            logits, ref_deltas, trace = refinement_forward(feature, rois[mask], result.strides[level], params)
            cls_loss, g_logits = softmax_cross_entropy(logits, targets[mask])
            share = float(mask.sum()) / total
            cls_sum += cls_loss * share
            g_logits = g_logits * share
            g_deltas = torch.zeros_like(ref_deltas)
            fg = foreground[mask]
            if bool(fg.any()):
                reg_targets = encode_boxes(rois[mask][fg], gt_boxes[best_gt[mask][fg]])
                summed, g_fg = smooth_l1(ref_deltas[fg], reg_targets, beta)
                loc_sum += summed / num_fg
                g_deltas[fg] = weight * g_fg / num_fg
            g_feature, level_grads = refinement_backward(feature, trace, params, g_logits, g_deltas)
            extra[level][0] += g_feature
            for key, value in level_grads.items():
                grads[key] = grads[key] + value if key in grads else value

        for key, tensor in params.named_tensors("head.refinement").items():
            grads.setdefault(key, torch.zeros_like(tensor))
        merged = LossBreakdown(
            classification=breakdown.classification + cls_sum,
            localization=breakdown.localization + loc_sum,
            total=breakdown.total + cls_sum + weight * loc_sum,
            loss_weight=breakdown.loss_weight,
            positives=breakdown.positives,
            negatives=breakdown.negatives,
        )
        return merged, extra, grads
