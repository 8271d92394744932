"""
Pydantic schemas for run configuration.

Every default used by the bench CLI lives here and is mirrored in the
committed ``default.cfg``.
"""

from enum import Enum
from typing import List

from pydantic import BaseModel, Field, field_validator, model_validator


class MergeMode(str, Enum):
    """How the top-down pathway joins the lateral features."""

    CONCAT = "concat"
    ADD = "add"
    NONE = "none"


class AblationMode(str, Enum):
    """Architecture ladder compared by the ablation command."""

    SINGLE_MAP = "single-map"
    PYRAMID_NOFUSE = "pyramid-nofuse"
    FPN_ADD = "fpn-add"
    LFFN = "lffn"
    LFFN_AQM = "lffn+aqm"


class PoolMode(str, Enum):
    """Stochastic pooling behaviour."""

    TRAIN = "train"
    EVAL = "eval"


class NmsMode(str, Enum):
    TRADITIONAL = "traditional"
    STOCHASTIC = "stochastic"


class RetentionRule(str, Enum):
    """Retention probability used by stochastic NMS."""

    COVERAGE = "coverage"
    IOU_OVER_AREA = "iou-over-area"


class ApMethod(str, Enum):
    ELEVEN_POINT = "elevenpoint"
    CONTINUOUS = "continuous"


CLASS_NAMES = ("plane", "bridge", "storage", "harbor")


class DatasetConfig(BaseModel):
    """
    Synthetic multi-scale dataset parameters.

    Attributes:
        image_size: Side of the square images in pixels
        num_train: Number of training images
        num_test: Number of held-out images
        objects_min: Minimum number of objects per image
        objects_max: Maximum number of objects per image
        class_sizes: Per-class [min, max] object extent in pixels
        max_overlap_iou: Largest IoU allowed between two placed objects
        placement_retries: Attempts per object before generation fails
        noise_std: Standard deviation of the background noise
    """

    image_size: int = Field(64, ge=16, description="Square image side in pixels")
    num_train: int = Field(50, ge=0)
    num_test: int = Field(20, ge=0)
    objects_min: int = Field(2, ge=0)
    objects_max: int = Field(5, ge=0)
    class_sizes: List[List[int]] = Field(
        default_factory=lambda: [[5, 9], [10, 24], [8, 16], [16, 32]],
        description="Per-class [min, max] extents, one entry per class",
    )
    max_overlap_iou: float = Field(0.1, ge=0.0, le=1.0)
    placement_retries: int = Field(200, ge=1)
    noise_std: float = Field(0.05, ge=0.0)

    @field_validator("class_sizes")
    @classmethod
    def sizes_must_be_ranges(cls, v: List[List[int]]) -> List[List[int]]:
        if len(v) != len(CLASS_NAMES):
            raise ValueError(f"expected {len(CLASS_NAMES)} class size ranges, got {len(v)}")
        for lo_hi in v:
            if len(lo_hi) != 2 or not 2 <= lo_hi[0] <= lo_hi[1]:
                raise ValueError(f"invalid size range {lo_hi}")
        return v

    @model_validator(mode="after")
    def check_scale_spread(self) -> "DatasetConfig":
        if self.objects_min > self.objects_max:
            raise ValueError("objects_min must not exceed objects_max")
        smallest = min(lo for lo, _ in self.class_sizes)
        largest = max(hi for _, hi in self.class_sizes)
        if largest < 4 * smallest:
            raise ValueError("class sizes must span at least a 4x scale spread")
        small_area = min(hi * hi for _, hi in self.class_sizes)
        if small_area >= 0.03 * self.image_size**2:
            raise ValueError("one class must occupy less than 3% of the image area")
        if largest > self.image_size:
            raise ValueError("object sizes must fit inside the image")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_sizes)


class BackboneConfig(BaseModel):
    """Executable toy backbone: stem plus four conv stages."""

    in_channels: int = Field(3, ge=1)
    stem_channels: int = Field(16, ge=1)
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128])
    se: bool = Field(False, description="Append an SE block to every stage")
    se_reduction: int = Field(4, ge=1)


class FusionConfig(BaseModel):
    """
    Layer-weakening feature fusion settings.

    Attributes:
        output_channels: Channel count of every pyramid level
        topdown_channel_schedule: Upsampled-channel share per merge, P4 merge first
        post_merge_smoothing: Apply a 3x3 conv after each merge
        p5_channels: Channels of the 1x1 projection of C5
        merge_mode: concat (layer-weakening), add (FPN) or none (no top-down)
        deconv_kernel: Kernel of the x2 deconvolution
        deconv_stride: Stride of the deconvolution
        deconv_padding: Padding of the deconvolution
    """

    output_channels: int = Field(256, ge=1)
    topdown_channel_schedule: List[int] = Field(default_factory=lambda: [128, 64, 32])
    post_merge_smoothing: bool = True
    p5_channels: int = Field(256, ge=1)
    merge_mode: MergeMode = MergeMode.CONCAT
    deconv_kernel: int = Field(4, ge=1)
    deconv_stride: int = Field(2, ge=1)
    deconv_padding: int = Field(1, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "FusionConfig":
        if self.p5_channels != self.output_channels:
            raise ValueError(
                f"p5_channels ({self.p5_channels}) must equal output_channels "
                f"({self.output_channels})"
            )
        if self.merge_mode != MergeMode.CONCAT:
            return self
        schedule = self.topdown_channel_schedule
        if len(schedule) != 3:
            raise ValueError(f"schedule needs one entry per merge step (3), got {len(schedule)}")
        for entry in schedule:
            if not 0 < entry < self.output_channels:
                raise ValueError(
                    f"schedule entry {entry} must lie in (0, {self.output_channels})"
                )
        if any(a <= b for a, b in zip(schedule, schedule[1:])):
            raise ValueError(f"schedule {schedule} must strictly decrease toward P2")
        return self

    def topdown_channels(self, step: int) -> int:
        """Channels contributed by the top-down branch at merge ``step``."""
        if self.merge_mode == MergeMode.CONCAT:
            return self.topdown_channel_schedule[step]
        if self.merge_mode == MergeMode.ADD:
            return self.output_channels
        return 0

    def lateral_channels(self, step: int) -> int:
        if self.merge_mode == MergeMode.CONCAT:
            return self.output_channels - self.topdown_channel_schedule[step]
        return self.output_channels


class AqmConfig(BaseModel):
    """Adaptive quantization module settings."""

    shared: bool = Field(False, description="One W_FC shared by all pyramid levels")
    init_std: float = Field(0.0, ge=0.0, description="0 gives the neutral zero init")


class AnchorConfig(BaseModel):
    """
    Anchor tiling per pyramid level.

    Attributes:
        aspect_ratios: Height/width ratios of the anchors in each cell
        scale: Anchor scale relative to the stride (used when base_sizes is empty)
        strides: Feature stride of P2..P6
        base_sizes: Anchor side (sqrt of area) per level
        ignore_cross_boundary: Label anchors crossing the image border as ignore
    """

    aspect_ratios: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    scale: int = Field(8, ge=1)
    strides: List[int] = Field(default_factory=lambda: [4, 8, 16, 32, 64])
    base_sizes: List[float] = Field(default_factory=lambda: [32, 64, 128, 512, 1024])
    ignore_cross_boundary: bool = False

    @model_validator(mode="after")
    def check_levels(self) -> "AnchorConfig":
        if not self.base_sizes:
            self.base_sizes = [float(self.scale * s) for s in self.strides]
        if len(self.base_sizes) != len(self.strides):
            raise ValueError("one base size per pyramid level is required")
        if any(a >= b for a, b in zip(self.base_sizes, self.base_sizes[1:])):
            raise ValueError(f"base sizes {self.base_sizes} must strictly increase")
        if any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")
        return self

    @property
    def anchors_per_cell(self) -> int:
        return len(self.aspect_ratios)


class HeadConfig(BaseModel):
    """
    Detection head, anchor labeling, sampling and loss settings.

    Attributes:
        num_classes: Object classes (the classifier adds one background class)
        loss_weight: Lambda weighting localization against classification
        smooth_l1_beta: Transition point of the smooth-L1 loss
        pos_iou_threshold: IoU above which an anchor is positive
        neg_iou_threshold: IoU below which an anchor is negative
        sample_total: Anchors sampled per image
        neg_to_pos: Negatives per positive in the sampled batch
        refinement_enabled: Train and run the second-stage FC head
        refinement_hidden: Width of the two hidden FC layers
        refinement_pool_size: Side of the crop-and-resize grid
    """

    num_classes: int = Field(1, ge=1)
    loss_weight: float = Field(1.0, ge=0.0)
    smooth_l1_beta: float = Field(1.0, gt=0.0)
    pos_iou_threshold: float = Field(0.7, gt=0.0, lt=1.0)
    neg_iou_threshold: float = Field(0.3, gt=0.0, lt=1.0)
    sample_total: int = Field(128, ge=1)
    neg_to_pos: float = Field(3.0, ge=0.0)
    refinement_enabled: bool = False
    refinement_hidden: int = Field(1024, ge=1)
    refinement_pool_size: int = Field(7, ge=1)

    @model_validator(mode="after")
    def check_thresholds(self) -> "HeadConfig":
        if self.neg_iou_threshold >= self.pos_iou_threshold:
            raise ValueError("neg_iou_threshold must be below pos_iou_threshold")
        return self


class OptimizerConfig(BaseModel):
    """SGD with momentum. A zero learning rate freezes the weights."""

    learning_rate: float = Field(0.001, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)


class TrainingConfig(BaseModel):
    iterations: int = Field(200, ge=1)
    checkpoint_every: int = Field(50, ge=1)
    smoothing_window: int = Field(20, ge=1)


class NmsConfig(BaseModel):
    """
    Non-maximum suppression settings.

    Attributes:
        threshold: Overlap threshold N_t (0.7 for proposals, 0.45 for detections)
        mode: traditional or stochastic
        seed: Seed of the stochastic retention draws
        retention_rule: coverage = area(M and b)/area(b); iou-over-area is the literal reading
        score_threshold: Minimum class score kept before NMS
        pre_nms_top_k: Candidates per class entering NMS
        max_detections: Detections kept per image after NMS
    """

    threshold: float = Field(0.45, gt=0.0, lt=1.0)
    mode: NmsMode = NmsMode.TRADITIONAL
    seed: int = Field(0, ge=0)
    retention_rule: RetentionRule = RetentionRule.COVERAGE
    score_threshold: float = Field(0.05, ge=0.0, le=1.0)
    pre_nms_top_k: int = Field(1000, ge=1)
    max_detections: int = Field(100, ge=1)


class EvalConfig(BaseModel):
    iou_threshold: float = Field(0.5, gt=0.0, le=1.0)
    ap_method: ApMethod = ApMethod.CONTINUOUS


class RunConfig(BaseModel):
    """
    Complete experiment configuration.

    The ablation ``mode`` decides which fusion merge mode is effective and
    whether the adaptive quantization module runs.
    """

    format_version: int = 1
    seed: int = Field(0, ge=0)
    mode: AblationMode = AblationMode.LFFN
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    aqm: AqmConfig = Field(default_factory=AqmConfig)
    anchors: AnchorConfig = Field(default_factory=AnchorConfig)
    head: HeadConfig = Field(default_factory=lambda: HeadConfig(num_classes=4))
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    nms: NmsConfig = Field(default_factory=NmsConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_classes(self) -> "RunConfig":
        if self.head.num_classes != self.dataset.num_classes:
            raise ValueError(
                f"head.num_classes ({self.head.num_classes}) must match the dataset "
                f"class count ({self.dataset.num_classes})"
            )
        return self

    def effective_fusion(self) -> FusionConfig:
        """Fusion config with the merge mode implied by the ablation mode."""
        merge = {
            AblationMode.SINGLE_MAP: MergeMode.NONE,
            AblationMode.PYRAMID_NOFUSE: MergeMode.NONE,
            AblationMode.FPN_ADD: MergeMode.ADD,
            AblationMode.LFFN: MergeMode.CONCAT,
            AblationMode.LFFN_AQM: MergeMode.CONCAT,
        }[self.mode]
        return self.fusion.model_copy(update={"merge_mode": merge})

    @property
    def uses_aqm(self) -> bool:
        return self.mode == AblationMode.LFFN_AQM

    @property
    def single_map(self) -> bool:
        return self.mode == AblationMode.SINGLE_MAP
