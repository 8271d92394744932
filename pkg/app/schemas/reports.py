"""
Pydantic schemas for reports produced by the kernels and services.
"""

from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from app.schemas.config import EvalConfig


class ParameterError(BaseModel):
    """Largest gradient mismatch observed for one checked tensor."""

    name: str
    error: float
    abs_error: float = 0.0
    checked: int = 0
    skipped: int = 0


class GradCheckReport(BaseModel):
    """
    Outcome of a finite-difference gradient check.

    Attributes:
        op_name: Operation under test
        max_relative_error: Largest relative error over all checked entries
        max_absolute_error: Largest absolute error over all checked entries
        failed_entries: Entries over both the relative and the absolute tolerance
        parameter_errors: Per-tensor maximum errors
        tolerance: Relative-error threshold
        passed: No failed entries and every value finite
    """

    op_name: str
    max_relative_error: float
    max_absolute_error: float = 0.0
    failed_entries: int = 0
    parameter_errors: List[ParameterError] = Field(default_factory=list)
    tolerance: float
    passed: bool


class LossBreakdown(BaseModel):
    """
    Joint detection loss for one minibatch.

    Attributes:
        classification: Mean softmax cross-entropy over sampled anchors
        localization: Mean smooth-L1 over positive anchors
        total: classification + loss_weight * localization
        positives: Sampled positive anchors
        negatives: Sampled negative anchors
    """

    classification: float = Field(..., ge=0.0)
    localization: float = Field(..., ge=0.0)
    total: float = Field(..., ge=0.0)
    loss_weight: float = 1.0
    positives: int = Field(..., ge=0)
    negatives: int = Field(..., ge=0)


class PRPoint(BaseModel):
    """One point of a precision/recall curve (descending score order)."""

    recall: float = Field(..., ge=0.0, le=1.0)
    precision: float = Field(..., ge=0.0, le=1.0)
    score_threshold: float


class ClassEvaluation(BaseModel):
    class_id: int
    ap: float = Field(..., ge=0.0, le=1.0)
    num_ground_truths: int
    num_detections: int
    curve: List[PRPoint] = Field(default_factory=list)
    warning: Optional[str] = None


class EvalReport(BaseModel):
    """
    Detection evaluation summary.

    Attributes:
        per_class_ap: AP for every evaluated class
        mean_ap: Arithmetic mean of the per-class APs
        classes: Curves and counts per class
        config: Configuration that produced the report
    """

    per_class_ap: Dict[int, float]
    mean_ap: float = Field(..., ge=0.0, le=1.0)
    classes: List[ClassEvaluation]
    config: EvalConfig


class StageCost(BaseModel):
    stage: str
    macs: int = Field(..., ge=0)
    params: int = Field(..., ge=0)


class CostReport(BaseModel):
    """
    Analytical cost of one forward pass.

    One multiply-accumulate counts as one FLOP. Batch-norm layers add 2C
    parameters and no MACs.
    """

    name: str
    input_shape: Tuple[int, int, int, int]
    output_shape: Tuple[int, ...]
    total_macs: int = Field(..., ge=0)
    params: int = Field(..., ge=0)
    stages: List[StageCost]
    convention: str = "1 MAC = 1 FLOP; batch norm counted in params (2C), not in MACs"

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    @model_validator(mode="after")
    def totals_match_breakdown(self) -> "CostReport":
        if sum(s.macs for s in self.stages) != self.total_macs:
            raise ValueError("stage MACs do not sum to the total")
        if sum(s.params for s in self.stages) != self.params:
            raise ValueError("stage params do not sum to the total")
        return self


class AblationRow(BaseModel):
    """
    Result of one ablation mode; the deterministic part of the report.

    Attributes:
        mode: Architecture that was trained
        mean_ap: mAP on the held-out split
        per_class_ap: AP per class id (0 for classes absent from the report)
        initial_loss: First smoothed total loss
        final_loss: Last smoothed total loss
        parameters: Trainable parameter count
    """

    mode: str
    mean_ap: float = Field(..., ge=0.0, le=1.0)
    per_class_ap: Dict[int, float]
    initial_loss: float
    final_loss: float
    parameters: int = Field(..., ge=0)
    loss_curve: List[float] = Field(default_factory=list)


class AblationSummary(BaseModel):
    """Comparative report across ablation modes, including wall-clock."""

    seed: int
    iterations: int
    rows: List[AblationRow]
    wall_clock_seconds: Dict[str, float] = Field(default_factory=dict)
    small_object_class: int = 0
    small_object_single_map_ap: Optional[float] = None
    small_object_lffn_ap: Optional[float] = None
    small_object_lffn_at_least_single_map: Optional[bool] = None
