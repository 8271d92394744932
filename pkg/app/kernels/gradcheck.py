"""
Central finite-difference gradient checking.

Each entry of each checked tensor is perturbed in place by +/- step, the
scalar loss is re-evaluated, and the central difference is compared with the
analytic gradient. Each entry yields an absolute error |analytic - numeric| and
a relative error, the absolute error over max(|analytic|, |numeric|, floor).
An entry passes when either error is within its tolerance; gradients near
zero are judged on the absolute error and large ones on the relative error. Entries
where the forward and backward one-sided differences disagree by more than
``kink_tolerance`` sit on a non-differentiable point (a ReLU hinge crossed
within one step) and are skipped rather than failed.
"""

import logging
import math
from typing import Callable, Mapping, Optional

import torch

from app.schemas.reports import GradCheckReport, ParameterError

logger = logging.getLogger(__name__)


def grad_check(
    op_name: str,
    loss_fn: Callable[[], float],
    tensors: Mapping[str, torch.Tensor],
    analytic: Mapping[str, torch.Tensor],
    tolerance: float = 1e-6,
    step: float = 1e-5,
    floor: float = 1e-8,
    abs_tolerance: Optional[float] = None,
    kink_tolerance: float = 1e-3,
    max_entries: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> GradCheckReport:
    """
    Compare analytic gradients against central finite differences.

    Args:
        op_name: Name recorded in the report
        loss_fn: Recomputes the scalar loss from the current tensor values
        tensors: Tensors to perturb, keyed by name (modified in place, restored)
        analytic: Analytic gradient for every key of ``tensors``
        tolerance: Relative-error threshold
        step: Finite-difference step
        floor: Lower bound of the relative-error denominator
        abs_tolerance: Absolute-error threshold (defaults to ``tolerance``)
        kink_tolerance: One-sided disagreement treated as a kink
        max_entries: Check at most this many random entries per tensor
        generator: Source for the entry subsample

    Returns:
        GradCheckReport; non-finite values count as failures
    """
    if abs_tolerance is None:
        abs_tolerance = tolerance
    base = float(loss_fn())
    worst = worst_abs = 0.0
    failures = 0
    finite = math.isfinite(base)
    per_param = []

    for name, tensor in tensors.items():
        grad = analytic[name].reshape(-1)
        flat = tensor.view(-1)
        count = flat.numel()
        if max_entries is not None and count > max_entries:
            entries = torch.randperm(count, generator=generator)[:max_entries].tolist()
        else:
            entries = range(count)

        param_worst = param_abs = 0.0
        checked = skipped = 0
        for i in entries:
            original = float(flat[i])
            flat[i] = original + step
            plus = float(loss_fn())
            flat[i] = original - step
            minus = float(loss_fn())
            flat[i] = original

            numeric = (plus - minus) / (2.0 * step)
            value = float(grad[i])
            if not (math.isfinite(numeric) and math.isfinite(value)):
                finite = False
                param_worst = param_abs = math.inf
                continue

            one_sided_gap = abs((plus - base) - (base - minus)) / step
            if one_sided_gap > kink_tolerance * max(1.0, abs(numeric)):
                skipped += 1
                continue

            abs_error = abs(value - numeric)
            error = abs_error / max(abs(value), abs(numeric), floor)
            if error >= tolerance and abs_error >= abs_tolerance:
                failures += 1
            param_worst = max(param_worst, error)
            param_abs = max(param_abs, abs_error)
            checked += 1

        per_param.append(
            ParameterError(name=name, error=param_worst, abs_error=param_abs, checked=checked, skipped=skipped)
        )
        worst = max(worst, param_worst)
        worst_abs = max(worst_abs, param_abs)

    passed = finite and failures == 0
    level = logging.DEBUG if passed else logging.WARNING
    logger.log(
        level,
        f"grad_check {op_name}: max relative error {worst:.3e}, max absolute error {worst_abs:.3e}, "
        f"{failures} entries over tolerance",
    )
    return GradCheckReport(
        op_name=op_name,
        max_relative_error=worst,
        max_absolute_error=worst_abs,
        failed_entries=failures,
        parameter_errors=per_param,
        tolerance=tolerance,
        passed=passed,
    )
