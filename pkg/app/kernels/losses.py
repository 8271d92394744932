"""Classification and localization losses returning (loss, gradient)."""

from typing import Tuple, Union

import torch

from app.core.errors import DimensionError, LabelIndexError
from app.kernels.activations import softmax


def softmax_cross_entropy(
    logits: torch.Tensor, label: Union[int, torch.Tensor]
) -> Tuple[float, torch.Tensor]:
    """
    Softmax cross-entropy.

    Args:
        logits: (K,) scores for one sample, or (M, K) for a batch
        label: Class index, or (M,) indices for a batch

    Returns:
        Loss (mean over the batch) and its gradient with respect to logits

    Raises:
        LabelIndexError: If a label lies outside [0, K)
    """
    single = logits.dim() == 1
    rows = logits.unsqueeze(0) if single else logits
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    m, k = rows.shape
    if labels.numel() != m:
        raise DimensionError(f"softmax_cross_entropy: {labels.numel()} labels for {m} rows")
    if m and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise LabelIndexError(f"label out of range [0, {k}): {labels.tolist()}")

    shifted = rows - rows.max(dim=1, keepdim=True).values
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels.unsqueeze(1)).squeeze(1)
    loss = float((log_norm - picked).mean()) if m else 0.0

    grad = softmax(rows, dim=1)
    grad[torch.arange(m), labels] -= 1.0
    grad = grad / max(m, 1)
    return loss, grad.squeeze(0) if single else grad


def smooth_l1(
    pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0
) -> Tuple[float, torch.Tensor]:
    """
    Summed smooth-L1: 0.5 x^2 / beta where |x| < beta, else |x| - 0.5 beta.

    With beta = 1 this is the usual 0.5 x^2 / |x| - 0.5 piecewise form.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: shapes {tuple(pred.shape)} and {tuple(target.shape)} differ")
    diff = pred - target
    absolute = diff.abs()
    small = absolute < beta
    per_element = torch.where(small, 0.5 * diff * diff / beta, absolute - 0.5 * beta)
    grad = torch.where(small, diff / beta, torch.sign(diff))
    return float(per_element.sum()), grad
