"""Elementwise activations and softmax with explicit backward passes."""

import torch


def relu(t: torch.Tensor) -> torch.Tensor:
    return torch.clamp(t, min=0)


def relu_backward(t: torch.Tensor, upstream_grad: torch.Tensor) -> torch.Tensor:
    """Gradient of relu at the forward input ``t`` (0 at t == 0)."""
    return upstream_grad * (t > 0).to(upstream_grad.dtype)


def sigmoid(t: torch.Tensor) -> torch.Tensor:
    """1 / (1 + e^-x), computed without overflow for large |x|."""
    return torch.sigmoid(t)


def sigmoid_backward(output: torch.Tensor, upstream_grad: torch.Tensor) -> torch.Tensor:
    """Gradient through sigmoid given its forward *output* s: s (1 - s)."""
    return upstream_grad * output * (1.0 - output)


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = logits - logits.max(dim=dim, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=dim, keepdim=True)
