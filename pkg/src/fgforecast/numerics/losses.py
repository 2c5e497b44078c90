from __future__ import annotations

from .tensor import Tensor, as_tensor, mean, square, sub


def mse_loss(pred: Tensor, truth) -> Tensor:
    truth = as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {truth.shape}")
    return mean(square(sub(truth, pred)))
