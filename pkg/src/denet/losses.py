"""Training objective: weighted edge BCE plus mask soft-IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from denet import ops
from denet.tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


def _check(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over all pixels, probabilities clamped first."""
    target = ops.as_tensor(target, pred)
    _check(pred, target, "bce_loss")
    p = ops.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target.data
    ll = target * ops.log(p) + Tensor(1.0 - y) * ops.log(1.0 - p)
    return ops.neg(ops.mean(ll))


def soft_iou_loss(pred: Tensor, target, eps: float = 1e-6, per_sample: bool = False) -> Tensor:
    """``1 - (sum(y p) + eps) / (sum(y) + sum(p) - sum(y p) + eps)``.

    With ``per_sample`` the ratio is formed per leading index of an
    ``N x 1 x H x W`` batch and the losses are averaged.
    """
    target = ops.as_tensor(target, pred)
    _check(pred, target, "soft_iou_loss")
    axis = tuple(range(1, pred.ndim)) if per_sample else None
    inter = ops.sum(pred * target, axis=axis)
    union = ops.sum(target, axis=axis) + ops.sum(pred, axis=axis) - inter
    ratio = (inter + eps) / (union + eps)
    return 1.0 - ops.mean(ratio)


def loss_terms(edge_pred: Tensor, edge_gt, mask_pred: Tensor, mask_gt, w: LossWeights,
               per_sample: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """(total, edge BCE, mask soft-IoU)."""
    edge = bce_loss(edge_pred, edge_gt)
    mask = soft_iou_loss(mask_pred, mask_gt, w.epsilon, per_sample=per_sample)
    return ops.scale(edge, w.alpha) + ops.scale(mask, w.beta), edge, mask


def total_loss(edge_pred: Tensor, edge_gt, mask_pred: Tensor, mask_gt, w: LossWeights) -> Tensor:
    return loss_terms(edge_pred, edge_gt, mask_pred, mask_gt, w)[0]


_SQUARE = np.ones((3, 3), dtype=bool)


def edge_gt_from_mask(mask: np.ndarray) -> np.ndarray:
    """Inner morphological gradient: mask pixels removed by a 3x3 erosion."""
    arr = np.asarray(mask)
    m = (arr > 0).reshape(arr.shape[-2:])
    eroded = ndimage.binary_erosion(m, structure=_SQUARE, border_value=0)
    return (m & ~eroded).reshape(arr.shape).astype(arr.dtype)
