"""Dice plus cross-entropy, applied to the final head and each side-output head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor


def _check(probs: Tensor, target: np.ndarray):
    if probs.shape != target.shape:
        raise DimensionError(f"probs {probs.shape} vs target {target.shape}")
    p = probs.data
    if np.any(p < -1e-12) or np.any(p > 1 + 1e-12) or not np.allclose(p.sum(axis=0), 1.0, atol=1e-6):
        raise ContractError("probabilities are not a per-voxel simplex")
    if not np.all((target == 0) | (target == 1)) or not np.all(target.sum(axis=0) == 1):
        raise ContractError("target is not one-hot")


def dice_loss(probs: Tensor, target, eps: float = 1e-5) -> Tensor:
    """Soft Dice over foreground classes; class axis first, ``(N, ...)``."""
    target = np.asarray(target, dtype=np.float64)
    _check(probs, target)
    N = probs.shape[0]
    p = T.reshape(probs, (N, -1))
    t = target.reshape(N, -1)
    inter = T.reduce_sum(p * t, axis=1)
    denom = T.reduce_sum(p, axis=1) + (t.sum(axis=1) + eps)
    per_class = (inter * 2.0 + eps) / denom
    fg = np.r_[0.0, np.full(N - 1, 1.0 / (N - 1))]
    return 1.0 - T.reduce_sum(per_class * fg)


def ce_loss(probs: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Mean over voxels of ``-sum_c t log(p + eps)``."""
    target = np.asarray(target, dtype=np.float64)
    _check(probs, target)
    voxels = target[0].size
    return T.scale(T.reduce_sum(T.log(probs + eps) * target), -1.0 / voxels)


def one_hot(labels, num_classes: int) -> np.ndarray:
    """``(..., H, W, S)`` class indices -> ``(..., N, H, W, S)`` one-hot."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ContractError("label out of range")
    oh = np.eye(num_classes)[labels]
    return np.moveaxis(oh, -1, -4)


def downsample_labels(labels, factor: int) -> np.ndarray:
    """Nearest-neighbour sub-sampling of the last three axes."""
    if factor == 1:
        return np.asarray(labels)
    o = factor // 2
    return np.asarray(labels)[..., o::factor, o::factor, o::factor]


@dataclass
class LossReport:
    total: Tensor
    dice: Tensor
    cross_entropy: Tensor
    per_head: list = field(default_factory=list)  # [(head id, weighted total as float)]

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "dice": self.dice.item(),
                "cross_entropy": self.cross_entropy.item()}


def head_loss(probs: Tensor, labels, dice_eps: float = 1e-5, ce_eps: float = 1e-12):
    """Batch-averaged Dice and cross-entropy of ``(B, N, H, W, S)`` probabilities."""
    labels = np.asarray(labels)
    B, N = probs.shape[:2]
    if labels.shape != (B,) + probs.shape[2:]:
        raise DimensionError(f"labels {labels.shape} do not match head {probs.shape}")
    target = one_hot(labels, N)
    dice = ce = None
    for b in range(B):
        pb = T.select(probs, b)
        d, c = dice_loss(pb, target[b], dice_eps), ce_loss(pb, target[b], ce_eps)
        dice = d if dice is None else dice + d
        ce = c if ce is None else ce + c
    return T.scale(dice, 1.0 / B), T.scale(ce, 1.0 / B)


def total_loss(outputs, labels, side_weight: float = 0.5) -> LossReport:
    """Final-head Dice + CE plus ``side_weight`` times each side head's."""
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    heads = [("final", 1.0, outputs.probs, labels)]
    for level, probs in outputs.side_outputs:
        heads.append((f"side{level}", side_weight, probs, downsample_labels(labels, 2 ** level)))
    dice = ce = None
    per_head = []
    for name, w, probs, lab in heads:
        d, c = head_loss(probs, lab)
        d, c = T.scale(d, w), T.scale(c, w)
        per_head.append((name, d.item() + c.item()))
        dice = d if dice is None else dice + d
        ce = c if ce is None else ce + c
    return LossReport(total=dice + ce, dice=dice, cross_entropy=ce, per_head=per_head)
