"""Training objective: token cross-entropy plus a weighted BCE + DICE mask loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatchError, Tensor

DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_txt: float = 1.0
    lambda_mask: float = 1.0
    lambda_bce: float = 1.0
    lambda_dice: float = 0.2

    def __post_init__(self):
        for name in ("lambda_txt", "lambda_mask", "lambda_bce", "lambda_dice"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def text_loss(logits: Tensor, target) -> Tensor:
    """Mean over slots (and batch) of -log softmax(logits)[target].

    logits: [out_len, vocab] or [batch, out_len, vocab]; target: matching ids.
    """
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeMismatchError(f"target shape {tgt.shape} does not match logits {logits.shape[:-1]}")
    vocab = logits.shape[-1]
    if (tgt >= vocab).any() or (tgt < 0).any():
        raise ValueError(f"target ids must lie in [0, {vocab})")
    logp = ag.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
    picked = (logp * Tensor(onehot)).sum(axis=-1)
    return -picked.mean()


def bce_with_logits(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Pixel-mean sigmoid cross-entropy: softplus(x) - g*x."""
    g = Tensor(np.asarray(gt, dtype=logits.dtype))
    return (ag.softplus(logits) - logits * g).mean()


def dice_loss(logits: Tensor, gt: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps), per image, batch-averaged."""
    g = np.asarray(gt, dtype=logits.dtype)
    p = ag.sigmoid(logits)
    axes = (-2, -1)
    inter = (p * Tensor(g)).sum(axis=axes)
    denom = p.sum(axis=axes) + Tensor(g.sum(axis=axes)) + eps
    return (1.0 - (inter * 2.0 + eps) / denom).mean()


def mask_loss(logits, gt, weights: LossWeights = LossWeights()) -> Tensor:
    """lambda_bce * BCE + lambda_dice * DICE on [h, w] or [batch, h, w] logits."""
    if hasattr(logits, "logits"):
        logits = logits.logits
    gt = np.asarray(gt)
    if gt.shape != logits.shape:
        raise ShapeMismatchError(f"mask logits {logits.shape} and ground truth {gt.shape} differ")
    return bce_with_logits(logits, gt) * weights.lambda_bce + dice_loss(logits, gt) * weights.lambda_dice


def total_loss(text, mask, weights: LossWeights = LossWeights()):
    """lambda_txt * text + lambda_mask * mask."""
    return text * weights.lambda_txt + mask * weights.lambda_mask
