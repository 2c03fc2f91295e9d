"""Losses (cross-entropy, KL, their combination) and segmentation metrics.

Loss functions operate on torch tensors and stay differentiable; metric
functions operate on binary rasters and plain counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import Mask2D

DETERMINISTIC_KINDS = ("unet", "transunet")
PROBABILISTIC_KINDS = ("prob-unet", "prob-transunet")
MODEL_KINDS = DETERMINISTIC_KINDS + PROBABILISTIC_KINDS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    kl: float
    beta: float
    total: float


def cross_entropy(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy from logits (numerically stable)."""
    if logits.shape != mask.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != mask shape {tuple(mask.shape)}")
    return F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype), reduction="mean")


def kl_divergence(posterior, prior) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over latent dims.

    Inputs carry (batch, latent_dim) mean/log_var tensors; the result is
    averaged over the batch. Non-negative up to float rounding.
    """
    if posterior.mean.shape != prior.mean.shape:
        raise ValueError(
            f"dimension mismatch: posterior {tuple(posterior.mean.shape)} vs prior {tuple(prior.mean.shape)}"
        )
    lv_q, lv_p = posterior.log_var, prior.log_var
    mu_q, mu_p = posterior.mean, prior.mean
    per_item = 0.5 * (
        torch.exp(lv_q - lv_p) + (mu_p - mu_q) ** 2 / torch.exp(lv_p) - 1.0 + lv_p - lv_q
    ).sum(dim=-1)
    return per_item.mean()


def total_loss(ce, kl, beta: float, kind: str) -> LossBreakdown:
    """Compose the training loss: CE for deterministic kinds, CE + beta*KL
    for probabilistic ones (KL recorded as 0 when unused)."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    ce_f = float(ce)
    if kind in DETERMINISTIC_KINDS:
        return LossBreakdown(ce=ce_f, kl=0.0, beta=beta, total=ce_f)
    kl_f = float(kl)
    return LossBreakdown(ce=ce_f, kl=kl_f, beta=beta, total=ce_f + beta * kl_f)


def binarize(logits: np.ndarray, threshold: float = 0.5) -> Mask2D:
    """Pixel = 1 iff sigmoid(logit) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    x = np.asarray(logits, dtype=np.float64)
    prob = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    return Mask2D(values=(prob >= threshold).astype(np.uint8))


def confusion(pred: Mask2D, truth: Mask2D) -> ConfusionCounts:
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValueError(
            f"shape mismatch: pred {pred.height}x{pred.width} vs truth {truth.height}x{truth.width}"
        )
    p = pred.values.astype(bool)
    t = truth.values.astype(bool)
    return ConfusionCounts(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
        tn=int((~p & ~t).sum()),
    )


def dsc(counts: ConfusionCounts) -> float:
    """Dice similarity 2*TP / (2*TP + FP + FN); both-empty pairs score 1.0."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


__all__ = [
    "DETERMINISTIC_KINDS",
    "PROBABILISTIC_KINDS",
    "MODEL_KINDS",
    "ConfusionCounts",
    "LossBreakdown",
    "cross_entropy",
    "kl_divergence",
    "total_loss",
    "binarize",
    "confusion",
    "dsc",
]
