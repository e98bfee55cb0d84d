"""Segmentation training losses: cross entropy, focal cross entropy, soft IoU.

All losses take ground truth y and predicted probabilities p as torch
tensors and return a scalar. Binary inputs share one shape (optionally with
a leading batch axis); multiclass inputs carry the class axis first after
the optional batch axis, i.e. (K, H, W) or (N, K, H, W) with y one-hot.

Soft confusion counts substitute probabilities for hard predictions:
TP = sum(y * p), FP = sum((1 - y) * p), FN = sum(y * (1 - p)). IoU losses
pool these per tile and average the per-tile losses over the batch. A class
with zero denominator (absent from truth and prediction) counts as IoU 1,
i.e. a vacuously correct classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PROB_EPS = 1e-7
DEFAULT_GAMMA = 2.0
DEFAULT_CLASS_WEIGHTS = (0.2, 1.4, 1.4)


@dataclass(frozen=True)
class LossSpec:
    """Which loss to train with: kind in {ce, fce, iou}, mode binary/multiclass."""

    kind: str
    mode: str
    gamma: float = DEFAULT_GAMMA
    class_weights: tuple = DEFAULT_CLASS_WEIGHTS
    n_classes: int = 3

    def __post_init__(self):
        if self.kind not in ("ce", "fce", "iou"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.mode not in ("binary", "multiclass"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.mode == "multiclass" and len(self.class_weights) != self.n_classes:
            raise ValueError(
                f"{len(self.class_weights)} class weights for {self.n_classes} classes"
            )


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _check_shapes(y: torch.Tensor, p: torch.Tensor) -> None:
    if y.shape != p.shape:
        raise ValueError(f"shape mismatch: truth {tuple(y.shape)} vs "
                         f"prediction {tuple(p.shape)}")


def cross_entropy(y: torch.Tensor, p: torch.Tensor, mode: str) -> torch.Tensor:
    """Pixel-mean cross entropy.

    binary:     mean(-y log p - (1-y) log(1-p))
    multiclass: mean over pixels of -sum_k y_k log p_k
    """
    _check_shapes(y, p)
    p = _clamp(p)
    if mode == "binary":
        return (-y * torch.log(p) - (1.0 - y) * torch.log1p(-p)).mean()
    per_pixel = -(y * torch.log(p)).sum(dim=-3)
    return per_pixel.mean()


def focal_cross_entropy(y: torch.Tensor, p: torch.Tensor, gamma: float,
                        mode: str) -> torch.Tensor:
    """Cross entropy down-weighted by (1 - p)^gamma on the true class.

    gamma = 0 reduces exactly to cross_entropy.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    _check_shapes(y, p)
    p = _clamp(p)
    if mode == "binary":
        pos = -y * (1.0 - p) ** gamma * torch.log(p)
        neg = -(1.0 - y) * p ** gamma * torch.log1p(-p)
        return (pos + neg).mean()
    per_pixel = -(y * (1.0 - p) ** gamma * torch.log(p)).sum(dim=-3)
    return per_pixel.mean()


def _soft_counts(y: torch.Tensor, p: torch.Tensor, reduce_dims) -> tuple:
    tp = (y * p).sum(dim=reduce_dims)
    fp = ((1.0 - y) * p).sum(dim=reduce_dims)
    fn = (y * (1.0 - p)).sum(dim=reduce_dims)
    return tp, fp, fn


def iou_loss_binary(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """1 - TP/(TP+FP+FN) with soft counts pooled per tile, batch-averaged.

    A tile whose denominator is zero (no wear in truth or prediction) scores
    loss 0, mirroring the multiclass absent-class rule.
    """
    _check_shapes(y, p)
    if y.dim() <= 2:
        y, p = y.reshape(1, -1), p.reshape(1, -1)
    else:
        y, p = y.reshape(y.shape[0], -1), p.reshape(p.shape[0], -1)
    tp, fp, fn = _soft_counts(y, p, reduce_dims=1)
    denom = tp + fp + fn
    iou = torch.where(denom > 0, tp / torch.where(denom > 0, denom, denom + 1.0),
                      torch.ones_like(tp))
    return (1.0 - iou).mean()


def iou_loss_multiclass(y: torch.Tensor, p: torch.Tensor,
                        weights=DEFAULT_CLASS_WEIGHTS) -> torch.Tensor:
    """1 - (1/K) sum_k w_k IoU_k with per-class soft counts, batch-averaged.

    y is one-hot with the class axis ahead of the spatial axes. A class
    absent from both truth and prediction contributes IoU_k = 1.
    """
    _check_shapes(y, p)
    if y.dim() == 3:
        y, p = y.unsqueeze(0), p.unsqueeze(0)
    k = y.shape[1]
    if len(weights) != k:
        raise ValueError(f"{len(weights)} weights for {k} classes")
    w = torch.as_tensor(weights, dtype=p.dtype, device=p.device)
    yk = y.reshape(y.shape[0], k, -1)
    pk = p.reshape(p.shape[0], k, -1)
    tp, fp, fn = _soft_counts(yk, pk, reduce_dims=2)
    denom = tp + fp + fn
    iou = torch.where(denom > 0, tp / torch.where(denom > 0, denom, denom + 1.0),
                      torch.ones_like(tp))
    per_tile = 1.0 - (iou * w).sum(dim=1) / k
    return per_tile.mean()


def make_loss(spec: LossSpec):
    """Loss callable (y, p) -> scalar for an experiment configuration."""
    if spec.kind == "ce":
        return lambda y, p: cross_entropy(y, p, spec.mode)
    if spec.kind == "fce":
        return lambda y, p: focal_cross_entropy(y, p, spec.gamma, spec.mode)
    if spec.mode == "binary":
        return iou_loss_binary
    return lambda y, p: iou_loss_multiclass(y, p, spec.class_weights)
