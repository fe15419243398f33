"""Training objectives for every network branch.

All functions take and return torch tensors and are differentiable in their
prediction arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

PROB_EPS = 1e-6
IOU_EPS = 1e-6


@dataclass
class HeatLossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    epsilon_prime: int = 100
    gamma: float = 1e-4
    mode: str = "scheduled"  # scheduled | focal_only | mse_only
    lambda_form: str = "repaired"  # repaired | literal

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.epsilon_prime < 1:
            raise ValueError("epsilon_prime must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.mode not in ("scheduled", "focal_only", "mse_only"):
            raise ValueError(f"unknown heat loss mode {self.mode!r}")
        if self.lambda_form not in ("repaired", "literal"):
            raise ValueError(f"unknown lambda form {self.lambda_form!r}")


class DegenerateTargetError(ValueError):
    pass


def heat_probabilities(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


def variant_focal(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """CornerNet-style focal loss on heatmap probabilities, normalised by the number of peaks."""
    pos = gt >= 1.0
    n = int(pos.sum())
    if n == 0:
        raise DegenerateTargetError("focal loss needs at least one ground-truth centroid")
    pos_term = (1 - pred) ** alpha * torch.log(pred)
    neg_term = (1 - gt) ** beta * pred**alpha * torch.log(1 - pred)
    return -torch.where(pos, pos_term, neg_term).sum() / n


def mse_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return ((pred - gt) ** 2).mean()


def lambda_scale(epoch: float, cfg: HeatLossConfig) -> float:
    """Focal-loss scale during the MSE-to-focal ramp.

    ``literal`` evaluates the printed constant, which simplifies to 1.
    ``repaired`` makes it an epoch ramp from ``gamma`` at epoch 1 to 1 at ``epsilon_prime``.
    """
    ep, g = cfg.epsilon_prime, cfg.gamma
    if ep == 1:
        return 1.0
    if cfg.lambda_form == "literal":
        return (1 - g) / (ep - 1) * ep + (g * ep - 1) / (ep - 1)
    return ((1 - g) * epoch + g * ep - 1) / (ep - 1)


def heat_weights(epoch: float, cfg: HeatLossConfig) -> tuple[float, float]:
    """Mixing weights ``(a, b)`` for focal and MSE terms at ``epoch``."""
    if cfg.mode == "focal_only":
        return 1.0, 0.0
    if cfg.mode == "mse_only":
        return 0.0, 1.0
    ep = cfg.epsilon_prime
    if epoch <= 0:
        return 0.0, 1.0
    if epoch >= ep:
        return 1.0, 0.0
    return epoch / ep * lambda_scale(epoch, cfg), (ep - epoch) / ep


def heatmap_loss(logits: torch.Tensor, gt: torch.Tensor, epoch: float, cfg: HeatLossConfig) -> torch.Tensor:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    p = heat_probabilities(logits)
    a, b = heat_weights(epoch, cfg)
    loss = logits.new_zeros(())
    if a:
        loss = loss + a * variant_focal(p, gt, cfg.alpha, cfg.beta)
    if b:
        loss = loss + b * mse_loss(p, gt)
    return loss


def offset_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Summed smooth-L1 over ``(N, 3)`` offsets sampled at the true centroid voxels."""
    if pred.numel() == 0:
        return pred.sum()
    return F.smooth_l1_loss(pred, gt, reduction="sum", beta=1.0)


def box_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise IoU of ``(N, 6)`` boxes laid out ``[x0, x1, y0, y1, z0, z1]``."""
    lo = torch.maximum(a[:, 0::2], b[:, 0::2])
    hi = torch.minimum(a[:, 1::2], b[:, 1::2])
    inter = (hi - lo).clamp(min=0).prod(dim=1)
    va = (a[:, 1::2] - a[:, 0::2]).prod(dim=1)
    vb = (b[:, 1::2] - b[:, 0::2]).prod(dim=1)
    return inter / (va + vb - inter)


def boxes_from_sizes(centroids: torch.Tensor, sizes: torch.Tensor) -> torch.Tensor:
    """``(N, 3)`` centroids and ``(N, 6)`` sizes ``[l, r, p, a, i, s]`` to ``(N, 6)`` boxes."""
    lo = centroids - sizes[:, 0::2]
    hi = centroids + sizes[:, 1::2]
    return torch.stack([lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1], lo[:, 2], hi[:, 2]], dim=1)


def bbox_loss(pred_sizes: torch.Tensor, gt_boxes: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Mean ``-log IoU`` with the IoU clamped to ``[1e-6, 1]``."""
    if pred_sizes.numel() == 0:
        return pred_sizes.sum()
    iou = box_iou_tensor(boxes_from_sizes(centroids, pred_sizes), gt_boxes)
    return -torch.log(iou.clamp(IOU_EPS, 1.0)).mean()


def class_loss(logits: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, active.to(logits.dtype))


def seg_loss(mask_logits: torch.Tensor, gt_masks: torch.Tensor) -> torch.Tensor:
    """Mean voxel BCE over all detections; ``gt_masks`` already binarised."""
    if mask_logits.numel() == 0:
        return mask_logits.sum()
    return F.binary_cross_entropy_with_logits(mask_logits, gt_masks.to(mask_logits.dtype))


def dist_loss(pred: torch.Tensor, gt: torch.Tensor, active: torch.Tensor, heatmap_shape,
              form: str = "residual") -> torch.Tensor:
    """Spacing error between adjacent active levels, normalised by the heatmap diagonal.

    ``pred``/``gt`` are ``(C, 3)`` downsampled coordinates; rows of inactive
    levels are ignored. ``form="raw"`` uses the predicted spacing alone.
    """
    active = active.bool()
    pairs = (active[:-1] & active[1:]).nonzero().flatten()
    if pairs.numel() == 0:
        return pred.sum() * 0.0
    norm = math.sqrt(sum(float(s) ** 2 for s in heatmap_shape))
    d_pred = torch.linalg.vector_norm(pred[pairs] - pred[pairs + 1], dim=1)
    if form == "raw":
        return (d_pred / norm).mean()
    d_gt = torch.linalg.vector_norm(gt[pairs] - gt[pairs + 1], dim=1)
    return ((d_pred - d_gt).abs() / norm).mean()


def total_loss(terms: Mapping[str, torch.Tensor], enabled: Mapping[str, bool] | None = None,
               weights: Mapping[str, float] | None = None) -> torch.Tensor:
    """Sum of the enabled loss terms; disabled or missing terms contribute nothing."""
    enabled = enabled or {}
    weights = weights or {}
    out = None
    for name, value in terms.items():
        if not enabled.get(name, True):
            continue
        v = weights.get(name, 1.0) * value
        out = v if out is None else out + v
    return out if out is not None else torch.zeros(())
