"""Supervised detection objective on source images: focal + IoU + centerness BCE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .assignment import BACKGROUND

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    reg: torch.Tensor
    ctr: torch.Tensor
    total: torch.Tensor

    @classmethod
    def from_parts(cls, cls_loss, reg_loss, ctr_loss) -> "LossBreakdown":
        return cls(cls_loss, reg_loss, ctr_loss, cls_loss + reg_loss + ctr_loss)

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("cls", "reg", "ctr", "total")}


def _check_finite(x: torch.Tensor, what: str):
    if not torch.isfinite(x).all():
        raise ValueError(f"non-finite values in {what}")


def focal_loss_sum(cls_logits, cls_target, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Unnormalized focal loss summed over all locations and class channels."""
    _check_finite(cls_logits, "classification logits")
    num_classes = cls_logits.shape[-1]
    fg = cls_target != BACKGROUND
    onehot = F.one_hot(torch.where(fg, cls_target, 0), num_classes).to(cls_logits.dtype)
    onehot = onehot * fg.unsqueeze(-1).to(cls_logits.dtype)
    log_pt = onehot * F.logsigmoid(cls_logits) + (1 - onehot) * F.logsigmoid(-cls_logits)
    p = torch.sigmoid(cls_logits)
    pt = onehot * p + (1 - onehot) * (1 - p)
    return (-alpha * (1 - pt).pow(gamma) * log_pt).sum()


def focal_loss(cls_logits, cls_target, n_pos: int, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Sigmoid focal loss over ``(..., C)`` logits, divided by ``max(n_pos, 1)``.

    ``cls_target`` holds a class index per location or ``BACKGROUND``. The
    focal factor ``alpha`` weights every binary term uniformly, so ``gamma=0,
    alpha=1`` is plain per-class sigmoid BCE.
    """
    return focal_loss_sum(cls_logits, cls_target, gamma, alpha) / max(int(n_pos), 1)


def _ltrb_iou(pred, target):
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    w_int = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    h_int = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = w_int * h_int
    return inter / (area_p + area_t - inter)


def iou_loss_terms(pred, target, pos_mask):
    """Per-positive ``-ln IoU`` for offsets sharing their anchor point."""
    if pred.shape != target.shape or pred.shape[:-1] != pos_mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)}, {tuple(target.shape)}, {tuple(pos_mask.shape)}")
    return -torch.log(_ltrb_iou(pred[pos_mask], target[pos_mask]))


def iou_loss(pred, target, pos_mask, ctr_weights: Optional[torch.Tensor] = None):
    terms = iou_loss_terms(pred, target, pos_mask)
    if terms.numel() == 0:
        return pred.sum() * 0.0
    if ctr_weights is None:
        return terms.mean()
    w = ctr_weights[pos_mask]
    return (terms * w).sum() / w.sum().clamp_min(1e-12)


def centerness_loss(ctr_logits, ctr_target, pos_mask):
    if ctr_logits.shape != ctr_target.shape or ctr_logits.shape != pos_mask.shape:
        raise ValueError("shape mismatch between centerness logits, targets and mask")
    if not pos_mask.any():
        return ctr_logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(ctr_logits[pos_mask], ctr_target[pos_mask])


def detection_loss(
    outputs: Sequence,
    targets: Sequence,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
    centerness_weighted_iou: bool = False,
) -> LossBreakdown:
    """Sum of the three detection losses across pyramid levels.

    ``outputs`` are per-level head outputs (``cls_logits``, ``ctr_logits``,
    ``reg``), ``targets`` per-level batched targets as tensors. All three
    terms are normalized by the positive count over every level and image.
    """
    if len(outputs) != len(targets):
        raise ValueError(f"{len(outputs)} output levels vs {len(targets)} target levels")
    n_pos = int(sum(int(t.pos_mask.sum()) for t in targets))
    norm = max(n_pos, 1)

    cls_sum = sum(focal_loss_sum(o.cls_logits, t.cls_target, gamma, alpha) for o, t in zip(outputs, targets))
    cls_loss = cls_sum / norm

    iou_terms, weights, ctr_logits, ctr_targets = [], [], [], []
    for o, t in zip(outputs, targets):
        iou_terms.append(iou_loss_terms(o.reg, t.reg_target, t.pos_mask))
        weights.append(t.ctr_target[t.pos_mask])
        ctr_logits.append(o.ctr_logits[t.pos_mask])
        ctr_targets.append(t.ctr_target[t.pos_mask])
    iou_terms = torch.cat(iou_terms)
    if n_pos == 0:
        zero = cls_loss * 0.0
        return LossBreakdown.from_parts(cls_loss, zero, zero)
    if centerness_weighted_iou:
        w = torch.cat(weights)
        reg_loss = (iou_terms * w).sum() / w.sum().clamp_min(1e-12)
    else:
        reg_loss = iou_terms.sum() / norm
    ctr_loss = F.binary_cross_entropy_with_logits(
        torch.cat(ctr_logits), torch.cat(ctr_targets), reduction="sum"
    ) / norm
    return LossBreakdown.from_parts(cls_loss, reg_loss, ctr_loss)
