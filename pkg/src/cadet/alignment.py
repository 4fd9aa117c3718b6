"""Adversarial feature alignment: gradient reversal, global and center-aware domain losses."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F

SOURCE = 1
TARGET = 0

DELTA = 20.0
GRL_GLOBAL = 0.01
GRL_CENTER = 0.02


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * -ctx.lam, None


def grl(x: torch.Tensor, lam: float) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ValueError(f"GRL weight must be >= 0, got {lam}")
    return _GradReverse.apply(x, float(lam))


def center_aware_map(cls_logits: torch.Tensor, ctr_logits: torch.Tensor, delta: float = DELTA) -> torch.Tensor:
    """sigmoid(delta * max_c sigmoid(cls) * sigmoid(ctr)); cls is ``(..., C)``, ctr is ``(...)``."""
    if cls_logits.shape[-1] == 0:
        raise ValueError("need at least one class channel")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    objectness = torch.sigmoid(cls_logits).amax(dim=-1)
    return torch.sigmoid(delta * objectness * torch.sigmoid(ctr_logits))


def domain_bce_map(d_logits: torch.Tensor, z: int) -> torch.Tensor:
    """Per-location domain BCE averaged over every location (and image) in ``d_logits``."""
    if z not in (SOURCE, TARGET):
        raise ValueError(f"domain label must be 0 or 1, got {z}")
    if not torch.isfinite(d_logits).all():
        raise ValueError("non-finite discriminator logits")
    return F.binary_cross_entropy_with_logits(d_logits, torch.full_like(d_logits, float(z)))


Discriminator = Callable[[torch.Tensor], torch.Tensor]


def global_alignment_loss(f_s, f_t, disc: Discriminator, lam: float = GRL_GLOBAL) -> torch.Tensor:
    """Domain loss on whole feature maps, with features passed through the GRL first."""
    return domain_bce_map(disc(grl(f_s, lam)), SOURCE) + domain_bce_map(disc(grl(f_t, lam)), TARGET)


def center_aware_loss(
    f_s, f_t, m_s, m_t, disc: Discriminator, lam: float = GRL_CENTER, detach_map: bool = True
) -> torch.Tensor:
    """Domain loss on features weighted by the center-aware maps.

    Features are ``(N, K, H, W)``; maps are ``(N, H, W)`` and get broadcast
    over the K channels. With ``detach_map`` the maps are constants, so the
    reversed gradient reaches only the feature extractor.
    """
    if m_s.shape[-2:] != f_s.shape[-2:] or m_t.shape[-2:] != f_t.shape[-2:]:
        raise ValueError(f"map {tuple(m_s.shape)} does not match features {tuple(f_s.shape)}")
    if detach_map:
        m_s, m_t = m_s.detach(), m_t.detach()
    ws = m_s.unsqueeze(-3) * f_s
    wt = m_t.unsqueeze(-3) * f_t
    return domain_bce_map(disc(grl(ws, lam)), SOURCE) + domain_bce_map(disc(grl(wt, lam)), TARGET)


def overall_objective(det, l_ga_per_level: Sequence, l_ca_per_level: Sequence, alpha: float, beta: float):
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be non-negative")
    total = det.total if hasattr(det, "total") else det
    return total + alpha * sum(l_ga_per_level) + beta * sum(l_ca_per_level)
