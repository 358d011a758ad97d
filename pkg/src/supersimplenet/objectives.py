"""Truncated L1 and focal losses, their combination, and gradient clipping."""
from __future__ import annotations

from typing import Iterable, Optional

import torch
import torch.nn.functional as F

from .config import LossConfig


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def truncated_l1(seg_logits: torch.Tensor, m: torch.Tensor, th: float = 0.5) -> torch.Tensor:
    """Hinge on the logit: ``max(0, th - x)`` on anomalous cells, ``max(0, th + x)`` elsewhere."""
    _check_shapes(seg_logits, m)
    m = m.to(seg_logits.dtype)
    cell = m * F.relu(th - seg_logits) + (1 - m) * F.relu(th + seg_logits)
    return cell.mean()


def focal(pred_logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
          alpha: Optional[float] = None) -> torch.Tensor:
    """Sigmoid focal loss, mean-reduced. ``alpha=None`` disables class weighting."""
    _check_shapes(pred_logits, targets)
    t = targets.to(pred_logits.dtype)
    ce = F.binary_cross_entropy_with_logits(pred_logits, t, reduction="none")
    p = torch.sigmoid(pred_logits)
    p_t = p * t + (1 - p) * (1 - t)
    loss = ce if gamma == 0 else ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = (alpha * t + (1 - alpha) * (1 - t)) * loss
    return loss.mean()


def total_loss(seg_logits: torch.Tensor, m: torch.Tensor, score: Optional[torch.Tensor],
               y: torch.Tensor, cfg: LossConfig):
    """Return ``(L, L_seg, L_cls)``.

    ``seg_logits`` may be ``[B, 1, H, W]`` with ``m`` as ``[B, H, W]``. When the
    classification head is disabled pass ``score=None``; ``L_cls`` is then zero.
    """
    if seg_logits.dim() == m.dim() + 1:
        seg_logits = seg_logits.squeeze(1)
    l_seg = truncated_l1(seg_logits, m, cfg.th)
    if cfg.seg_focal:
        l_seg = l_seg + focal(seg_logits, m, cfg.focal_gamma, cfg.focal_alpha)
    if score is None:
        l_cls = torch.zeros((), dtype=l_seg.dtype, device=l_seg.device)
    else:
        l_cls = focal(score, y, cfg.focal_gamma, cfg.focal_alpha)
    return l_seg + l_cls, l_seg, l_cls


def global_grad_norm(parameters: Iterable[torch.nn.Parameter]) -> float:
    grads = [p.grad.detach() for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))


def clip_gradients(parameters: Iterable[torch.nn.Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))
