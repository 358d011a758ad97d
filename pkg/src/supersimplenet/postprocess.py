"""Anomaly-map post-processing: bilinear upsampling followed by Gaussian smoothing."""
from __future__ import annotations

import math
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

SIGMA = 4.0


def gaussian_kernel1d(sigma: float, radius: int) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_index(n: int, pad: int) -> torch.Tensor:
    # half-sample symmetric reflection (d c b a | a b c d | d c b a), any pad size
    idx = np.arange(-pad, n + pad)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    return torch.from_numpy(idx)


def gaussian_blur(maps: torch.Tensor, sigma: float = SIGMA) -> torch.Tensor:
    """Separable Gaussian filter over the last two dims, kernel radius ceil(4*sigma).

    Borders use symmetric reflection, so the filter preserves constants and total mass.
    """
    if sigma <= 0:
        return maps
    radius = int(math.ceil(4 * sigma))
    kernel = gaussian_kernel1d(sigma, radius).to(maps.device, maps.dtype)
    lead = maps.shape[:-2]
    h, w = maps.shape[-2:]
    x = maps.reshape(-1, 1, h, w)
    x = x.index_select(2, _reflect_index(h, radius).to(maps.device))
    x = F.conv2d(x, kernel.view(1, 1, -1, 1))
    x = x.index_select(3, _reflect_index(w, radius).to(maps.device))
    x = F.conv2d(x, kernel.view(1, 1, 1, -1))
    return x.reshape(*lead, h, w)


def postprocess(seg_logits: torch.Tensor, target: Tuple[int, int], sigma: float = SIGMA) -> torch.Tensor:
    """Upsample logits ``[B, 1, h, w]`` (or ``[1, h, w]``) to ``target`` and smooth.

    Returns maps of shape ``[B, H_img, W_img]`` (or ``[H_img, W_img]`` for a single map).
    """
    single = seg_logits.dim() == 3
    x = seg_logits[None] if single else seg_logits
    if tuple(x.shape[-2:]) != tuple(target):
        x = F.interpolate(x, size=tuple(target), mode="bilinear", align_corners=False)
    x = gaussian_blur(x[:, 0], sigma)
    return x[0] if single else x
