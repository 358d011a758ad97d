"""Latent-space synthetic anomalies: binarised Perlin masks and masked Gaussian noise."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .config import NoiseConfig


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_noise(height: int, width: int, res: Tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Single-octave gradient noise on a ``res`` lattice, sampled at cell centres.

    Values lie in [-sqrt(1/2), sqrt(1/2)], hence always inside [-1, 1].
    """
    ry, rx = res
    angles = 2 * np.pi * rng.random((ry + 1, rx + 1))
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    y = (np.arange(height) + 0.5) * ry / height
    x = (np.arange(width) + 0.5) * rx / width
    yi = np.floor(y).astype(int)
    xi = np.floor(x).astype(int)
    fy = (y - yi)[:, None]
    fx = (x - xi)[None, :]

    def corner(dy, dx):
        g = grads[(yi + dy)[:, None], (xi + dx)[None, :]]
        return g[..., 0] * (fy - dy) + g[..., 1] * (fx - dx)

    n00, n01, n10, n11 = corner(0, 0), corner(0, 1), corner(1, 0), corner(1, 1)
    uy, ux = _fade(fy), _fade(fx)
    top = n00 + ux * (n01 - n00)
    bottom = n10 + ux * (n11 - n10)
    return top + uy * (bottom - top)


def fractal_perlin(height: int, width: int, res: Tuple[int, int], rng: np.random.Generator,
                   octaves: int = 1, persistence: float = 0.5) -> np.ndarray:
    """Sum of octaves (lattice doubling per octave), renormalised to stay in [-1, 1]."""
    total = np.zeros((height, width))
    amp, norm = 1.0, 0.0
    for k in range(octaves):
        total += amp * perlin_noise(height, width, (res[0] * 2 ** k, res[1] * 2 ** k), rng)
        norm += amp
        amp *= persistence
    return np.clip(total / norm, -1.0, 1.0)


def perlin_mask(height: int, width: int, threshold: float, rng: np.random.Generator,
                max_exponent: int = 5, octaves: int = 1) -> np.ndarray:
    """Binary mask where a random-scale Perlin field exceeds ``threshold``.

    The lattice size per axis is ``2**k`` with ``k`` uniform in ``0..max_exponent``,
    capped so the lattice is never finer than the grid itself.
    """
    if height < 1 or width < 1:
        raise ValueError("perlin_mask needs positive dimensions")
    ky = int(rng.integers(0, max_exponent + 1))
    kx = int(rng.integers(0, max_exponent + 1))
    ry = 2 ** min(ky, int(np.log2(height)))
    rx = 2 ** min(kx, int(np.log2(width)))
    noise = fractal_perlin(height, width, (ry, rx), rng, octaves)
    return noise > threshold


@dataclass
class MaskSet:
    """Thresholded Perlin mask, ground truth, synthetic-noise mask, and training target.

    Arrays are boolean, either single ``[H, W]`` masks or ``[B, H, W]`` batches.
    """

    m_t: object
    m_gt: object
    m_a: object
    m: object


def compose_masks(m_t, m_gt, overlap_allowed: bool = False) -> MaskSet:
    """Remove real-defect regions from the synthetic mask and build the target.

    Works on numpy or torch boolean arrays of equal shape.
    """
    if tuple(m_t.shape) != tuple(m_gt.shape):
        raise ValueError(f"mask shapes differ: {tuple(m_t.shape)} vs {tuple(m_gt.shape)}")
    m_t = m_t.astype(bool) if isinstance(m_t, np.ndarray) else m_t.bool()
    m_gt = m_gt.astype(bool) if isinstance(m_gt, np.ndarray) else m_gt.bool()
    m_a = m_t if overlap_allowed else m_t & ~m_gt
    return MaskSet(m_t=m_t, m_gt=m_gt, m_a=m_a, m=m_a | m_gt)


def downsample_gt(m_gt_image, target: Tuple[int, int]) -> torch.Tensor:
    """Any-overlap reduction of image-resolution masks ``[..., H_img, W_img]`` to ``target``.

    Pixel row ``i`` belongs to feature row ``floor(i * H / H_img)``; a feature
    cell is positive iff any pixel assigned to it is positive.
    """
    mask = torch.as_tensor(np.asarray(m_gt_image) if not torch.is_tensor(m_gt_image) else m_gt_image)
    h_img, w_img = mask.shape[-2:]
    h, w = target
    if h > h_img or w > w_img:
        raise ValueError(f"target {target} larger than source {(h_img, w_img)}")
    lead = mask.shape[:-2]
    flat = mask.reshape(-1, h_img * w_img).to(torch.uint8)
    rows = torch.arange(h_img, device=flat.device) * h // h_img
    cols = torch.arange(w_img, device=flat.device) * w // w_img
    index = (rows[:, None] * w + cols[None, :]).reshape(1, -1).expand_as(flat)
    out = torch.zeros(flat.shape[0], h * w, dtype=torch.uint8, device=flat.device)
    out.scatter_reduce_(1, index, flat, reduce="amax")
    return out.reshape(*lead, h, w).bool()


def _torch_generator(rng: np.random.Generator, device) -> torch.Generator:
    gen = torch.Generator(device=device)
    gen.manual_seed(int(rng.integers(0, 2 ** 63 - 1)))
    return gen


def synthetic_masks(batch: int, height: int, width: int, cfg: NoiseConfig,
                    rng: np.random.Generator, device=None) -> torch.Tensor:
    """Per-image Perlin masks, each drawn with probability ``anomaly_probability``."""
    m_t = np.zeros((batch, height, width), dtype=bool)
    if cfg.synthetic_enabled:
        for i in range(batch):
            if rng.random() < cfg.anomaly_probability:
                m_t[i] = perlin_mask(height, width, cfg.perlin_threshold, rng,
                                     cfg.perlin_max_exponent, cfg.perlin_octaves)
    return torch.from_numpy(m_t).to(device)


def perturb(adapted: torch.Tensor, m_gt: Optional[torch.Tensor], cfg: NoiseConfig,
            rng: np.random.Generator):
    """Add masked Gaussian noise to adapted features ``[B, C, H, W]``.

    Args:
        adapted: adapted feature batch.
        m_gt: real-defect masks at feature resolution ``[B, H, W]`` or None (all empty).
        cfg: noise settings.
        rng: numpy generator; every mask and noise draw derives from it.

    Returns:
        ``(perturbed, masks, y)`` where ``masks`` is a batched :class:`MaskSet`
        and ``y`` is a float tensor of image labels. With feature duplication the
        returned batch is twice as large (originals first, copies second).
    """
    if cfg.gauss_sigma < 0:
        raise ValueError("gauss_sigma must be >= 0")
    b, _, h, w = adapted.shape
    device = adapted.device
    if m_gt is None:
        m_gt = torch.zeros(b, h, w, dtype=torch.bool, device=device)
    m_gt = m_gt.to(device).bool()
    if tuple(m_gt.shape) != (b, h, w):
        raise ValueError(f"mask shape {tuple(m_gt.shape)} does not match features {(b, h, w)}")

    if cfg.duplicate_features:
        adapted = torch.cat([adapted, adapted])
        m_gt = torch.cat([m_gt, m_gt])
    n = adapted.shape[0]

    if cfg.generator_style == "perlin_masked":
        m_t = synthetic_masks(n, h, w, cfg, rng, device)
    elif cfg.generator_style == "simplenet_full_copy":
        # whole-map noise: on the copies when duplicating, else per image with probability p
        m_t = torch.zeros(n, h, w, dtype=torch.bool, device=device)
        if cfg.synthetic_enabled:
            if cfg.duplicate_features:
                m_t[b:] = True
            else:
                hit = torch.from_numpy(rng.random(n) < cfg.anomaly_probability).to(device)
                m_t[hit] = True
    else:
        raise ValueError(f"unknown generator_style {cfg.generator_style!r}")

    masks = compose_masks(m_t, m_gt, cfg.overlap_allowed)
    if cfg.gauss_sigma > 0 and bool(masks.m_a.any()):
        gen = _torch_generator(rng, device)
        noise = torch.randn(adapted.shape, generator=gen, device=device, dtype=adapted.dtype)
        noise = noise * cfg.gauss_sigma + cfg.gauss_mu
        perturbed = adapted + noise * masks.m_a[:, None].to(adapted.dtype)
    else:
        perturbed = adapted
    y = masks.m.flatten(1).any(dim=1).to(adapted.dtype)
    return perturbed, masks, y


def save_mask_set(masks: MaskSet, directory, prefix: str = "batch") -> list:
    """Write every mask of a batched MaskSet as 0/255 grayscale PNG files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("m_t", "m_gt", "m_a", "m"):
        arr = getattr(masks, name)
        arr = arr.detach().cpu().numpy() if torch.is_tensor(arr) else np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[None]
        for i, m in enumerate(arr):
            path = directory / f"{prefix}_{i:03d}_{name}.png"
            Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(path)
            written.append(path)
    return written
