"""Feature adaptor, segmentation head, classification head and the assembled model."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import anomaly_synth
from .config import BackboneSpec, HeadConfig, NoiseConfig
from .featurizer import Featurizer
from .postprocess import postprocess


class SegmentationHead(nn.Module):
    """Per-location discriminator: 1x1 conv -> BN -> LeakyReLU(0.2) -> 1x1 conv to one logit."""

    def __init__(self, channels: int, hidden: int = 1024):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.BatchNorm2d(hidden),
            nn.LeakyReLU(0.2),
        )
        self.tail = nn.Conv2d(hidden, 1, kernel_size=1, bias=False)

    def forward(self, x):
        return self.tail(self.body(x))


class ClassificationHead(nn.Module):
    """5x5 conv block over [features, seg logits], global avg/max pooling, linear to one logit."""

    def __init__(self, channels: int, conv_channels: int = 128, kernel: int = 5):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels + 1, conv_channels, kernel_size=kernel, padding=kernel // 2),
            nn.BatchNorm2d(conv_channels),
            nn.ReLU(),
        )
        self.fc = nn.Linear(2 * conv_channels + 2, 1)

    def forward(self, features, seg_logits):
        if features.shape[-2:] != seg_logits.shape[-2:]:
            raise ValueError(f"feature dims {tuple(features.shape[-2:])} != logit dims {tuple(seg_logits.shape[-2:])}")
        z = self.block(torch.cat([features, seg_logits], dim=1))
        pooled = torch.cat(
            [
                z.mean(dim=(2, 3)),
                z.amax(dim=(2, 3)),
                seg_logits.mean(dim=(2, 3)),
                seg_logits.amax(dim=(2, 3)),
            ],
            dim=1,
        )
        return self.fc(pooled).squeeze(1)


class SuperSimpleNet(nn.Module):
    def __init__(self, backbone: BackboneSpec, head: HeadConfig, noise: NoiseConfig,
                 stop_grad_to_seg: bool = True):
        super().__init__()
        self.featurizer = Featurizer(backbone)
        channels = self.featurizer.out_channels
        if head.adaptor_channels is not None and head.adaptor_channels != channels:
            raise ValueError(f"adaptor expects {head.adaptor_channels} channels, backbone yields {channels}")
        self.channels = channels
        self.noise = noise
        self.stop_grad_to_seg = stop_grad_to_seg
        self.cls_enabled = head.cls_enabled
        self.adaptor = nn.Conv2d(channels, channels, kernel_size=1)
        self.seg_head = SegmentationHead(channels, head.seg_hidden)
        self.cls_head = ClassificationHead(channels, head.cls_channels, head.cls_conv_kernel) if head.cls_enabled else None

    # -- building blocks -------------------------------------------------
    def featurize(self, images: torch.Tensor) -> torch.Tensor:
        return self.featurizer(images)

    def adapt(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ValueError(f"adaptor expects {self.channels} channels, got {features.shape[1]}")
        return self.adaptor(features)

    def segment(self, features: torch.Tensor) -> torch.Tensor:
        return self.seg_head(features)

    def classify(self, features: torch.Tensor, seg_logits: torch.Tensor) -> Optional[torch.Tensor]:
        if self.cls_head is None:
            return None
        if self.stop_grad_to_seg:
            features, seg_logits = features.detach(), seg_logits.detach()
        return self.cls_head(features, seg_logits)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def param_groups(self, lr_adaptor: float, lr_heads: float):
        heads = list(self.seg_head.parameters())
        if self.cls_head is not None:
            heads += list(self.cls_head.parameters())
        return [
            {"params": list(self.adaptor.parameters()), "lr": lr_adaptor, "name": "adaptor"},
            {"params": heads, "lr": lr_heads, "name": "heads"},
        ]

    # -- forward passes --------------------------------------------------
    def forward_train_features(self, features: torch.Tensor, m_gt: Optional[torch.Tensor],
                               rng: np.random.Generator) -> dict:
        """Training pass from pre-computed backbone features ``[B, C, h, w]``.

        ``m_gt`` holds real-defect masks already at feature resolution (or None).
        """
        adapted = self.adapt(features)
        perturbed, masks, y = anomaly_synth.perturb(adapted, m_gt, self.noise, rng)
        seg_logits = self.segment(perturbed)
        score = self.classify(perturbed, seg_logits)
        return {"seg_logits": seg_logits, "score": score, "masks": masks, "y": y}

    def forward_train(self, images: torch.Tensor, gt_masks: Optional[torch.Tensor],
                      rng: np.random.Generator) -> dict:
        """Training pass from normalized images; ``gt_masks`` at image resolution or None."""
        features = self.featurize(images)
        m_gt = None
        if gt_masks is not None:
            m_gt = anomaly_synth.downsample_gt(gt_masks, tuple(features.shape[-2:])).to(features.device)
        return self.forward_train_features(features, m_gt, rng)

    def forward_infer(self, images: torch.Tensor):
        """Inference pass without anomaly generation: returns ``(seg_logits, score)``.

        Without a classification head the score is the maximum of the smoothed map.
        """
        features = self.adapt(self.featurize(images))
        seg_logits = self.segment(features)
        if self.cls_head is not None:
            return seg_logits, self.cls_head(features, seg_logits)
        maps = postprocess(seg_logits, tuple(images.shape[-2:]))
        return seg_logits, maps.flatten(1).amax(dim=1)

    @torch.no_grad()
    def predict(self, images: torch.Tensor):
        """Return ``(anomaly_maps [B, H, W], scores [B])`` at input resolution."""
        seg_logits, score = self.forward_infer(images)
        return postprocess(seg_logits, tuple(images.shape[-2:])), score

    def forward(self, images):
        return self.forward_infer(images)
