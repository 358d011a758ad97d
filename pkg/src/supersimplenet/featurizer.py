"""Frozen pretrained backbone, two-layer upscale-and-merge, 3x3 neighbourhood pooling."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .config import BackboneSpec

logger = logging.getLogger(__name__)

# name -> (constructor, pinned ImageNet weight enum name, per-stage output channels, stage strides)
BACKBONES = {
    "wide_resnet50_2": (
        torchvision.models.wide_resnet50_2,
        "Wide_ResNet50_2_Weights.IMAGENET1K_V1",
        (256, 512, 1024, 2048),
    ),
    "resnet18": (
        torchvision.models.resnet18,
        "ResNet18_Weights.IMAGENET1K_V1",
        (64, 128, 256, 512),
    ),
    "resnet50": (
        torchvision.models.resnet50,
        "ResNet50_Weights.IMAGENET1K_V1",
        (256, 512, 1024, 2048),
    ),
}
STAGE_STRIDES = {1: 4, 2: 8, 3: 16, 4: 32}


@dataclass
class FeatureVolume:
    """Batch of feature maps ``[B, C, H, W]`` with its stride relative to the input image."""

    data: torch.Tensor
    stride: int

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self):
        return tuple(self.data.shape[-2:])


def _build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name not in BACKBONES:
        raise ValueError(f"unknown backbone {spec.name!r}; registered: {sorted(BACKBONES)}")
    ctor, weight_id, _ = BACKBONES[spec.name]
    if spec.weights == "imagenet":
        weights = torchvision.models.get_weight(weight_id)
        try:
            return ctor(weights=weights)
        except Exception as exc:  # offline without a cached checkpoint
            raise RuntimeError(
                f"could not load pretrained weights {weight_id} ({exc}); place the checkpoint in "
                f"the torch hub cache, pass a file path as backbone.weights, or use weights='random'"
            ) from exc
    if spec.weights == "random":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(spec.seed)
            return ctor(weights=None)
    model = ctor(weights=None)
    state = torch.load(spec.weights, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    return model


class FeatureExtractor(nn.Module):
    """Frozen ResNet-like trunk returning intermediate stage outputs.

    Layers deeper than the last requested stage are dropped, so only the
    parameters that actually contribute to the features are kept.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        net = _build_backbone(spec)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        last = max(spec.layer_indices)
        self.stages = nn.ModuleList([getattr(net, f"layer{i}") for i in range(1, last + 1)])
        self.layer_indices = tuple(spec.layer_indices)
        channels = BACKBONES[spec.name][2]
        self.out_channels = tuple(channels[i - 1] for i in self.layer_indices)
        self.strides = tuple(STAGE_STRIDES[i] for i in self.layer_indices)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # batch-norm statistics stay frozen whatever the parent module does
        return super().train(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> List[FeatureVolume]:
        h, w = images.shape[-2:]
        min_stride = self.strides[0]
        if h % min_stride or w % min_stride:
            raise ValueError(
                f"input dims {(h, w)} must be divisible by {min_stride} for layer {self.layer_indices[0]}"
            )
        x = self.stem(images)
        out = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.layer_indices:
                out.append(FeatureVolume(x, STAGE_STRIDES[i]))
        return out

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def extract(images: torch.Tensor, extractor: FeatureExtractor) -> List[FeatureVolume]:
    return extractor(images)


def upscale_and_merge(volumes: Sequence[FeatureVolume], upscale_enabled: bool = True) -> FeatureVolume:
    """Bring every volume to a common grid and concatenate along channels.

    With ``upscale_enabled`` the grid is twice the resolution of the shallowest
    volume (layer 2 doubled, layer 3 quadrupled); otherwise it is the
    shallowest volume's own grid. Resizing targets the grid size rather than a
    scale factor so odd-sized maps (e.g. 29 rows -> 15 rows) still line up.
    """
    if len(volumes) < 2:
        raise ValueError("upscale_and_merge needs at least two feature volumes")
    for prev, nxt in zip(volumes, volumes[1:]):
        if nxt.stride != 2 * prev.stride:
            raise ValueError(f"volumes must come from consecutive stages, got strides {prev.stride}, {nxt.stride}")
        expected = tuple(-(-s // 2) for s in prev.spatial)
        if nxt.spatial != expected:
            raise ValueError(f"spatial dims {nxt.spatial} do not follow {prev.spatial} at stride ratio 2")
    factor = 2 if upscale_enabled else 1
    base_h, base_w = volumes[0].spatial
    size = (base_h * factor, base_w * factor)
    resized = []
    for vol in volumes:
        if vol.spatial == size:
            resized.append(vol.data)
        else:
            resized.append(F.interpolate(vol.data, size=size, mode="bilinear", align_corners=False))
    return FeatureVolume(torch.cat(resized, dim=1), volumes[0].stride // factor)


def neighborhood_pool(volume: FeatureVolume, kernel: int = 3) -> FeatureVolume:
    """3x3 mean filter, stride 1, edge-replicated borders (spatial size preserved)."""
    data = volume.data
    if not torch.isfinite(data).all():
        raise ValueError("neighborhood_pool received non-finite features")
    pad = kernel // 2
    padded = F.pad(data, (pad, pad, pad, pad), mode="replicate")
    return FeatureVolume(F.avg_pool2d(padded, kernel, stride=1), volume.stride)


class Featurizer(nn.Module):
    """extract -> upscale_and_merge -> neighborhood_pool, all without gradients."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.extractor = FeatureExtractor(spec)
        self.upscale = spec.upscale
        if len(spec.layer_indices) < 2:
            raise ValueError("the featurizer merges at least two backbone stages")

    @property
    def out_channels(self) -> int:
        return sum(self.extractor.out_channels)

    @property
    def stride(self) -> int:
        return self.extractor.strides[0] // (2 if self.upscale else 1)

    def output_size(self, image_size):
        h, w = image_size
        return h // self.stride, w // self.stride

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        volumes = self.extractor(images)
        merged = upscale_and_merge(volumes, self.upscale)
        return neighborhood_pool(merged).data
