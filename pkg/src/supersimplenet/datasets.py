"""Dataset ingestion, normalization, fold splits, batching and the toy corpus."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import IMAGENET_MEAN, IMAGENET_STD, DatasetSpec

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

_MEAN = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
_STD = torch.tensor(IMAGENET_STD).view(3, 1, 1)


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    image: torch.Tensor  # [3, H, W], normalized
    gt_mask: Optional[torch.Tensor]  # [H, W] bool, or None
    label: int
    category: str
    split: str
    path: str


@dataclass
class Batch:
    images: torch.Tensor  # [B, 3, H, W]
    masks: torch.Tensor  # [B, H, W] bool (empty where no ground truth)
    labels: torch.Tensor  # [B]
    indices: List[int]
    flips: List[Tuple[bool, bool]]


def normalize(image: torch.Tensor) -> torch.Tensor:
    """[0, 1] RGB -> ImageNet-normalized."""
    return (image - _MEAN.to(image)) / _STD.to(image)


def denormalize(image: torch.Tensor) -> torch.Tensor:
    return image * _STD.to(image) + _MEAN.to(image)


def read_image(path, resolution: Tuple[int, int]) -> torch.Tensor:
    h, w = resolution
    with Image.open(path) as img:
        img = img.convert("RGB").resize((w, h), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return normalize(torch.from_numpy(arr).permute(2, 0, 1).contiguous())


def read_mask(path, resolution: Tuple[int, int]) -> torch.Tensor:
    h, w = resolution
    with Image.open(path) as img:
        img = img.convert("L").resize((w, h), Image.NEAREST)
        return torch.from_numpy(np.asarray(img) > 127)


def _images_in(folder: Path) -> List[Path]:
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _make_sample(image_path, mask_path, label, category, split, resolution) -> Sample:
    image = read_image(image_path, resolution)
    mask = read_mask(mask_path, resolution) if mask_path is not None else None
    if label == 1 and mask is None:
        raise DatasetError(f"missing ground truth for anomalous image {image_path}")
    return Sample(image, mask, int(label), category, split, str(image_path))


# -- layouts -----------------------------------------------------------------

def _mvtec_mask_path(cat_root: Path, split: str, defect: str, stem: str) -> Path:
    gt_dir = "ground_truth" if split == "test" else "train_ground_truth"
    return cat_root / gt_dir / defect / f"{stem}_mask.png"


def _load_mvtec_like(spec: DatasetSpec, resolution):
    """``<cat>/train/good``, ``<cat>/test/<defect>``, ``<cat>/ground_truth/<defect>/<stem>_mask.png``.

    Anomalous training images (supervised use) live in ``<cat>/train/<defect>``
    with masks under ``<cat>/train_ground_truth/<defect>``.
    """
    cat_root = Path(spec.root) / spec.category
    if not (cat_root / "train").is_dir() or not (cat_root / "test").is_dir():
        raise DatasetError(f"{cat_root} does not follow the mvtec_like layout (train/, test/)")
    out = {"train": [], "test": []}
    for split in ("train", "test"):
        for defect_dir in sorted(p for p in (cat_root / split).iterdir() if p.is_dir()):
            defect = defect_dir.name
            for img in _images_in(defect_dir):
                if defect == "good":
                    out[split].append(_make_sample(img, None, 0, spec.category, split, resolution))
                    continue
                mask = _mvtec_mask_path(cat_root, split, defect, img.stem)
                if not mask.exists():
                    raise DatasetError(f"missing ground truth {mask} for {img}")
                out[split].append(_make_sample(img, mask, 1, spec.category, split, resolution))
    return out["train"], out["test"]


def _load_visa_like(spec: DatasetSpec, resolution):
    """CSV-indexed split: ``split_csv/1cls.csv`` with object,split,label,image,mask columns."""
    root = Path(spec.root)
    csv_path = Path(spec.split_file) if spec.split_file else root / "split_csv" / "1cls.csv"
    if not csv_path.exists():
        raise DatasetError(f"visa_like split file not found: {csv_path}")
    out = {"train": [], "test": []}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["object"] != spec.category:
                continue
            label = 0 if row["label"] == "normal" else 1
            mask = root / row["mask"] if row.get("mask") else None
            split = row["split"]
            if split not in out:
                raise DatasetError(f"unknown split {split!r} in {csv_path}")
            out[split].append(_make_sample(root / row["image"], mask, label, spec.category, split, resolution))
    return out["train"], out["test"]


def _load_ksdd2(spec: DatasetSpec, resolution):
    """Flat ``train/`` and ``test/`` folders with ``<stem>_GT.png`` masks next to each image."""
    root = Path(spec.root)
    out = {"train": [], "test": []}
    for split in out:
        folder = root / split
        if not folder.is_dir():
            raise DatasetError(f"{folder} missing (ksdd2 layout expects train/ and test/)")
        for img in _images_in(folder):
            if img.stem.endswith("_GT"):
                continue
            gt = folder / f"{img.stem}_GT{img.suffix}"
            if not gt.exists():
                raise DatasetError(f"missing ground truth {gt} for {img}")
            mask = read_mask(gt, resolution)
            label = int(mask.any())
            out[split].append(Sample(read_image(img, resolution), mask, label, "ksdd2", split, str(img)))
    return out["train"], out["test"]


def _load_sensum_all(spec: DatasetSpec, resolution) -> List[Sample]:
    """``<cat>/negative/data/*`` and ``<cat>/positive/data/*`` with ``positive/annotation/<stem>.png``."""
    cat_root = Path(spec.root) / spec.category
    negatives = _images_in(cat_root / "negative" / "data")
    positives = _images_in(cat_root / "positive" / "data")
    if not negatives and not positives:
        raise DatasetError(f"{cat_root} does not follow the sensum layout")
    samples = [_make_sample(p, None, 0, spec.category, "all", resolution) for p in negatives]
    for p in positives:
        ann = cat_root / "positive" / "annotation" / f"{p.stem}.png"
        if not ann.exists():
            raise DatasetError(f"missing annotation {ann} for {p}")
        samples.append(_make_sample(p, ann, 1, spec.category, "all", resolution))
    return samples


def _stable_hash(name: str) -> str:
    return hashlib.sha256(name.encode("utf-8")).hexdigest()


def sensum_folds(all_samples: Sequence[Sample], fold: int, split_file: Optional[str] = None):
    """Deterministic 3-fold partition; fold ``fold`` is the test set.

    Samples are ordered by label, then by a stable hash of their file name, and
    dealt round-robin into folds, so folds differ in size (and in per-class
    counts) by at most one. A JSON split file ``{"0": [names], "1": ..., "2": ...}``
    overrides the hash assignment.
    """
    if fold not in (0, 1, 2):
        raise ValueError(f"fold must be 0, 1 or 2, got {fold}")
    if split_file is not None:
        listing = json.loads(Path(split_file).read_text())
        test_names = set(listing[str(fold)])
        assignment = [0 if Path(s.path).name in test_names else 1 for s in all_samples]
        test = [s for s, a in zip(all_samples, assignment) if a == 0]
        train = [s for s, a in zip(all_samples, assignment) if a == 1]
    else:
        order = sorted(range(len(all_samples)),
                       key=lambda i: (-all_samples[i].label, _stable_hash(Path(all_samples[i].path).name)))
        fold_of = {idx: rank % 3 for rank, idx in enumerate(order)}
        test = [s for i, s in enumerate(all_samples) if fold_of[i] == fold]
        train = [s for i, s in enumerate(all_samples) if fold_of[i] != fold]
    return [replace(s, split="train") for s in train], [replace(s, split="test") for s in test]


def load(spec: DatasetSpec) -> Tuple[List[Sample], List[Sample]]:
    """Load ``(train, test)`` samples resized to the dataset resolution and normalized.

    In unsupervised mode anomalous training samples are dropped.
    """
    spec.validate()
    resolution = spec.resolved_resolution()
    if not Path(spec.root).exists():
        raise DatasetError(f"dataset root does not exist: {spec.root}")
    if spec.family == "mvtec_like":
        train, test = _load_mvtec_like(spec, resolution)
    elif spec.family == "visa_like":
        train, test = _load_visa_like(spec, resolution)
    elif spec.family == "ksdd2":
        train, test = _load_ksdd2(spec, resolution)
    elif spec.family == "sensum":
        train, test = sensum_folds(_load_sensum_all(spec, resolution), spec.fold, spec.split_file)
    else:
        raise DatasetError(f"unknown layout {spec.family!r}")
    if spec.supervision == "unsupervised":
        dropped = sum(s.label for s in train)
        train = [s for s in train if s.label == 0]
        if dropped:
            logger.info("unsupervised mode: dropped %d anomalous training samples", dropped)
    if not test:
        raise DatasetError(f"no test samples found under {spec.root}")
    return train, test


# -- batching ----------------------------------------------------------------

def _flip(t: torch.Tensor, hflip: bool, vflip: bool) -> torch.Tensor:
    dims = [d for d, f in ((-1, hflip), (-2, vflip)) if f]
    return t.flip(dims) if dims else t


def _collate(samples: Sequence[Sample], indices, flips) -> Batch:
    images, masks = [], []
    for s, (hf, vf) in zip(samples, flips):
        images.append(_flip(s.image, hf, vf))
        m = s.gt_mask if s.gt_mask is not None else torch.zeros(s.image.shape[-2:], dtype=torch.bool)
        masks.append(_flip(m, hf, vf))
    labels = torch.tensor([s.label for s in samples], dtype=torch.float32)
    return Batch(torch.stack(images), torch.stack(masks), labels, list(indices), list(flips))


def plain_batches(train: Sequence[Sample], batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    order = rng.permutation(len(train))
    for start in range(0, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        yield _collate([train[i] for i in idx], idx, [(False, False)] * len(idx))


def balanced_batches(train: Sequence[Sample], batch_size: int, rng: np.random.Generator,
                     supervised: bool = True, flip: bool = True) -> Iterator[Batch]:
    """Batches with floor(B/2) anomalous and ceil(B/2) normal samples.

    The larger pool is walked once in shuffled order (the last chunk topped
    up at random); the smaller pool is sampled with replacement. Anomalous samples are randomly flipped
    horizontally and/or vertically together with their masks. In
    unsupervised mode this falls back to plain shuffled batches.
    """
    if not supervised:
        yield from plain_batches(train, batch_size, rng)
        return
    anomalous = [i for i, s in enumerate(train) if s.label == 1]
    normal = [i for i, s in enumerate(train) if s.label == 0]
    if not anomalous or not normal:
        raise DatasetError("balanced batching needs both anomalous and normal training samples")
    n_anom, n_norm = batch_size // 2, batch_size - batch_size // 2
    if n_anom == 0:
        raise DatasetError("balanced batching needs batch_size >= 2")
    anom_major = len(anomalous) / n_anom > len(normal) / n_norm
    major, minor = (anomalous, normal) if anom_major else (normal, anomalous)
    k_major, k_minor = (n_anom, n_norm) if anom_major else (n_norm, n_anom)
    order = rng.permutation(major)
    for start in range(0, len(order), k_major):
        chunk = [int(i) for i in order[start:start + k_major]]
        if len(chunk) < k_major:  # top up the tail so every batch keeps the exact split
            chunk += [int(i) for i in rng.choice(major, size=k_major - len(chunk), replace=True)]
        extra = [int(i) for i in rng.choice(minor, size=k_minor, replace=True)]
        anom_idx, norm_idx = (chunk, extra) if anom_major else (extra, chunk)
        idx = list(anom_idx) + list(norm_idx)
        flips = []
        for i in idx:
            if flip and train[i].label == 1:
                flips.append((bool(rng.random() < 0.5), bool(rng.random() < 0.5)))
            else:
                flips.append((False, False))
        yield _collate([train[i] for i in idx], idx, flips)


# -- toy corpus --------------------------------------------------------------

def _texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Woven-looking background: stripes plus mild low-frequency shading and grain."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    period = 8.0
    phase = rng.uniform(0, 2 * np.pi, size=2)
    weave = 0.5 + 0.12 * np.sin(2 * np.pi * xx / period + phase[0]) * np.sin(2 * np.pi * yy / period + phase[1])
    shade = 0.05 * np.sin(2 * np.pi * (xx / w + rng.uniform())) * np.cos(2 * np.pi * (yy / h + rng.uniform()))
    grain = rng.normal(0, 0.02, size=(h, w))
    base = np.clip(weave + shade + grain, 0, 1)
    tint = np.array([0.55, 0.5, 0.42]) + rng.normal(0, 0.01, size=3)
    return np.clip(base[..., None] * tint / 0.5, 0, 1)


def _contamination(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Coarse high-contrast speckle, dark or bright on average."""
    level = 0.2 if rng.random() < 0.5 else 0.8
    speckle = rng.normal(0, 0.3, size=(h, w, 1)) + rng.normal(0, 0.08, size=(h, w, 3))
    return np.clip(level + speckle, 0, 1)


def _defect(h: int, w: int, rng: np.random.Generator) -> Tuple[np.ndarray, str]:
    canvas = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    kind = "scratch" if rng.random() < 0.5 else "blob"
    scale = min(h, w)
    if kind == "scratch":
        x0, y0 = rng.uniform(0.15, 0.85, size=2) * (w, h)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.25, 0.5) * scale
        x1, y1 = x0 + length * np.cos(angle), y0 + length * np.sin(angle)
        draw.line([(x0, y0), (x1, y1)], fill=255, width=max(2, int(round(scale / 20))))
    else:
        cx, cy = rng.uniform(0.2, 0.8, size=2) * (w, h)
        rx, ry = rng.uniform(0.06, 0.14, size=2) * scale
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    return np.asarray(canvas) > 127, kind


def make_toy_corpus(root, n_normal: int, n_defect: int, resolution=(64, 64), rng=None,
                    category: str = "toy", test_normal_fraction: float = 0.25,
                    train_defect_fraction: float = 0.0) -> Path:
    """Write a synthetic mvtec_like corpus under ``root/category``.

    Normal images are textured backgrounds; defective images carry a
    high-contrast scratch or blob whose exact footprint is the mask. A
    ``test_normal_fraction`` of the normals go to ``test/good``; a
    ``train_defect_fraction`` of the defects go to the training split
    (for supervised runs), the rest to ``test/<kind>``.
    """
    h, w = resolution
    if h % 8 or w % 8:
        raise ValueError(f"resolution {resolution} must be divisible by 8")
    rng = np.random.default_rng(rng)
    cat_root = Path(root) / category
    for sub in ("train/good", "test/good"):
        (cat_root / sub).mkdir(parents=True, exist_ok=True)

    n_test_normal = min(max(int(round(n_normal * test_normal_fraction)), 1), n_normal - 1) if n_normal > 1 else 0
    for i in range(n_normal):
        split = "test" if i < n_test_normal else "train"
        img = (_texture(h, w, rng) * 255).round().astype(np.uint8)
        Image.fromarray(img).save(cat_root / split / "good" / f"{i:03d}.png")

    n_train_defect = int(round(n_defect * train_defect_fraction))
    for i in range(n_defect):
        split = "train" if i < n_train_defect else "test"
        base = _texture(h, w, rng)
        mask, kind = _defect(h, w, rng)
        img = np.where(mask[..., None], _contamination(h, w, rng), base)
        img = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        (cat_root / split / kind).mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(cat_root / split / kind / f"d{i:03d}.png")
        mask_dir = _mvtec_mask_path(cat_root, split, kind, "x").parent
        mask_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(mask.astype(np.uint8) * 255).save(mask_dir / f"d{i:03d}_mask.png")
    return cat_root
