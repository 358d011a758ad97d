"""Training loop, evaluation driver, checkpoints and the efficiency benchmark."""
from __future__ import annotations

import bisect
import json
import logging
import math
import os
import resource
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import anomaly_synth, objectives
from .config import DatasetSpec, RunConfig, dump_config
from .datasets import Sample, balanced_batches, load
from .metrics import EvalBundle, MetricsReport, report
from .network import SuperSimpleNet
from .postprocess import postprocess  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "supersimplenet-checkpoint/1"
DEVICE_ENV = "SSN_DEVICE"


class TrainingError(RuntimeError):
    pass


def resolve_device(requested: Optional[str] = None) -> torch.device:
    name = requested or os.environ.get(DEVICE_ENV)
    if not name:
        name = "cuda" if torch.cuda.is_available() else "cpu"
    device = torch.device(name)
    if device.type == "cuda" and not torch.cuda.is_available():
        raise RuntimeError(f"device {name!r} requested but CUDA is unavailable")
    return device


def build_model(cfg: RunConfig, init_seed: int = 0) -> SuperSimpleNet:
    """Instantiate the network; trainable layers are initialized from ``init_seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return SuperSimpleNet(cfg.backbone, cfg.head, cfg.noise, stop_grad_to_seg=cfg.stop_grad_to_seg)


def _trainable_state(model: SuperSimpleNet) -> Dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in model.state_dict().items() if not k.startswith("featurizer.")}


def save_checkpoint(model: SuperSimpleNet, cfg: RunConfig, path, epoch: int, seed: Optional[int] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": cfg.to_dict(),
            "epoch": epoch,
            "seed": seed,
            "state": _trainable_state(model),
            "backbone_fingerprint": model.featurizer.extractor.fingerprint(),
        },
        path,
    )
    return path


def load_checkpoint(path, device=None):
    """Return ``(model, cfg, meta)``; the model is in eval mode on ``device``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {blob.get('format')!r}")
    cfg = RunConfig.from_dict(blob["config"])
    model = build_model(cfg)
    missing, unexpected = model.load_state_dict(blob["state"], strict=False)
    missing = [k for k in missing if not k.startswith("featurizer.")]
    if missing or unexpected:
        raise ValueError(f"{path}: state mismatch (missing {missing}, unexpected {unexpected})")
    fp = model.featurizer.extractor.fingerprint()
    if fp != blob["backbone_fingerprint"]:
        raise ValueError(f"{path}: backbone weights differ from those used in training")
    model.to(resolve_device(device) if device is not None else "cpu").eval()
    meta = {"epoch": blob["epoch"], "seed": blob["seed"]}
    return model, cfg, meta


class FeatureCache:
    """In-memory store of frozen-backbone features keyed by (sample index, flips)."""

    def __init__(self):
        self._store: Dict[tuple, torch.Tensor] = {}

    def __len__(self):
        return len(self._store)

    def features(self, model: SuperSimpleNet, batch, device) -> torch.Tensor:
        keys = [(i, hf, vf) for i, (hf, vf) in zip(batch.indices, batch.flips)]
        missing = [j for j, k in enumerate(keys) if k not in self._store]
        if missing:
            feats = model.featurize(batch.images[missing].to(device))
            for j, f in zip(missing, feats):
                self._store[keys[j]] = f.detach().cpu()
        return torch.stack([self._store[k] for k in keys]).to(device)


class Trainer:
    """Owns one model, its optimizer and scheduler for a single seed."""

    def __init__(self, cfg: RunConfig, seed: int = 0, device=None, train_samples: Optional[Sequence[Sample]] = None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.device = resolve_device(device or cfg.train.device)
        seq = np.random.SeedSequence(seed)
        synth_seq, batch_seq, init_seq, calib_seq = seq.spawn(4)
        self.calib_seed = calib_seq
        self.synth_rng = np.random.default_rng(synth_seq)
        self.batch_rng = np.random.default_rng(batch_seq)
        self.model = build_model(cfg, int(init_seq.generate_state(1)[0])).to(self.device)
        tc = cfg.train
        self.optimizer = torch.optim.AdamW(
            self.model.param_groups(tc.lr_adaptor, tc.lr_heads), weight_decay=tc.weight_decay
        )
        milestones = sorted(tc.scheduler_milestones)
        gamma = tc.scheduler_gamma
        # closed form base * gamma**k, k = milestones already passed
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda epoch: gamma ** bisect.bisect_right(milestones, epoch)
        )
        self._train_samples = train_samples
        self.cache = FeatureCache() if tc.cache_features else None
        self.history: List[dict] = []
        self.epoch = 0

    @property
    def train_samples(self) -> Sequence[Sample]:
        if self._train_samples is None:
            self._train_samples, _ = load(self.cfg.dataset)
        return self._train_samples

    def current_lrs(self) -> Dict[str, float]:
        return {g["name"]: g["lr"] for g in self.optimizer.param_groups}

    def _features(self, batch) -> torch.Tensor:
        if self.cache is not None:
            return self.cache.features(self.model, batch, self.device)
        return self.model.featurize(batch.images.to(self.device))

    def train_step(self, batch, export_dir=None) -> dict:
        model = self.model
        features = self._features(batch)
        m_gt = None
        if self.cfg.supervised:
            m_gt = anomaly_synth.downsample_gt(batch.masks, tuple(features.shape[-2:])).to(self.device)
        out = model.forward_train_features(features, m_gt, self.synth_rng)
        if export_dir is not None:
            anomaly_synth.save_mask_set(out["masks"], export_dir, prefix=f"epoch{self.epoch:03d}")
        loss, l_seg, l_cls = objectives.total_loss(out["seg_logits"], out["masks"].m, out["score"], out["y"], self.cfg.loss)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at epoch {self.epoch}: L={loss.item()} L_seg={l_seg.item()} "
                f"L_cls={l_cls.item()} (lr={self.current_lrs()})"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = model.trainable_parameters()
        clip = self.cfg.clip_grad_norm
        pre_norm = objectives.clip_gradients(params, clip) if clip else objectives.global_grad_norm(params)
        post_norm = objectives.global_grad_norm(params)
        self.optimizer.step()
        return {
            "loss": loss.item(), "l_seg": l_seg.item(), "l_cls": l_cls.item(),
            "grad_norm": pre_norm, "grad_norm_clipped": post_norm, "n": int(out["y"].numel()),
        }

    def train_epoch(self) -> dict:
        self.model.train()
        tc = self.cfg.train
        stats = []
        lrs = self.current_lrs()
        export_dir = None
        if self.cfg.export_masks and self.epoch == 0:
            export_dir = Path(self.cfg.output_dir) / "mask_debug"
        batches = balanced_batches(self.train_samples, tc.batch_size, self.batch_rng, supervised=self.cfg.supervised)
        for i, batch in enumerate(batches):
            stats.append(self.train_step(batch, export_dir if i == 0 else None))
        self.scheduler.step()
        total = sum(s["n"] for s in stats)
        record = {
            "epoch": self.epoch,
            "lr": lrs,
            "loss": sum(s["loss"] * s["n"] for s in stats) / total,
            "l_seg": sum(s["l_seg"] * s["n"] for s in stats) / total,
            "l_cls": sum(s["l_cls"] * s["n"] for s in stats) / total,
            "max_grad_norm_clipped": max(s["grad_norm_clipped"] for s in stats),
            "steps": len(stats),
        }
        self.history.append(record)
        self.epoch += 1
        return record

    @torch.no_grad()
    def recalibrate_batchnorm(self) -> int:
        """Recompute head batch-norm running stats as exact averages over one training pass.

        Batches go through the usual feature perturbation so the statistics match
        what the heads saw during training. Returns the number of batches used.
        """
        model = self.model
        norms = [m for name, m in model.named_modules()
                 if isinstance(m, torch.nn.modules.batchnorm._BatchNorm) and not name.startswith("featurizer")]
        if not norms:
            return 0
        momenta = [m.momentum for m in norms]
        for m in norms:
            m.reset_running_stats()
            m.momentum = None  # cumulative average
        model.train()
        synth_rng = np.random.default_rng(self.calib_seed.spawn(1)[0])
        batch_rng = np.random.default_rng(self.calib_seed.spawn(1)[0])
        n = 0
        for batch in balanced_batches(self.train_samples, self.cfg.train.batch_size, batch_rng,
                                      supervised=self.cfg.supervised):
            features = self._features(batch)
            m_gt = None
            if self.cfg.supervised:
                m_gt = anomaly_synth.downsample_gt(batch.masks, tuple(features.shape[-2:])).to(self.device)
            model.forward_train_features(features, m_gt, synth_rng)
            n += 1
        for m, momentum in zip(norms, momenta):
            m.momentum = momentum
        model.eval()
        return n

    def fit(self, output_dir=None) -> Optional[Path]:
        """Train for the configured epochs; write the final checkpoint when ``output_dir`` is given."""
        tc = self.cfg.train
        start = time.perf_counter()
        for _ in range(self.epoch, tc.epochs):
            rec = self.train_epoch()
            if tc.log_every and (rec["epoch"] % tc.log_every == 0 or rec["epoch"] == tc.epochs - 1):
                logger.info("seed %s epoch %d loss %.4f (seg %.4f cls %.4f) lr %s %.1fs",
                            self.seed, rec["epoch"], rec["loss"], rec["l_seg"], rec["l_cls"],
                            rec["lr"], time.perf_counter() - start)
            if output_dir and tc.snapshot_every and (rec["epoch"] + 1) % tc.snapshot_every == 0:
                save_checkpoint(self.model, self.cfg, Path(output_dir) / f"snapshot_{rec['epoch'] + 1:04d}.pt",
                                self.epoch, self.seed)
        if tc.recalibrate_bn:
            self.recalibrate_batchnorm()
        self.model.eval()
        if output_dir is None:
            return None
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "history.json").write_text(json.dumps(self.history, indent=2))
        dump_config(self.cfg, output_dir / "config.yaml")
        return save_checkpoint(self.model, self.cfg, output_dir / "checkpoint.pt", self.epoch, self.seed)


def train(cfg: RunConfig, seed: Optional[int] = None, output_dir=None, device=None) -> Path:
    """Train one seed and return the checkpoint path (final-epoch weights)."""
    seed = cfg.seeds[0] if seed is None else seed
    output_dir = Path(output_dir) if output_dir else Path(cfg.output_dir) / f"seed_{seed}"
    return Trainer(cfg, seed, device).fit(output_dir)


@torch.no_grad()
def infer_samples(model: SuperSimpleNet, samples: Sequence[Sample], batch_size: int = 16, device=None):
    """Return ``(maps [N, H, W], scores [N])`` as numpy arrays."""
    model.eval()
    device = device or next(model.adaptor.parameters()).device
    maps, scores = [], []
    for start in range(0, len(samples), batch_size):
        images = torch.stack([s.image for s in samples[start:start + batch_size]]).to(device)
        m, s = model.predict(images)
        maps.append(m.cpu().numpy())
        scores.append(s.cpu().numpy())
    return np.concatenate(maps), np.concatenate(scores)


def evaluate(checkpoint: Union[str, Path, SuperSimpleNet], spec: Optional[DatasetSpec] = None,
             cfg: Optional[RunConfig] = None, test_samples: Optional[Sequence[Sample]] = None,
             batch_size: int = 16, fpr_limit: float = 0.3, device=None) -> MetricsReport:
    """Score the test split and compute detection / localisation metrics."""
    seed = None
    if isinstance(checkpoint, SuperSimpleNet):
        model = checkpoint
        if cfg is None and spec is None and test_samples is None:
            raise ValueError("evaluating a bare model needs a dataset spec, config or samples")
    else:
        model, cfg, meta = load_checkpoint(checkpoint, device)
        seed = meta["seed"]
    if spec is None and cfg is not None:
        spec = cfg.dataset
    if cfg is not None and spec is not None:
        trained = cfg.dataset.resolved_resolution()
        if spec.resolved_resolution() != trained:
            raise ValueError(f"dataset resolution {spec.resolved_resolution()} != checkpoint resolution {trained}")
    if test_samples is None:
        _, test_samples = load(spec)
    maps, scores = infer_samples(model, test_samples, batch_size)
    labels = np.array([s.label for s in test_samples])
    gts = [s.gt_mask.numpy() if s.gt_mask is not None else np.zeros(maps.shape[1:], dtype=bool)
           for s in test_samples]
    category = spec.category if spec is not None else test_samples[0].category
    bundle = EvalBundle(scores=scores, labels=labels, maps=maps, gt_masks=np.stack(gts), category=category)
    rep = report(bundle, fpr_limit)
    rep.seed = seed
    return rep


def _sync(device: torch.device):
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def benchmark(model: SuperSimpleNet, image_size, device=None, warmup: int = 200, iterations: int = 1000,
              throughput_batch: int = 16, repeats: int = 5) -> dict:
    """Latency / throughput / size measurement.

    Latency: ``warmup`` untimed then ``iterations`` timed batch-1 passes, each
    synchronized. Throughput: ``ceil(iterations / throughput_batch)`` timed
    batches of ``throughput_batch`` images. Each repeat yields one latency mean and one
    throughput figure; the report holds mean and std over ``repeats``.
    """
    device = resolve_device(device) if not isinstance(device, torch.device) else device
    model = model.to(device).eval()
    h, w = image_size
    gen = torch.Generator().manual_seed(0)
    single = torch.randn(1, 3, h, w, generator=gen).to(device)
    batch = torch.randn(throughput_batch, 3, h, w, generator=gen).to(device)
    if device.type == "cuda":
        torch.cuda.reset_peak_memory_stats(device)
    latencies, throughputs = [], []
    with torch.inference_mode():
        for _ in range(repeats):
            for _ in range(warmup):
                model.predict(single)
            _sync(device)
            times = []
            for _ in range(iterations):
                t0 = time.perf_counter()
                model.predict(single)
                _sync(device)
                times.append(time.perf_counter() - t0)
            latencies.append(1000.0 * float(np.mean(times)))
            n_batches = max(1, math.ceil(iterations / throughput_batch))
            _sync(device)
            t0 = time.perf_counter()
            for _ in range(n_batches):
                model.predict(batch)
            _sync(device)
            throughputs.append(n_batches * throughput_batch / (time.perf_counter() - t0))
    if device.type == "cuda":
        peak_mb = torch.cuda.max_memory_allocated(device) / 2 ** 20
    else:
        peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    total = sum(p.numel() for p in model.parameters())
    trainable = sum(p.numel() for p in model.trainable_parameters())
    return {
        "device": str(device),
        "image_size": [h, w],
        "latency_ms": {"mean": float(np.mean(latencies)), "std": float(np.std(latencies))},
        "throughput_img_s": {"mean": float(np.mean(throughputs)), "std": float(np.std(throughputs))},
        "param_count": int(total),
        "trainable_param_count": int(trainable),
        "peak_memory_mb": float(peak_mb),
        "protocol": {"warmup": warmup, "iterations": iterations,
                     "throughput_batch": throughput_batch, "repeats": repeats},
    }
