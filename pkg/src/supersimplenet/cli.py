"""Command-line entry point: train, evaluate, predict, benchmark, make-toy, ablation.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All commands overwrite their outputs, so reruns with the same inputs and
seeds reproduce the same files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from . import engine
from .config import ABLATION_PRESETS, ConfigError, RunConfig, apply_preset, dump_config, load_config
from .datasets import DatasetError, IMAGE_SUFFIXES, make_toy_corpus, read_image
from .metrics import aggregate, rows_to_csv
from .postprocess import postprocess

logger = logging.getLogger("supersimplenet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    if not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config, args.set or [])
    cfg.validate()
    return cfg


def _check_dataset_root(cfg: RunConfig):
    root = Path(cfg.dataset.root)
    if not cfg.dataset.root or not root.exists():
        raise UsageError(f"dataset root does not exist: {root}")


def _categories(cfg: RunConfig) -> List[str]:
    return list(cfg.categories) or [cfg.dataset.category]


def _for_category(cfg: RunConfig, category: str) -> RunConfig:
    data = cfg.to_dict()
    data["dataset"]["category"] = category
    return RunConfig.from_dict(data)


def _run_dir(root: Path, category: str, seed: int) -> Path:
    return root / (category or "default") / f"seed_{seed}"


def _add_file_log(path: Path) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def _train_job(cfg_dict: dict, seed: int, out_dir: str) -> str:
    cfg = RunConfig.from_dict(cfg_dict)
    handler = _add_file_log(Path(out_dir) / "train.log")
    try:
        return str(engine.train(cfg, seed=seed, output_dir=out_dir))
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def _train_all(cfg: RunConfig, root: Path, parallel: int = 1) -> List[Path]:
    """Train every (category, seed) pair; returns checkpoint paths in listing order."""
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.yaml")
    jobs = []
    for category in _categories(cfg):
        cat_cfg = _for_category(cfg, category)
        for seed in cfg.seeds:
            jobs.append((cat_cfg.to_dict(), seed, str(_run_dir(root, category, seed))))
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            paths = list(pool.map(_train_job, *zip(*jobs)))
    else:
        paths = [_train_job(*job) for job in jobs]
    for p in paths:
        logger.info("checkpoint written: %s", p)
    return [Path(p) for p in paths]


def _evaluate_all(checkpoints: Sequence[Path], overrides: Sequence[str], out_dir: Path,
                  fpr_limit: float = 0.3) -> List[dict]:
    from .config import apply_overrides

    reports = []
    for ckpt in checkpoints:
        if not Path(ckpt).exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        model, cfg, meta = engine.load_checkpoint(ckpt)
        if overrides:
            cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), overrides))
        _check_dataset_root(cfg)
        rep = engine.evaluate(model, cfg=cfg, fpr_limit=fpr_limit)
        rep.seed = meta["seed"]
        logger.info("%s: %s", ckpt, rep.to_json())
        reports.append(rep)
    rows = aggregate(reports)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"reports": [json.loads(r.to_json()) for r in reports], "aggregate": rows, "fpr_limit": fpr_limit}
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2))
    (out_dir / "metrics.csv").write_text(rows_to_csv(rows))
    mean = rows[-1]
    print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in mean.items()))
    return rows


def _checkpoints_in(run_dir: Path) -> List[Path]:
    found = sorted(run_dir.rglob("checkpoint.pt"))
    cfg_path = run_dir / "config.yaml"
    if cfg_path.exists():
        order = _categories(load_config(cfg_path))
        rank = {c: i for i, c in enumerate(order)}
        found.sort(key=lambda p: (rank.get(p.parent.parent.name, len(rank)), str(p)))
    return found


def _overlay(image: Image.Image, amap: np.ndarray, score: float) -> Image.Image:
    import matplotlib

    cmap = matplotlib.colormaps["jet"]
    prob = 1.0 / (1.0 + np.exp(-amap))  # maps are logits
    colour = (cmap(prob)[..., :3] * 255).astype(np.uint8)
    blended = Image.blend(image.convert("RGB"), Image.fromarray(colour), 0.5)
    draw = ImageDraw.Draw(blended)
    text = f"{score:.3f}"
    left, top, right, bottom = draw.textbbox((0, 0), text)
    x = blended.width - (right - left) - 4
    draw.rectangle([x - 2, 0, blended.width, bottom - top + 6], fill=(0, 0, 0))
    draw.text((x, 2), text, fill=(255, 255, 255))
    return blended


def _image_paths(target: Path) -> List[Path]:
    if target.is_dir():
        paths = sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise UsageError(f"no images found in {target}")
        return paths
    if not target.exists():
        raise UsageError(f"input not found: {target}")
    return [target]


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    _check_dataset_root(cfg)
    _train_all(cfg, Path(cfg.output_dir), args.parallel)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    checkpoints = [Path(p) for p in args.checkpoint or []]
    if args.run_dir:
        checkpoints += _checkpoints_in(Path(args.run_dir))
    if not checkpoints:
        raise UsageError("give --checkpoint and/or --run-dir")
    out = Path(args.output or (args.run_dir or Path(checkpoints[0]).parent))
    _evaluate_all(checkpoints, args.set or [], out, args.fpr_limit)
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model, cfg, _ = engine.load_checkpoint(ckpt)
    resolution = cfg.dataset.resolved_resolution()
    out = Path(args.output)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    overlays = args.overlay or cfg.export_overlays
    if overlays:
        (out / "overlays").mkdir(exist_ok=True)
    rows = []
    for path in _image_paths(Path(args.input)):
        try:
            with Image.open(path) as img:
                original = img.convert("RGB")
        except (UnidentifiedImageError, OSError) as exc:
            raise UsageError(f"cannot read image {path}: {exc}") from exc
        x = read_image(path, resolution)[None]
        with torch.no_grad():
            seg_logits, score = model.forward_infer(x)
            amap = postprocess(seg_logits, (original.height, original.width))[0].numpy().astype(np.float32)
        score = float(score[0])
        np.save(out / "maps" / f"{path.stem}.npy", amap)
        if overlays:
            _overlay(original, amap, score).save(out / "overlays" / f"{path.stem}.png")
        rows.append((str(path), score))
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "score"])
        writer.writerows((p, repr(s)) for p, s in rows)
    for p, s in rows:
        print(f"{p},{s:.6f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.checkpoint:
        model, cfg, _ = engine.load_checkpoint(args.checkpoint)
    elif args.config:
        cfg = _load_run_config(args)
        model = engine.build_model(cfg)
    else:
        raise UsageError("give --checkpoint or --config")
    size = tuple(args.image_size) if args.image_size else cfg.dataset.resolved_resolution()
    result = engine.benchmark(model, size, device=args.device, warmup=args.warmup, iterations=args.iterations,
                              throughput_batch=args.batch, repeats=args.repeats)
    text = json.dumps(result, indent=2)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    print(text)
    return EXIT_OK


def cmd_make_toy(args) -> int:
    h, w = args.resolution
    root = make_toy_corpus(args.root, args.normal, args.defect, (h, w), rng=args.seed, category=args.category,
                           train_defect_fraction=args.train_defect_fraction)
    print(root)
    return EXIT_OK


def cmd_ablation(args) -> int:
    if args.preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown ablation preset {args.preset!r}; choose from {sorted(ABLATION_PRESETS)}")
    cfg = apply_preset(_load_run_config(args), args.preset)
    cfg.validate()
    _check_dataset_root(cfg)
    root = Path(cfg.output_dir) / f"ablation_{args.preset}"
    checkpoints = _train_all(cfg, root, args.parallel)
    _evaluate_all(checkpoints, [], root)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supersimplenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p, required=True):
        p.add_argument("--config", required=required, help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path override, e.g. train.epochs=2 (repeatable)")

    p = sub.add_parser("train", help="train one model per category and seed")
    config_args(p)
    p.add_argument("--parallel", type=int, default=1, help="train seeds in N worker processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score checkpoints and aggregate metrics")
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--run-dir", help="collect every checkpoint.pt below this directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override the stored config, e.g. dataset.root=...")
    p.add_argument("--output", help="directory for metrics.json / metrics.csv")
    p.add_argument("--fpr-limit", type=float, default=0.3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="write anomaly maps and scores for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True)
    p.add_argument("--overlay", action="store_true", help="also write colour overlays with the score")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="latency / throughput / size measurement")
    p.add_argument("--checkpoint")
    config_args(p, required=False)
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--device")
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16, help="throughput batch size")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--output", help="write the JSON report here")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("make-toy", help="write a synthetic mvtec_like corpus")
    p.add_argument("--root", required=True)
    p.add_argument("--normal", type=int, default=200)
    p.add_argument("--defect", type=int, default=50)
    p.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--category", default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-defect-fraction", type=float, default=0.0,
                   help="share of defective images placed in train/ for supervised runs")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("ablation", help="train and evaluate with an ablation preset")
    p.add_argument("preset", help=", ".join(ABLATION_PRESETS))
    config_args(p)
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, engine.TrainingError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
