import csv
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from supersimplenet.cli import main


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--root", str(base / "data"), "--normal", "16", "--defect", "6",
                 "--resolution", "32", "32"]) == 0
    cfg = {
        "dataset": {"root": str(base / "data"), "category": "toy", "resolution": [32, 32]},
        "backbone": {"name": "resnet18", "weights": "random"},
        "head": {"seg_hidden": 32, "cls_channels": 8},
        "noise": {"perlin_threshold": 0.2},
        "train": {"epochs": 3, "batch_size": 8, "scheduler_milestones": [], "cache_features": True},
        "output_dir": str(base / "runs"),
        "seeds": [0, 1],
    }
    cfg_path = base / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(cfg_path), "--set", "train.epochs=1"]) == 0
    return base, cfg_path


def test_train_writes_one_dir_per_seed(toy_run):
    base, _ = toy_run
    for seed in (0, 1):
        run = base / "runs" / "toy" / f"seed_{seed}"
        assert (run / "checkpoint.pt").exists() and (run / "train.log").exists()
        assert yaml.safe_load((run / "config.yaml").read_text())["train"]["epochs"] == 1
    echoed = yaml.safe_load((base / "runs" / "config.yaml").read_text())
    assert echoed["train"]["epochs"] == 1 and echoed["seeds"] == [0, 1]


def test_evaluate_aggregates_json_and_csv(toy_run, capsys):
    base, _ = toy_run
    out = base / "eval"
    assert main(["evaluate", "--run-dir", str(base / "runs"), "--output", str(out)]) == 0
    payload = json.loads((out / "metrics.json").read_text())
    assert len(payload["reports"]) == 2
    rows = payload["aggregate"]
    assert [r["category"] for r in rows] == ["toy", "mean"]
    assert "auroc_det_std" in rows[0]
    with open(out / "metrics.csv") as fh:
        parsed = list(csv.DictReader(fh))
    for row, line in zip(rows, parsed):
        for key, value in row.items():
            assert (line[key] == value) if key == "category" else float(line[key]) == value
    assert "auroc_det=" in capsys.readouterr().out


def test_predict_single_image(toy_run, tmp_path):
    base, _ = toy_run
    image = tmp_path / "probe.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (45, 70, 3), dtype=np.uint8)).save(image)
    ckpt = base / "runs" / "toy" / "seed_0" / "checkpoint.pt"
    args = ["predict", "--checkpoint", str(ckpt), "--input", str(image), "--output", str(tmp_path / "out"), "--overlay"]
    assert main(args) == 0
    amap = np.load(tmp_path / "out" / "maps" / "probe.npy")
    assert amap.shape == (45, 70) and np.isfinite(amap).all()
    rows = list(csv.reader(open(tmp_path / "out" / "scores.csv")))
    assert rows[0] == ["image", "score"] and len(rows) == 2
    assert Image.open(tmp_path / "out" / "overlays" / "probe.png").size == (70, 45)
    first = {p.name: p.read_bytes() for p in (tmp_path / "out").rglob("*.*")}
    assert main(args) == 0
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "out").rglob("*.*")}


def test_missing_dataset_root_exit_2(toy_run, tmp_path, capsys):
    _, cfg_path = toy_run
    missing = tmp_path / "nowhere"
    assert main(["train", "--config", str(cfg_path), "--set", f"dataset.root={missing}"]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_yaml_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  epochs: 2\n  lr: [1, 2\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "line" in capsys.readouterr().err


def test_usage_errors(toy_run, tmp_path):
    _, cfg_path = toy_run
    assert main(["ablation", "not_a_preset", "--config", str(cfg_path)]) == 2
    assert main(["train", "--config", str(cfg_path), "--set", "train.nope=1"]) == 2
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.pt")]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "x.png"
    bad.write_text("not an image")
    ckpt = toy_run[0] / "runs" / "toy" / "seed_0" / "checkpoint.pt"
    assert main(["predict", "--checkpoint", str(ckpt), "--input", str(bad), "--output", str(tmp_path / "o")]) == 2


def test_benchmark_from_config(toy_run, tmp_path):
    _, cfg_path = toy_run
    out = tmp_path / "bench.json"
    assert main(["benchmark", "--config", str(cfg_path), "--warmup", "1", "--iterations", "4",
                 "--batch", "2", "--repeats", "1", "--output", str(out)]) == 0
    assert json.loads(out.read_text())["image_size"] == [32, 32]


def test_ablation_no_cls(toy_run):
    base, cfg_path = toy_run
    assert main(["ablation", "no_cls", "--config", str(cfg_path), "--set", "train.epochs=1", "--set", "seeds=[0]"]) == 0
    root = base / "runs" / "ablation_no_cls"
    assert (root / "metrics.json").exists()
    assert yaml.safe_load((root / "config.yaml").read_text())["head"]["cls_enabled"] is False
