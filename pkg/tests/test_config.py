import pytest
import yaml

from supersimplenet.config import (
    ABLATION_PRESETS,
    ConfigError,
    DatasetSpec,
    RunConfig,
    apply_preset,
    dump_config,
    load_config,
)


def test_defaults_follow_training_recipe():
    cfg = RunConfig()
    assert (cfg.train.epochs, cfg.train.batch_size) == (300, 32)
    assert (cfg.train.lr_adaptor, cfg.train.lr_heads, cfg.train.weight_decay) == (1e-4, 2e-4, 1e-5)
    assert cfg.train.scheduler_milestones == [240, 270] and cfg.train.scheduler_gamma == 0.4
    assert cfg.noise.gauss_sigma == 0.015 and cfg.noise.anomaly_probability == 0.5
    assert cfg.loss.th == 0.5 and cfg.backbone.layer_indices == (2, 3)


def test_supervision_drives_grad_rules():
    unsup = RunConfig()
    assert unsup.stop_grad_to_seg and unsup.clip_grad_norm is None
    sup = RunConfig.from_dict({"dataset": {"supervision": "supervised"}})
    assert not sup.stop_grad_to_seg and sup.clip_grad_norm == 1.0


@pytest.mark.parametrize("family,expected", [("mvtec_like", 0.2), ("visa_like", 0.6), ("ksdd2", 0.6)])
def test_perlin_threshold_follows_family(family, expected):
    assert RunConfig.from_dict({"dataset": {"family": family}}).noise.perlin_threshold == expected
    explicit = RunConfig.from_dict({"dataset": {"family": family}, "noise": {"perlin_threshold": 0.4}})
    assert explicit.noise.perlin_threshold == 0.4


def test_resolution_defaults_and_divisibility():
    assert DatasetSpec(family="ksdd2").resolved_resolution() == (232, 640)
    assert DatasetSpec(family="sensum", category="capsule").resolved_resolution() == (192, 320)
    with pytest.raises(ConfigError):
        DatasetSpec(resolution=(100, 100)).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(family="sensum", category="softgel").validate()  # no fold


def test_load_with_overrides_and_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"train": {"epochs": 5}, "seeds": [0, 1]}))
    cfg = load_config(path, ["train.epochs=2", "noise.gauss_sigma=0.1", "dataset.resolution=[64, 64]"])
    assert cfg.train.epochs == 2 and cfg.noise.gauss_sigma == 0.1 and cfg.dataset.resolution == (64, 64)
    dump_config(cfg, tmp_path / "out.yaml")
    assert load_config(tmp_path / "out.yaml").to_dict() == cfg.to_dict()


def test_parse_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  epochs: 3\n  lrs: [1, 2\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(path)
    good = tmp_path / "good.yaml"
    good.write_text("train:\n  epochs: 3\n")
    with pytest.raises(ConfigError, match="key.path=value"):
        load_config(good, ["noequals"])


def test_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ConfigError, match="train.nope"):
        RunConfig.from_dict({"train": {"nope": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"epochs": 10, "scheduler_milestones": [12]}}).validate()
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"noise": {"perlin_threshold": 1.5}}).validate()


@pytest.mark.parametrize("preset", sorted(ABLATION_PRESETS))
def test_presets_apply_cleanly(preset):
    cfg = apply_preset(RunConfig(), preset)
    cfg.validate()
    assert cfg.to_dict() != RunConfig().to_dict()


def test_preset_toggles():
    assert apply_preset(RunConfig(), "no_cls").head.cls_enabled is False
    old = apply_preset(RunConfig(), "old_train")
    assert old.train.scheduler_milestones == [] and old.clip_grad_norm is None
    assert not old.stop_grad_to_seg and not old.loss.seg_focal
    assert apply_preset(RunConfig(), "no_anom").noise.synthetic_enabled is False
    with pytest.raises(ConfigError):
        apply_preset(RunConfig(), "bogus")


def test_shipped_configs_validate():
    from pathlib import Path

    shipped = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))
    assert shipped
    for path in shipped:
        load_config(path).validate()
