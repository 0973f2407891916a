import pytest

from framedistill.config import KEY_OWNER, PRESETS, RunConfig, from_flat, load_config
from framedistill.errors import ConfigError


def test_defaults_validate_and_flatten():
    cfg = RunConfig()
    assert cfg.validate() == []
    flat = cfg.flat()
    assert set(flat) == set(KEY_OWNER)
    assert from_flat(flat) == cfg


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        from_flat({"nope": 1, "batch_size": "eight", "base_lr": True})
    assert len(err.value.problems) == 3


def test_cross_section_validation():
    with pytest.raises(ConfigError) as err:
        from_flat({"global_size": 48, "local_size": 20})
    assert len(err.value.problems) == 2


def test_hash_ignores_paths_only():
    cfg = RunConfig()
    assert cfg.replace(data_dir="/a", out_dir="/b").hash() == cfg.hash()
    assert cfg.replace(seed=1).hash() != cfg.hash()
    hashes = {cfg.replace(loss_mode=m).hash() for m in ("both", "dense_only", "global_only")}
    hashes |= {cfg.replace(baseline_mode=m).hash() for m in ("dino_frames", "dino_precrop", "time_aug")}
    assert len(hashes) == 6


def test_yaml_round_trip(tmp_path):
    cfg = load_config(preset="toy", overrides={"seed": 4})
    path = cfg.dump(tmp_path / "c.yaml")
    assert path.read_text().startswith(f"# config_hash: {cfg.hash()}")
    assert load_config(path) == cfg


def test_nested_yaml_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  seed: 1\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_presets_are_valid():
    for name in PRESETS:
        assert load_config(preset=name).validate() == []


def test_overrides_beat_file_and_preset(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("epochs: 3\nseed: 2\n")
    cfg = load_config(path, {"seed": 9}, preset="toy")
    assert cfg.train.epochs == 3 and cfg.train.seed == 9
    assert cfg.train.batch_size == PRESETS["toy"]["batch_size"]
