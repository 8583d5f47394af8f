import pytest

from superpose.config import ExperimentConfig, default_config_path, from_dict, load_config
from superpose.errors import ConfigError


def test_default_file_matches_dataclass_defaults():
    cfg = load_config(default_config_path())
    ref = ExperimentConfig()
    assert cfg.to_dict() == ref.to_dict()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"model": {"hiden": 32}})
    with pytest.raises(ConfigError, match="unknown section"):
        from_dict({"modle": {}})
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"experiment": {"sed": 1}})


def test_type_checks():
    with pytest.raises(ConfigError):
        from_dict({"model": {"hidden": "64"}})
    assert from_dict({"superpose": {"lr": 1}}).superpose.lr == 1.0
    with pytest.raises(ConfigError):
        from_dict({"experiment": {"mode": "3d"}})
    with pytest.raises(ConfigError):
        from_dict({"superpose": {"global_source": "mix"}})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_relative_corpus_paths(tmp_path):
    (tmp_path / "a.txt").write_text("x" * 100)
    (tmp_path / "c.toml").write_text('[corpus]\nbase = "a.txt"\nfine = "a.txt"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.corpus_path("base") == str(tmp_path / "a.txt")
    (tmp_path / "d.toml").write_text('[corpus]\nbase = "missing.txt"\n')
    with pytest.raises(ConfigError):
        load_config(tmp_path / "d.toml")


def test_overrides_and_hash():
    cfg = ExperimentConfig()
    moved = cfg.with_overrides(out_dir="/elsewhere")
    assert moved.out_dir == "/elsewhere" and moved.hash() == cfg.hash()
    assert cfg.with_overrides(seed=3).hash() != cfg.hash()
    assert cfg.with_overrides(mode="2d").train_run().mode == "2d"
    assert cfg.with_overrides() is cfg
