"""学習設定のテスト。"""
from pathlib import Path

import pytest

from VehicleAdaptation.train_config import TrainConfig, config_hash, resolve_data_path


def test_defaults() -> None:
    config = TrainConfig()
    assert config.dan.lr == 2e-4
    assert config.dan.batch_size == 16
    assert config.dan.epochs == 6
    assert (config.dan.lambda_cyc, config.dan.lambda_id, config.dan.lambda_style) == (10.0, 5.0, 1.0)
    assert config.reid.epochs == 55
    assert config.reid.lr_schedule == [[50, 0.1], [5, 0.01]]


def test_lr_schedule() -> None:
    """最初の50エポックは0.1、残り5エポックは0.01。"""
    reid = TrainConfig().reid
    assert reid.lr_at(0) == 0.1
    assert reid.lr_at(49) == 0.1
    assert reid.lr_at(50) == 0.01
    assert reid.lr_at(54) == 0.01
    assert reid.lr_at(100) == 0.01


def test_overrides_parse_json_values() -> None:
    config = TrainConfig().with_overrides(["dan.epochs=2", "reid.backbone=tiny", "reid.hidden_dims=[8,4]", "seed=3"])
    assert config.dan.epochs == 2
    assert config.reid.backbone == "tiny"
    assert config.reid.hidden_dims == [8, 4]
    assert config.seed == 3


def test_unknown_keys_rejected(tmp_path: Path) -> None:
    with pytest.raises(KeyError, match="dan.learning_rate"):
        TrainConfig().with_overrides(["dan.learning_rate=1"])
    with pytest.raises(KeyError, match="reid.nope"):
        TrainConfig.from_dict({"reid": {"nope": 1}})
    with pytest.raises(ValueError):
        TrainConfig().with_overrides(["dan.epochs"])
    with pytest.raises(ValueError):
        TrainConfig(stage="gan")


def test_save_load_and_hash(tmp_path: Path) -> None:
    config = TrainConfig().with_overrides(["dan.epochs=1"])
    loaded = TrainConfig.load(config.save(tmp_path / "config.json"))
    assert loaded == config
    assert loaded.config_hash() == config.config_hash()
    assert config.config_hash() != TrainConfig().config_hash()
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


def test_shipped_configs_load() -> None:
    configs = Path(__file__).parent.parent.parent / "configs"
    for path in sorted(configs.glob("*.json")):
        TrainConfig.load(path)


def test_data_root_env(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setenv("DAVR_DATA_ROOT", str(tmp_path))
    assert resolve_data_path("VeRi") == tmp_path / "VeRi"
    assert resolve_data_path(str(tmp_path / "abs")) == tmp_path / "abs"
    assert resolve_data_path(None) is None
    monkeypatch.delenv("DAVR_DATA_ROOT")
    assert resolve_data_path("VeRi") == Path("VeRi")
