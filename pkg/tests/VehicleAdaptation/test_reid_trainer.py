"""ATTNet の学習のテスト。"""
from pathlib import Path

import numpy as np
import pytest
import torch

from VehicleAdaptation.attnet import extract_embeddings
from VehicleAdaptation.checkpoint import load_checkpoint, save_checkpoint
from VehicleAdaptation.dan_trainer import train_dan, translate_dataset
from VehicleAdaptation.dataset_index import DatasetIndex, Split
from VehicleAdaptation.reid_trainer import attnet_from_checkpoint, build_attnet_model, train_reid
from VehicleAdaptation.retrieval_metrics import Protocol, evaluate
from VehicleAdaptation.run_log import RunLog
from VehicleAdaptation.synthetic import SyntheticSpec, generate_synthetic_domains
from VehicleAdaptation.train_config import TrainConfig

TINY = [
    "reid.image_size=16",
    "reid.batch_size=4",
    "reid.epochs=2",
    "reid.backbone=tiny",
    "reid.hidden_dims=[16,8]",
    "reid.batches_per_epoch=2",
    "reid.lr_schedule=[[1,0.01],[1,0.001]]",
    "device=\"cpu\"",
]


@pytest.fixture(scope="module")
def tiny_index(tmp_path_factory: pytest.TempPathFactory) -> DatasetIndex:
    out = tmp_path_factory.mktemp("tiny")
    source, _ = generate_synthetic_domains(SyntheticSpec(num_identities=4, images_per_id=3, image_size=16), out)
    return source


def _config(tmp_path: Path, *extra: str) -> TrainConfig:
    return TrainConfig(stage="reid").with_overrides(TINY + [f"checkpoint_dir=\"{tmp_path / 'ckpts'}\"", *extra])


def test_zero_epochs_returns_initialization(tmp_path: Path, tiny_index: DatasetIndex) -> None:
    config = _config(tmp_path, "reid.epochs=0")
    ckpt = train_reid(config, tiny_index)
    reference = build_attnet_model(config, 4).state_dict()
    assert ckpt.loss_history == []
    assert ckpt.meta["num_classes"] == 4
    for name, tensor in reference.items():
        assert torch.equal(ckpt.tensors[name], tensor), name


def test_history_once_per_epoch_with_schedule(tmp_path: Path, tiny_index: DatasetIndex) -> None:
    """損失履歴はエポックごとに1件、学習率はスケジュールどおり。"""
    run_log = RunLog(tmp_path / "run_log.jsonl")
    ckpt = train_reid(_config(tmp_path), tiny_index, run_log=run_log)
    assert [h["epoch"] for h in ckpt.loss_history] == [1, 2]
    assert [h["lr"] for h in ckpt.loss_history] == [0.01, 0.001]
    assert all(np.isfinite(h["total"]) for h in ckpt.loss_history)
    assert len(run_log.read()) == 2


def test_same_config_same_history(tmp_path: Path, tiny_index: DatasetIndex) -> None:
    a = train_reid(_config(tmp_path / "a"), tiny_index)
    b = train_reid(_config(tmp_path / "b"), tiny_index)
    assert a.loss_history == b.loss_history


def test_checkpoint_restores_model(tmp_path: Path, tiny_index: DatasetIndex) -> None:
    ckpt = train_reid(_config(tmp_path, "reid.epochs=1"), tiny_index)
    loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "final"))
    before = extract_embeddings(attnet_from_checkpoint(ckpt), tiny_index.records)
    after = extract_embeddings(attnet_from_checkpoint(loaded), tiny_index.records)
    assert np.array_equal(before, after)


def test_empty_index_rejected(tmp_path: Path) -> None:
    with pytest.raises(ValueError):
        train_reid(_config(tmp_path), DatasetIndex(records=[]))


@pytest.mark.slow
def test_synthetic_smoke_rank1(tmp_path: Path) -> None:
    """変換済み合成データで5エポック学習し、ターゲットドメインで rank-1 >= 0.9。"""
    source, target = generate_synthetic_domains(SyntheticSpec(), tmp_path)
    base = TrainConfig.load(Path(__file__).parent.parent.parent / "configs" / "synthetic_smoke.json")
    dan_config = base.with_overrides([f"checkpoint_dir=\"{tmp_path / 'dan'}\""])
    translated = translate_dataset(train_dan(dan_config, source, target), source, "source_to_target", tmp_path)

    reid_config = TrainConfig.from_dict({**base.to_dict(), "stage": "reid", "checkpoint_dir": str(tmp_path / "reid")})
    model = attnet_from_checkpoint(train_reid(reid_config, translated))

    groups = target.ids_to_records()
    gallery = target.subset([positions[0] for positions in groups.values()], split=Split.GALLERY)
    query = target.subset([p for positions in groups.values() for p in positions[1:]], split=Split.QUERY)
    report = evaluate(
        query, gallery,
        extract_embeddings(model, query.records), extract_embeddings(model, gallery.records),
        Protocol.PLAIN, max_rank=5,
    )
    assert report.rank(1) >= 0.9
