"""pair_sampler のテスト。"""
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from VehicleAdaptation.dataset_index import DatasetIndex, DatasetRecord
from VehicleAdaptation.pair_sampler import VerificationPairSampler, sample_verification_pairs


def _index(num_ids: int = 5, per_id: int = 4) -> DatasetIndex:
    records = [DatasetRecord(f"{vid}_{n}.png", vid) for vid in range(num_ids) for n in range(per_id)]
    return DatasetIndex(records=records)


def test_half_positive() -> None:
    """batch=16, pos_ratio=0.5 → 正例8組・負例8組。"""
    selection = VerificationPairSampler(_index()).select(16, 0.5, np.random.default_rng(0))
    assert int(selection.same_flags.sum()) == 8
    assert len(selection.records_a) == 16


def test_flags_match_ids() -> None:
    selection = VerificationPairSampler(_index()).select(32, 0.3, np.random.default_rng(1))
    assert np.array_equal(selection.same_flags, (selection.ids_a == selection.ids_b).astype(np.int64))
    assert abs(int(selection.same_flags.sum()) - round(32 * 0.3)) <= 1


@pytest.mark.parametrize("batch, ratio", [(16, 0.1), (4, 0.3), (16, 0.5), (7, 0.25), (32, 0.3)])
def test_positive_fraction_over_many_batches(batch: int, ratio: float) -> None:
    """1000 バッチでの正例の割合が pos_ratio から ±2% 以内。各バッチは ±1 組以内。"""
    sampler = VerificationPairSampler(_index())
    rng = np.random.default_rng(0)
    positives = 0
    for _ in range(1000):
        flags = sampler.select(batch, ratio, rng).same_flags
        assert abs(int(flags.sum()) - batch * ratio) <= 1
        positives += int(flags.sum())
    assert abs(positives / (1000 * batch) - ratio) <= 0.02


def test_positive_pairs_use_distinct_images() -> None:
    selection = VerificationPairSampler(_index()).select(16, 1.0, np.random.default_rng(2))
    for a, b in zip(selection.records_a, selection.records_b):
        assert a.vehicle_id == b.vehicle_id
        assert a.image_path != b.image_path


def test_zero_ratio_gives_only_negatives() -> None:
    """pos_ratio=0 → 全て負例。"""
    selection = VerificationPairSampler(_index()).select(16, 0.0, np.random.default_rng(0))
    assert not selection.same_flags.any()


def test_same_seed_same_sequence() -> None:
    """同じシードなら同じID列になることを確認。"""
    sampler = VerificationPairSampler(_index())
    a = sampler.select(16, 0.5, np.random.default_rng(7))
    b = sampler.select(16, 0.5, np.random.default_rng(7))
    assert np.array_equal(a.ids_a, b.ids_a)
    assert np.array_equal(a.ids_b, b.ids_b)


def test_impossible_pairs_raise() -> None:
    single_images = DatasetIndex(records=[DatasetRecord(f"{i}.png", i) for i in range(3)])
    with pytest.raises(ValueError):
        VerificationPairSampler(single_images).select(4, 0.5, np.random.default_rng(0))
    one_id = _index(num_ids=1)
    with pytest.raises(ValueError):
        VerificationPairSampler(one_id).select(4, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        VerificationPairSampler(_index()).select(4, 1.5, np.random.default_rng(0))


def test_sample_loads_pair_images(tmp_path: Path) -> None:
    """画像を読み込んだバッチを返し、同じ seed なら同じ内容になる。"""
    records = []
    for vid in range(3):
        for n in range(2):
            path = tmp_path / f"{vid}_{n}.png"
            Image.new("RGB", (20, 12), (40 * vid, 60 * n, 90)).save(path)
            records.append(DatasetRecord(str(path), vid))
    index = DatasetIndex(records=records)

    batch = sample_verification_pairs(index, 4, 0.5, seed=3, image_size=8)
    assert len(batch) == 4
    assert batch.images_a.shape == (4, 3, 8, 8)
    assert batch.images_b.shape == (4, 3, 8, 8)
    assert int(batch.same_flags.sum()) == 2
    again = sample_verification_pairs(index, 4, 0.5, seed=3, image_size=8)
    assert np.array_equal(batch.ids_a.numpy(), again.ids_a.numpy())
    assert np.array_equal(batch.images_b.numpy(), again.images_b.numpy())
