"""検証ブランチ用の正例・負例ペアのサンプリング。"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .dataset_index import DatasetIndex, DatasetRecord
from .image_loader import load_image_batch


@dataclass
class PairSelection:
    """画像を読み込む前のペア選択結果。"""

    records_a: List[DatasetRecord]
    records_b: List[DatasetRecord]

    @property
    def ids_a(self) -> np.ndarray:
        return np.array([r.vehicle_id for r in self.records_a], dtype=np.int64)

    @property
    def ids_b(self) -> np.ndarray:
        return np.array([r.vehicle_id for r in self.records_b], dtype=np.int64)

    @property
    def same_flags(self) -> np.ndarray:
        return (self.ids_a == self.ids_b).astype(np.int64)


@dataclass
class PairBatch:
    """ATTNet に入力するペアのバッチ。"""

    images_a: torch.Tensor
    images_b: torch.Tensor
    ids_a: torch.Tensor
    ids_b: torch.Tensor
    same_flags: torch.Tensor

    def __len__(self) -> int:
        return int(self.ids_a.shape[0])

    def to(self, device: torch.device | str) -> "PairBatch":
        return PairBatch(
            images_a=self.images_a.to(device),
            images_b=self.images_b.to(device),
            ids_a=self.ids_a.to(device),
            ids_b=self.ids_b.to(device),
            same_flags=self.same_flags.to(device),
        )


class VerificationPairSampler:
    """IDインデックスから正例・負例ペアを再現可能に抽出する。"""

    def __init__(self, index: DatasetIndex) -> None:
        self.index = index
        self._groups = index.ids_to_records()
        self._ids = sorted(self._groups)
        self._multi_ids = [vid for vid in self._ids if len(self._groups[vid]) >= 2]

    def select(self, batch: int, pos_ratio: float, rng: np.random.Generator) -> PairSelection:
        """batch 組のペアを選ぶ。

        正例は floor(batch * pos_ratio) 組で、端数の確率でさらに1組増やす。
        """
        if not 0.0 <= pos_ratio <= 1.0:
            raise ValueError(f"pos_ratio は [0, 1] で指定してください: {pos_ratio}")
        expected = batch * pos_ratio
        num_pos = math.floor(expected)
        fraction = expected - num_pos
        if fraction > 1e-9 and rng.random() < fraction:
            num_pos += 1
        num_pos = min(num_pos, batch)
        num_neg = batch - num_pos
        if num_pos > 0 and not self._multi_ids:
            raise ValueError("正例ペアを作れません: 画像を2枚以上持つIDがありません")
        if num_neg > 0 and len(self._ids) < 2:
            raise ValueError(f"負例ペアを作れません: IDが {len(self._ids)} 個しかありません")

        records = self.index.records
        pairs = []
        for _ in range(num_pos):
            vid = self._multi_ids[int(rng.integers(len(self._multi_ids)))]
            a, b = rng.choice(self._groups[vid], size=2, replace=False)
            pairs.append((records[int(a)], records[int(b)]))
        for _ in range(num_neg):
            ia, ib = rng.choice(len(self._ids), size=2, replace=False)
            group_a = self._groups[self._ids[int(ia)]]
            group_b = self._groups[self._ids[int(ib)]]
            pairs.append(
                (records[group_a[int(rng.integers(len(group_a)))]], records[group_b[int(rng.integers(len(group_b)))]])
            )

        order = rng.permutation(len(pairs))
        return PairSelection(
            records_a=[pairs[i][0] for i in order],
            records_b=[pairs[i][1] for i in order],
        )


def sample_verification_pairs(
    index: DatasetIndex,
    batch: int,
    pos_ratio: float,
    seed: int,
    *,
    image_size: int = 224,
    rng: Optional[np.random.Generator] = None,
) -> PairBatch:
    """ペアを抽出して画像を読み込む。

    同じ seed なら同じID列になる。rng を渡した場合は seed より優先する。
    """
    generator = rng if rng is not None else np.random.default_rng(seed)
    selection = VerificationPairSampler(index).select(batch, pos_ratio, generator)
    return PairBatch(
        images_a=load_image_batch(selection.records_a, image_size),
        images_b=load_image_batch(selection.records_b, image_size),
        ids_a=torch.from_numpy(selection.ids_a),
        ids_b=torch.from_numpy(selection.ids_b),
        same_flags=torch.from_numpy(selection.same_flags),
    )
