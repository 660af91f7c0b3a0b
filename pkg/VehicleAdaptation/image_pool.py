"""識別器の更新に使う、過去に生成した画像のバッファ。"""
from __future__ import annotations

import random
from typing import List

import torch


class ImagePool:
    """最大 pool_size 枚の生成画像を保持する。

    バッファが満杯になった後は、各画像について確率 0.5 で保持中の画像と
    入れ替えて古い画像を返す。pool_size=0 なら入力をそのまま返す。
    """

    def __init__(self, pool_size: int = 50, seed: int = 0) -> None:
        if pool_size < 0:
            raise ValueError(f"pool_size は0以上である必要があります: {pool_size}")
        self.pool_size = pool_size
        self._images: List[torch.Tensor] = []
        self._rng = random.Random(seed)

    def __len__(self) -> int:
        return len(self._images)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        images = images.detach()
        if self.pool_size == 0:
            return images
        selected = []
        for image in images:
            image = image.unsqueeze(0)
            if len(self._images) < self.pool_size:
                self._images.append(image.clone())
                selected.append(image)
            elif self._rng.random() > 0.5:
                slot = self._rng.randrange(self.pool_size)
                selected.append(self._images[slot].clone())
                self._images[slot] = image.clone()
            else:
                selected.append(image)
        return torch.cat(selected, dim=0)
