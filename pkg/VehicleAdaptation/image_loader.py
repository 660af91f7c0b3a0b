"""画像ファイルを [-1, 1] のバッチテンソルとして読み込む。"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .dataset_index import DatasetRecord


def normalize(array: np.ndarray) -> np.ndarray:
    """uint8 の HxWx3 配列を [-1, 1] の float32 に変換する。"""
    return array.astype(np.float32) / 127.5 - 1.0


def denormalize(array: np.ndarray) -> np.ndarray:
    """[-1, 1] の配列を uint8 に戻す。"""
    scaled = np.round((np.asarray(array, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
    """3xHxW の [-1, 1] テンソルを PIL Image に変換する。"""
    array = tensor.detach().cpu().permute(1, 2, 0).numpy()
    return Image.fromarray(denormalize(array))


def load_image(path: Path | str, size: int) -> torch.Tensor:
    """画像1枚を size x size にリサイズして 3xHxW テンソルで返す。

    壊れたファイルはパスを含む OSError になる。
    """
    try:
        with Image.open(path) as image:
            rgb = image.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.BILINEAR)
            array = normalize(np.asarray(rgb))
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"画像を読み込めません: {path}") from exc
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1)))


def load_image_batch(
    records: Sequence[DatasetRecord] | Sequence[Path | str],
    size: int,
    *,
    workers: int = 1,
) -> torch.Tensor:
    """レコード列を Bx3xsizexsize のテンソルとして読み込む。

    Args:
        records: DatasetRecord または画像パスの列
        size: 出力の一辺（ピクセル）
        workers: 読み込みスレッド数。出力順は入力順のまま

    Returns:
        [-1, 1] の float32 テンソル
    """
    paths: List[str] = [r.image_path if isinstance(r, DatasetRecord) else str(r) for r in records]
    if not paths:
        return torch.empty(0, 3, size, size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(lambda p: load_image(p, size), paths))
    else:
        images = [load_image(p, size) for p in paths]
    return torch.stack(images)
