"""チェックポイントの保存と読み込み。

ディレクトリ構成::

    <dir>/manifest.json   名前 → {shape, dtype, file, byte_offset}、設定ハッシュ、履歴
    <dir>/config.json     学習設定
    <dir>/tensors/*.bin   パラメータごとのリトルエンディアン生データ
"""
from __future__ import annotations

import json
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from .errors import CheckpointError
from .train_config import config_hash

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"
TENSOR_DIR = "tensors"
_EPOCH_DIR = re.compile(r"epoch_\d+")

_DTYPES = {"float32": np.dtype("<f4"), "int64": np.dtype("<i8")}


@dataclass
class Checkpoint:
    """モデルのテンソル、オプティマイザ状態、設定と損失履歴。"""

    stage: str
    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    config_hash: str = ""
    epoch: int = 0
    loss_history: List[Dict[str, Any]] = field(default_factory=list)
    optimizer_state: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.config_hash:
            self.config_hash = config_hash(self.config)


def _dtype_name(tensor: torch.Tensor) -> str:
    if tensor.dtype in (torch.int64, torch.int32, torch.int16, torch.int8, torch.uint8, torch.bool):
        return "int64"
    return "float32"


def _write_tensor(tensor: torch.Tensor, path: Path, dtype_name: str) -> None:
    array = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[dtype_name]).reshape(-1)
    try:
        array.tofile(path)
    except OSError as exc:
        raise OSError(f"テンソルを書き込めません: {path}") from exc


def _flatten_optimizers(
    optimizer_state: Dict[str, Dict[str, Any]], tensors: Dict[str, torch.Tensor]
) -> Dict[str, Any]:
    """オプティマイザ状態のテンソルを tensors に移し、残りを JSON 化できる形で返す。"""
    described: Dict[str, Any] = {}
    for opt_name, state_dict in optimizer_state.items():
        state_desc: Dict[str, Dict[str, Any]] = {}
        for param_id, param_state in state_dict.get("state", {}).items():
            entry: Dict[str, Any] = {}
            for key, value in param_state.items():
                if isinstance(value, torch.Tensor):
                    name = f"optimizer.{opt_name}.{param_id}.{key}"
                    tensors[name] = value
                    entry[key] = {"tensor": name}
                else:
                    entry[key] = {"value": value}
            state_desc[str(param_id)] = entry
        described[opt_name] = {"param_groups": state_dict.get("param_groups", []), "state": state_desc}
    return described


def save_checkpoint(ckpt: Checkpoint, directory: Path | str) -> Path:
    """チェックポイントを書き出す。マニフェストは最後に原子的に置き換える。"""
    out_dir = Path(directory)
    tensor_dir = out_dir / TENSOR_DIR
    tensor_dir.mkdir(parents=True, exist_ok=True)

    tensors = dict(ckpt.tensors)
    optimizers = _flatten_optimizers(ckpt.optimizer_state, tensors)

    entries: Dict[str, Dict[str, Any]] = {}
    for name, tensor in tensors.items():
        dtype_name = _dtype_name(tensor)
        filename = f"{name}.bin"
        _write_tensor(tensor, tensor_dir / filename, dtype_name)
        entries[name] = {
            "shape": list(tensor.shape),
            "dtype": dtype_name,
            "file": f"{TENSOR_DIR}/{filename}",
            "byte_offset": 0,
        }

    with (out_dir / CONFIG_NAME).open("w", encoding="utf-8") as f:
        json.dump(ckpt.config, f, ensure_ascii=False, indent=2, sort_keys=True)

    manifest = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "loss_history": ckpt.loss_history,
        "meta": ckpt.meta,
        "tensors": entries,
        "optimizers": optimizers,
    }
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    with tmp.open("w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, out_dir / MANIFEST_NAME)
    return out_dir


def _read_tensor(base: Path, name: str, entry: Dict[str, Any], problems: List[str]) -> Optional[torch.Tensor]:
    path = base / entry["file"]
    dtype = _DTYPES.get(entry.get("dtype", ""))
    if dtype is None:
        problems.append(f"{name}: 未知の dtype {entry.get('dtype')}")
        return None
    if not path.exists():
        problems.append(f"{name}: ファイルがありません ({path})")
        return None
    count = int(np.prod(entry["shape"], dtype=np.int64))
    offset = int(entry.get("byte_offset", 0))
    expected = offset + count * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        problems.append(f"{name}: サイズ不一致 (期待 {expected} バイト, 実際 {actual} バイト)")
        return None
    array = np.fromfile(path, dtype=dtype, count=count, offset=offset)
    tensor = torch.from_numpy(array.reshape(entry["shape"]).copy())
    return tensor.float() if entry["dtype"] == "float32" else tensor.long()


def load_checkpoint(
    directory: Path | str,
    *,
    force: bool = False,
    expected_hash: Optional[str] = None,
) -> Checkpoint:
    """チェックポイントを読み込む。

    Args:
        directory: save_checkpoint の出力先
        force: 設定ハッシュが一致しなくても読み込む
        expected_hash: 現在の設定のハッシュ（指定時は一致を確認する）

    Raises:
        CheckpointError: マニフェストとテンソルファイルが一致しない、
            または設定ハッシュ不一致で force=False の場合
    """
    base = Path(directory)
    manifest_path = base / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    with manifest_path.open("r", encoding="utf-8") as f:
        manifest = json.load(f)

    config_path = base / CONFIG_NAME
    config: Dict[str, Any] = {}
    if config_path.exists():
        with config_path.open("r", encoding="utf-8") as f:
            config = json.load(f)

    hash_problems = []
    stored_hash = manifest.get("config_hash", "")
    if config_hash(config) != stored_hash:
        hash_problems.append("config.json がマニフェストの設定ハッシュと一致しません")
    if expected_hash is not None and expected_hash != stored_hash:
        hash_problems.append(f"設定ハッシュが異なります (期待 {expected_hash}, 保存 {stored_hash})")
    for problem in hash_problems:
        logger.warning("%s: %s", base, problem)
    if hash_problems and not force:
        raise CheckpointError(str(base), hash_problems + ["--force で強制的に読み込めます"])

    problems: List[str] = []
    tensors: Dict[str, torch.Tensor] = {}
    for name, entry in manifest.get("tensors", {}).items():
        tensor = _read_tensor(base, name, entry, problems)
        if tensor is not None:
            tensors[name] = tensor
    if problems:
        raise CheckpointError(str(base), problems)

    optimizer_state: Dict[str, Dict[str, Any]] = {}
    for opt_name, desc in manifest.get("optimizers", {}).items():
        state: Dict[int, Dict[str, Any]] = {}
        for param_id, entry in desc.get("state", {}).items():
            state[int(param_id)] = {
                key: tensors.pop(item["tensor"]) if "tensor" in item else item["value"]
                for key, item in entry.items()
            }
        optimizer_state[opt_name] = {"state": state, "param_groups": desc.get("param_groups", [])}

    return Checkpoint(
        stage=manifest["stage"],
        tensors=tensors,
        config=config,
        config_hash=stored_hash,
        epoch=int(manifest.get("epoch", 0)),
        loss_history=list(manifest.get("loss_history", [])),
        optimizer_state=optimizer_state,
        meta=dict(manifest.get("meta", {})),
    )


class CheckpointManager:
    """エポックごとのチェックポイントを保存し、直近 keep_last 個と最良の1つを残す。"""

    def __init__(self, directory: Path | str, keep_last: int = 2) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.keep_last = keep_last
        self._best_path = self.directory / "best.json"

    def epoch_dir(self, epoch: int) -> Path:
        return self.directory / f"epoch_{epoch:03d}"

    def best(self) -> Optional[Dict[str, Any]]:
        if not self._best_path.exists():
            return None
        with self._best_path.open("r", encoding="utf-8") as f:
            return json.load(f)

    def save(self, ckpt: Checkpoint, score: float) -> Path:
        """保存して、score（小さいほど良い）が最良なら best.json を更新する。"""
        path = save_checkpoint(ckpt, self.epoch_dir(ckpt.epoch))
        best = self.best()
        if best is None or score < best["score"]:
            with self._best_path.open("w", encoding="utf-8") as f:
                json.dump({"epoch": ckpt.epoch, "score": score, "path": path.name}, f, indent=2)
        self._purge()
        return path

    def latest(self) -> Optional[Path]:
        dirs = self._epoch_dirs()
        return dirs[-1] if dirs else None

    def _epoch_dirs(self) -> List[Path]:
        dirs = [p for p in self.directory.iterdir() if p.is_dir() and _EPOCH_DIR.fullmatch(p.name)]
        return sorted(dirs, key=lambda p: int(p.name[len("epoch_"):]))

    def _purge(self) -> None:
        if self.keep_last <= 0:
            return
        best = self.best()
        keep_best = best["path"] if best else None
        for path in self._epoch_dirs()[: -self.keep_last]:
            if path.name != keep_best:
                shutil.rmtree(path, ignore_errors=True)
