"""学習設定（JSON ファイル + ドット区切りキーの上書き）。"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

DATA_ROOT_ENV = "DAVR_DATA_ROOT"


@dataclass
class DataConfig:
    """データセットの場所。*_index は JSON インデックスのパスで、ルートより優先する。"""

    layout: str = "flat"
    source_layout: Optional[str] = None
    target_layout: Optional[str] = None
    source_root: Optional[str] = None
    target_root: Optional[str] = None
    train_root: Optional[str] = None
    query_root: Optional[str] = None
    gallery_root: Optional[str] = None
    test_root: Optional[str] = None
    source_index: Optional[str] = None
    target_index: Optional[str] = None
    train_index: Optional[str] = None
    query_index: Optional[str] = None
    gallery_index: Optional[str] = None
    test_index: Optional[str] = None
    test_size: int = 800


@dataclass
class DanConfig:
    """DAN の学習設定。既定値は Adam lr 2e-4、バッチ16、6エポック。"""

    image_size: int = 256
    batch_size: int = 16
    epochs: int = 6
    lr: float = 2e-4
    betas: List[float] = field(default_factory=lambda: [0.5, 0.999])
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    lambda_style: float = 1.0
    pool_size: int = 50
    base_channels: int = 64
    num_resblocks: int = 9
    disc_channels: int = 64
    disc_layers: int = 4


@dataclass
class ReidConfig:
    """ATTNet の学習設定。lr_schedule は [エポック数, 学習率] の列。"""

    image_size: int = 224
    batch_size: int = 16
    epochs: int = 55
    lr_schedule: List[List[float]] = field(default_factory=lambda: [[50, 0.1], [5, 0.01]])
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pos_ratio: float = 0.5
    backbone: str = "resnet50"
    pretrained: bool = False
    tiny_channels: int = 8
    tiny_stages: int = 2
    hidden_dims: List[int] = field(default_factory=lambda: [1024, 512])
    dropout: float = 0.5
    use_attention: bool = True
    batches_per_epoch: Optional[int] = None

    def lr_at(self, epoch: int) -> float:
        """0始まりのエポック番号に対する学習率。スケジュールを超えたら最後の値。"""
        boundary = 0
        for length, lr in self.lr_schedule:
            boundary += int(length)
            if epoch < boundary:
                return float(lr)
        return float(self.lr_schedule[-1][1])


@dataclass
class TrainConfig:
    """学習1回分の設定。(config, seed) から再現できる。"""

    stage: str = "dan"
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    deterministic: bool = True
    keep_last: int = 2
    device: str = "auto"
    data: DataConfig = field(default_factory=DataConfig)
    dan: DanConfig = field(default_factory=DanConfig)
    reid: ReidConfig = field(default_factory=ReidConfig)

    def __post_init__(self) -> None:
        if self.stage not in ("dan", "reid"):
            raise ValueError(f"stage は dan または reid です: {self.stage}")

    def resolve_device(self) -> str:
        """device が auto なら CUDA の有無で cuda か cpu を選ぶ。"""
        if self.device != "auto":
            return self.device
        import torch

        return "cuda" if torch.cuda.is_available() else "cpu"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return _build(cls, data, prefix="")

    @classmethod
    def load(cls, path: Path | str) -> "TrainConfig":
        input_path = Path(path)
        if not input_path.exists():
            raise FileNotFoundError(input_path)
        with input_path.open("r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path: Path | str) -> Path:
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with output_path.open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
        return output_path

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        """section.key=value 形式の上書きを適用した新しい設定を返す。"""
        return TrainConfig.from_dict(apply_overrides(self.to_dict(), overrides))


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """section.key=value 形式の上書きを辞書のコピーに適用する。値は JSON として解釈し、失敗したら文字列。

    Raises:
        KeyError: 存在しないキー
        ValueError: key=value の形式でない
    """
    result = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"上書きは key=value の形式で指定してください: {item}")
        key, raw = item.split("=", 1)
        _set_dotted(result, key.strip(), _parse_value(raw))
    return result


def merge_settings(base: Dict[str, Any], updates: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """updates を base に再帰的に重ねたコピーを返す。base にないキーは KeyError。"""
    result = copy.deepcopy(base)
    for key, value in updates.items():
        if key not in result:
            raise KeyError(f"未知の設定キー: {prefix}{key}")
        if isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_settings(result[key], value, prefix=f"{prefix}{key}.")
        else:
            result[key] = value
    return result


def build_dataclass(cls: type, data: Dict[str, Any]) -> Any:
    """入れ子の辞書からデータクラスを組み立てる。未知のキーは KeyError。"""
    return _build(cls, data, prefix="")


def config_hash(data: Dict[str, Any]) -> str:
    """正規化した JSON の SHA-256。"""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def resolve_data_path(path: Optional[str]) -> Optional[Path]:
    """相対パスは環境変数 DAVR_DATA_ROOT を基準に解決する。"""
    if path is None:
        return None
    candidate = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not candidate.is_absolute():
        return Path(root) / candidate
    return candidate


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise KeyError(f"未知の設定キー: {key}")
        node = node[part]
    if parts[-1] not in node:
        raise KeyError(f"未知の設定キー: {key}")
    node[parts[-1]] = value


def _build(cls: type, data: Dict[str, Any], prefix: str) -> Any:
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"未知の設定キー: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """random / numpy / torch の乱数を固定し、必要なら決定論的な演算に切り替える。"""
    import random

    import numpy as np
    import torch

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
