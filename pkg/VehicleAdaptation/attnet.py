"""ATTNet: チャネル注意と識別・検証の2タスクを持つ特徴学習ネットワーク。"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset_index import DatasetRecord
from .image_loader import load_image_batch
from .pair_sampler import PairBatch

logger = logging.getLogger(__name__)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class TinyBackbone(nn.Module):
    """机上検証用の小さな畳み込みバックボーン。

    stages 段の 3x3 畳み込み（BatchNorm + ReLU）で、最後の2段がストライド2。
    出力は channels チャネル、1/4 解像度。
    """

    def __init__(self, channels: int = 8, stages: int = 2) -> None:
        super().__init__()
        if stages < 2:
            raise ValueError(f"stages は2以上である必要があります: {stages}")
        layers: List[nn.Module] = []
        in_channels = 3
        for i in range(stages):
            stride = 2 if i >= stages - 2 else 1
            layers += [
                nn.Conv2d(in_channels, channels, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(channels),
                nn.ReLU(),
            ]
            in_channels = channels
        self.features = nn.Sequential(*layers)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


def build_backbone(
    name: str, pretrained: bool = False, tiny_channels: int = 8, tiny_stages: int = 2
) -> Tuple[nn.Module, int]:
    """バックボーンと出力チャネル数を返す。

    resnet50 は 224x224 入力で 7x7x2048 を出力する（全結合とプーリングを除いた5ステージ）。
    """
    if name == "tiny":
        backbone = TinyBackbone(tiny_channels, tiny_stages)
        return backbone, backbone.out_channels
    if name not in ("resnet50", "resnet18"):
        raise ValueError(f"未サポートのバックボーン: {name}")

    from torchvision import models

    factory = models.resnet50 if name == "resnet50" else models.resnet18
    resnet = None
    if pretrained:
        weights = models.ResNet50_Weights.DEFAULT if name == "resnet50" else models.ResNet18_Weights.DEFAULT
        try:
            resnet = factory(weights=weights)
        except Exception as exc:  # ネットワークなしの環境ではここに来る
            logger.warning("事前学習済み重みを取得できません (%s)。ランダム初期化で続行します。", exc)
    if resnet is None:
        if not pretrained:
            logger.info("%s をランダム初期化します", name)
        resnet = factory(weights=None)
    out_channels = resnet.fc.in_features
    return nn.Sequential(*list(resnet.children())[:-2]), out_channels


@dataclass
class AttendedEmbedding:
    """ATTNet の各段の特徴（バッチ）。

    f_a = [f_d, f_g] が検索に使う特徴。use_attention=False のときは
    mask_M が None、f_m がゼロになる。
    """

    f_g: torch.Tensor
    mask_M: Optional[torch.Tensor]
    f_m: torch.Tensor
    f_sum: torch.Tensor
    f_d: torch.Tensor
    f_a: torch.Tensor

    def split(self, n: int) -> Tuple["AttendedEmbedding", "AttendedEmbedding"]:
        """先頭 n 件とそれ以降に分ける。"""

        def part(sl: slice) -> "AttendedEmbedding":
            return AttendedEmbedding(
                f_g=self.f_g[sl],
                mask_M=None if self.mask_M is None else self.mask_M[sl],
                f_m=self.f_m[sl],
                f_sum=self.f_sum[sl],
                f_d=self.f_d[sl],
                f_a=self.f_a[sl],
            )

        return part(slice(0, n)), part(slice(n, None))


class AttNet(nn.Module):
    """重み共有のシャムネットワーク。両ブランチは同じモジュールを通る。

    Args:
        num_classes: 学習データのID数
        backbone: "resnet50", "resnet18", "tiny"
        pretrained: 事前学習済み重みを使うか
        hidden_dims: f_d を作る2つの全結合の出力次元
        dropout: 全結合間のドロップアウト率
        use_attention: False でベースライン（注意とショートカットなし）
        input_size: 受け付ける入力の一辺
        tiny_channels, tiny_stages: tiny バックボーンの幅と段数
        imagenet_normalize: ImageNet の平均・分散で入力を正規化するか（省略時は pretrained と同じ）
    """

    def __init__(
        self,
        num_classes: int,
        backbone: str = "resnet50",
        pretrained: bool = False,
        hidden_dims: Sequence[int] = (1024, 512),
        dropout: float = 0.5,
        use_attention: bool = True,
        input_size: int = 224,
        tiny_channels: int = 8,
        tiny_stages: int = 2,
        imagenet_normalize: Optional[bool] = None,
    ) -> None:
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"num_classes は1以上である必要があります: {num_classes}")
        self.num_classes = num_classes
        self.input_size = input_size
        self.use_attention = use_attention
        self.backbone, channels = build_backbone(backbone, pretrained, tiny_channels, tiny_stages)
        self.feature_dim = channels
        self.attention_conv = nn.Conv2d(channels, channels, kernel_size=1)
        self.fc1 = nn.Linear(channels, hidden_dims[0])
        self.dropout = nn.Dropout(dropout)
        self.fc2 = nn.Linear(hidden_dims[0], hidden_dims[1])
        self.embedding_dim = hidden_dims[1] + channels
        self.id_classifier = nn.Linear(self.embedding_dim, num_classes)
        self.verif_classifier = nn.Linear(self.embedding_dim, 2)

        self.pretrained = pretrained
        self.imagenet_normalize = pretrained if imagenet_normalize is None else imagenet_normalize
        if self.imagenet_normalize:
            self.register_buffer("input_mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
            self.register_buffer("input_std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def extract_embedding(self, img: torch.Tensor) -> AttendedEmbedding:
        if img.dim() != 4 or img.shape[1] != 3 or tuple(img.shape[-2:]) != (self.input_size, self.input_size):
            raise ValueError(
                f"入力は Bx3x{self.input_size}x{self.input_size} である必要があります: {tuple(img.shape)}"
            )
        if self.imagenet_normalize:
            img = ((img + 1.0) / 2.0 - self.input_mean) / self.input_std
        f_g = self.backbone(img).mean(dim=(2, 3))
        if self.use_attention:
            scores = self.attention_conv(f_g[:, :, None, None]).flatten(1)
            mask_M = torch.softmax(scores, dim=1)
            f_m = f_g * mask_M
        else:
            mask_M = None
            f_m = torch.zeros_like(f_g)
        f_sum = f_g + f_m
        f_d = self.fc2(self.dropout(F.relu(self.fc1(f_sum))))
        f_a = torch.cat([f_d, f_g], dim=1)
        return AttendedEmbedding(f_g=f_g, mask_M=mask_M, f_m=f_m, f_sum=f_sum, f_d=f_d, f_a=f_a)

    def forward(self, img: torch.Tensor) -> AttendedEmbedding:
        return self.extract_embedding(img)


def identification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """softmax 交差エントロピー（バッチ平均）。"""
    num_classes = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"ラベルが範囲外です: [{int(labels.min())}, {int(labels.max())}] / クラス数 {num_classes}")
    return F.cross_entropy(logits, labels.long())


def verification_logits(params: AttNet, e1: AttendedEmbedding, e2: AttendedEmbedding) -> torch.Tensor:
    return params.verif_classifier((e1.f_a - e2.f_a) ** 2)


def verification_loss(
    params: AttNet, e1: AttendedEmbedding, e2: AttendedEmbedding, same: torch.Tensor
) -> torch.Tensor:
    """(f_a1 - f_a2)^2 に対する2クラス分類の交差エントロピー。クラス1が「同一」。"""
    return F.cross_entropy(verification_logits(params, e1, e2), same.long())


def attnet_loss_terms(pair: PairBatch, params: AttNet) -> Tuple[torch.Tensor, torch.Tensor]:
    """(識別損失, 検証損失) を返す。両ブランチは1回の順伝播で同じ重みを通す。"""
    n = len(pair)
    embedding = params(torch.cat([pair.images_a, pair.images_b], dim=0))
    e1, e2 = embedding.split(n)
    labels = torch.cat([pair.ids_a, pair.ids_b], dim=0)
    id_loss = identification_loss(params.id_classifier(embedding.f_a), labels)
    return id_loss, verification_loss(params, e1, e2, pair.same_flags)


def attnet_total_loss(pair: PairBatch, params: AttNet) -> torch.Tensor:
    """識別損失と検証損失を等しい重みで足す。"""
    id_loss, verif_loss = attnet_loss_terms(pair, params)
    return id_loss + verif_loss


@torch.no_grad()
def extract_embeddings(
    model: AttNet,
    records: Sequence[DatasetRecord],
    batch_size: int = 64,
) -> np.ndarray:
    """評価モードで f_a を抽出して (N, D) の float32 配列で返す。"""
    was_training = model.training
    device = next(model.parameters()).device
    model.eval()
    chunks: List[np.ndarray] = []
    try:
        for start in range(0, len(records), batch_size):
            images = load_image_batch(records[start : start + batch_size], model.input_size).to(device)
            chunks.append(model(images).f_a.float().cpu().numpy())
    finally:
        model.train(was_training)
    if not chunks:
        return np.zeros((0, model.embedding_dim), dtype=np.float32)
    return np.concatenate(chunks, axis=0).astype(np.float32)


def export_embeddings(matrix: np.ndarray, records: Sequence[DatasetRecord], path: Path | str) -> Path:
    """リトルエンディアン float32 の行列と、行順を記した JSON サイドカーを書く。"""
    if matrix.shape[0] != len(records):
        raise ValueError(f"行数とレコード数が一致しません: {matrix.shape[0]} / {len(records)}")
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(matrix, dtype="<f4").tofile(output_path)
    sidecar = {
        "rows": int(matrix.shape[0]),
        "cols": int(matrix.shape[1]) if matrix.ndim == 2 else 0,
        "dtype": "float32",
        "byte_order": "little",
        "records": [r.to_dict() for r in records],
    }
    with output_path.with_suffix(".json").open("w", encoding="utf-8") as f:
        json.dump(sidecar, f, ensure_ascii=False, indent=2)
    return output_path


def load_embeddings(path: Path | str) -> Tuple[np.ndarray, List[DatasetRecord]]:
    input_path = Path(path)
    with input_path.with_suffix(".json").open("r", encoding="utf-8") as f:
        sidecar = json.load(f)
    matrix = np.fromfile(input_path, dtype="<f4")
    expected = sidecar["rows"] * sidecar["cols"]
    if matrix.size != expected:
        raise ValueError(f"埋め込みファイルのサイズが不正です: {input_path} ({matrix.size} / {expected})")
    records = [DatasetRecord.from_dict(item) for item in sidecar["records"]]
    return matrix.reshape(sidecar["rows"], sidecar["cols"]).astype(np.float32), records
