"""ATTNet の学習ループ。"""
from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .attnet import AttNet, attnet_loss_terms
from .checkpoint import Checkpoint, CheckpointManager
from .dataset_index import DatasetIndex
from .errors import NonFiniteLossError, ensure_finite
from .pair_sampler import sample_verification_pairs
from .run_log import RunLog
from .train_config import TrainConfig, seed_everything

logger = logging.getLogger(__name__)

STAGE = "reid"


def _make_attnet(config: TrainConfig, num_classes: int, pretrained: bool) -> AttNet:
    reid = config.reid
    return AttNet(
        num_classes,
        backbone=reid.backbone,
        pretrained=pretrained,
        hidden_dims=tuple(reid.hidden_dims),
        dropout=reid.dropout,
        use_attention=reid.use_attention,
        input_size=reid.image_size,
        tiny_channels=reid.tiny_channels,
        tiny_stages=reid.tiny_stages,
        imagenet_normalize=reid.pretrained,
    )


def build_attnet_model(config: TrainConfig, num_classes: int) -> AttNet:
    """config.seed で初期化した ATTNet を作る。"""
    torch.manual_seed(config.seed)
    return _make_attnet(config, num_classes, config.reid.pretrained)


def attnet_from_checkpoint(ckpt: Checkpoint) -> AttNet:
    """チェックポイントから ATTNet を復元する。重みはすべてチェックポイントから読む。"""
    if ckpt.stage != STAGE:
        raise ValueError(f"ATTNet のチェックポイントではありません: stage={ckpt.stage}")
    if "num_classes" not in ckpt.meta:
        raise ValueError("チェックポイントに num_classes がありません")
    config = TrainConfig.from_dict(ckpt.config)
    model = _make_attnet(config, int(ckpt.meta["num_classes"]), pretrained=False)
    model.load_state_dict(ckpt.tensors)
    return model


class ReidTrainer:
    """検証ペアのバッチで識別損失と検証損失を同時に最適化する。"""

    def __init__(
        self,
        config: TrainConfig,
        num_classes: int,
        *,
        run_log: Optional[RunLog] = None,
        checkpoint_dir: Optional[Path | str] = None,
    ) -> None:
        self.config = config
        self.num_classes = num_classes
        self.run_log = run_log
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else Path(config.checkpoint_dir)
        self.device = torch.device(config.resolve_device())

        seed_everything(config.seed, config.deterministic)
        self.model = build_attnet_model(config, num_classes).to(self.device)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.reid.lr_at(0),
            momentum=config.reid.momentum,
            weight_decay=config.reid.weight_decay,
        )
        self.history: List[Dict] = []

    def checkpoint(self, epoch: int) -> Checkpoint:
        return Checkpoint(
            stage=STAGE,
            tensors={k: v.detach().cpu().clone() for k, v in self.model.state_dict().items()},
            config=self.config.to_dict(),
            epoch=epoch,
            loss_history=copy.deepcopy(self.history),
            optimizer_state={"sgd": copy.deepcopy(self.optimizer.state_dict())},
            meta={"num_classes": self.num_classes, "embedding_dim": self.model.embedding_dim},
        )

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def fit(self, train_index: DatasetIndex) -> Checkpoint:
        reid = self.config.reid
        if reid.epochs <= 0:
            return self.checkpoint(0)
        steps = reid.batches_per_epoch or max(1, len(train_index) // reid.batch_size)

        manager = CheckpointManager(self.checkpoint_dir, keep_last=self.config.keep_last)
        self.model.train()
        for epoch in range(1, reid.epochs + 1):
            lr = reid.lr_at(epoch - 1)
            self._set_lr(lr)
            sums = {"l_id": 0.0, "l_verif": 0.0, "total": 0.0}
            for step in range(steps):
                rng = np.random.default_rng([self.config.seed, epoch, step])
                pair = sample_verification_pairs(
                    train_index, reid.batch_size, reid.pos_ratio, self.config.seed, image_size=reid.image_size, rng=rng
                ).to(self.device)
                id_loss, verif_loss = attnet_loss_terms(pair, self.model)
                total = id_loss + verif_loss
                values = {"l_id": id_loss.detach().item(), "l_verif": verif_loss.detach().item()}
                try:
                    ensure_finite(values)
                except NonFiniteLossError:
                    logger.error("エポック %d で損失が発散しました。最後の正常なチェックポイント: %s", epoch, manager.latest())
                    raise
                self.optimizer.zero_grad(set_to_none=True)
                total.backward()
                self.optimizer.step()
                sums["l_id"] += values["l_id"]
                sums["l_verif"] += values["l_verif"]
                sums["total"] += values["l_id"] + values["l_verif"]

            losses = {name: value / steps for name, value in sums.items()}
            self.history.append({"epoch": epoch, "lr": lr, **losses})
            logger.info("epoch %d/%d lr=%g total=%.4f", epoch, reid.epochs, lr, losses["total"])
            if self.run_log is not None:
                self.run_log.log_epoch(epoch, losses, lr)
            manager.save(self.checkpoint(epoch), score=losses["total"])
        return self.checkpoint(reid.epochs)


def train_reid(
    config: TrainConfig,
    train_index: DatasetIndex,
    *,
    run_log: Optional[RunLog] = None,
    checkpoint_dir: Optional[Path | str] = None,
) -> Checkpoint:
    """ラベル付きインデックス（変換後または未変換のソース）で ATTNet を学習する。

    vehicle_id は 0 始まりの詰めたIDである必要がある。
    学習率は config.reid.lr_schedule に従ってエポック単位で切り替える。
    """
    if len(train_index) == 0:
        raise ValueError("学習インデックスが空です")
    ids = [r.vehicle_id for r in train_index.records]
    if min(ids) < 0:
        raise ValueError(f"vehicle_id が負です: {min(ids)}")
    trainer = ReidTrainer(config, max(ids) + 1, run_log=run_log, checkpoint_dir=checkpoint_dir)
    return trainer.fit(train_index)
