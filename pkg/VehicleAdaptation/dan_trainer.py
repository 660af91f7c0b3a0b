"""DAN の学習ループとデータセットのドメイン変換。"""
from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointManager
from .dan_losses import DanLossReport, LossWeights, dan_total_loss, discriminator_loss, generator_pass
from .dan_networks import DualBranchAdversarialNetwork, Generator
from .dataset_index import DatasetIndex, DatasetRecord, Domain
from .errors import NonFiniteLossError, ensure_finite
from .image_loader import load_image_batch, tensor_to_image
from .image_pool import ImagePool
from .run_log import RunLog
from .train_config import TrainConfig, seed_everything

logger = logging.getLogger(__name__)

STAGE = "dan"


class Direction(Enum):
    """変換の向き。"""

    SOURCE_TO_TARGET = "source_to_target"
    TARGET_TO_SOURCE = "target_to_source"

    @property
    def destination(self) -> Domain:
        return Domain.TARGET if self is Direction.SOURCE_TO_TARGET else Domain.SOURCE


def build_dan_model(config: TrainConfig) -> DualBranchAdversarialNetwork:
    """config.seed で初期化した DAN を作る。"""
    torch.manual_seed(config.seed)
    return DualBranchAdversarialNetwork(
        base_channels=config.dan.base_channels,
        num_resblocks=config.dan.num_resblocks,
        disc_channels=config.dan.disc_channels,
        disc_layers=config.dan.disc_layers,
    )


def dan_model_from_checkpoint(ckpt: Checkpoint) -> DualBranchAdversarialNetwork:
    if ckpt.stage != STAGE:
        raise ValueError(f"DAN のチェックポイントではありません: stage={ckpt.stage}")
    config = TrainConfig.from_dict(ckpt.config)
    model = DualBranchAdversarialNetwork(
        base_channels=config.dan.base_channels,
        num_resblocks=config.dan.num_resblocks,
        disc_channels=config.dan.disc_channels,
        disc_layers=config.dan.disc_layers,
    )
    model.load_state_dict(ckpt.tensors)
    return model


def _detached(terms: Dict[str, torch.Tensor]) -> Dict[str, float]:
    return {name: value.detach().item() for name, value in terms.items()}


def _image_paths(index: DatasetIndex) -> List[str]:
    # ラベルは渡さない
    return [record.image_path for record in index.records]


@dataclass
class _EpochPlan:
    source: List[np.ndarray]
    target: List[np.ndarray]


def _plan_epoch(num_source: int, num_target: int, batch_size: int, rng: np.random.Generator) -> _EpochPlan:
    """大きい方のドメインを1周し、小さい方は並べ替えを繰り返して周回する。"""
    steps = math.ceil(max(num_source, num_target) / batch_size)
    total = max(num_source, num_target)

    def cyclic(n: int) -> np.ndarray:
        repeats = math.ceil(total / n)
        return np.concatenate([rng.permutation(n) for _ in range(repeats)])[:total]

    order_s = cyclic(num_source)
    order_t = cyclic(num_target)
    plan = _EpochPlan(source=[], target=[])
    for step in range(steps):
        sl = slice(step * batch_size, min((step + 1) * batch_size, total))
        plan.source.append(order_s[sl])
        plan.target.append(order_t[sl])
    return plan


class DanTrainer:
    """識別器を固定したジェネレータ更新と、イメージプールを使った識別器更新を交互に行う。"""

    def __init__(
        self,
        config: TrainConfig,
        *,
        run_log: Optional[RunLog] = None,
        checkpoint_dir: Optional[Path | str] = None,
    ) -> None:
        self.config = config
        self.run_log = run_log
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else Path(config.checkpoint_dir)
        self.device = torch.device(config.resolve_device())
        self.weights = LossWeights(config.dan.lambda_cyc, config.dan.lambda_id, config.dan.lambda_style)

        seed_everything(config.seed, config.deterministic)
        self.model = build_dan_model(config).to(self.device)
        betas = tuple(config.dan.betas)
        self.opt_G = torch.optim.Adam(self.model.generator_parameters(), lr=config.dan.lr, betas=betas)
        self.opt_D = torch.optim.Adam(self.model.discriminator_parameters(), lr=config.dan.lr, betas=betas)
        self.pool_S = ImagePool(config.dan.pool_size, seed=config.seed + 1)
        self.pool_T = ImagePool(config.dan.pool_size, seed=config.seed + 2)
        self.history: List[Dict] = []

    def checkpoint(self, epoch: int) -> Checkpoint:
        return Checkpoint(
            stage=STAGE,
            tensors={k: v.detach().cpu().clone() for k, v in self.model.state_dict().items()},
            config=self.config.to_dict(),
            epoch=epoch,
            loss_history=copy.deepcopy(self.history),
            optimizer_state={
                "generator": copy.deepcopy(self.opt_G.state_dict()),
                "discriminator": copy.deepcopy(self.opt_D.state_dict()),
            },
        )

    def _load(self, paths: Sequence[str], positions: np.ndarray) -> torch.Tensor:
        images = load_image_batch([paths[int(p)] for p in positions], self.config.dan.image_size)
        return images.to(self.device)

    def train_step(self, x: torch.Tensor, y: torch.Tensor) -> DanLossReport:
        """1バッチ分の更新。x はソース、y はターゲット。"""
        self.model.set_discriminators_trainable(False)
        self.opt_G.zero_grad(set_to_none=True)
        gen = generator_pass(self.model, x, y, self.weights)
        ensure_finite(_detached(gen.parts))
        gen.total.backward()
        self.opt_G.step()

        self.model.set_discriminators_trainable(True)
        self.opt_D.zero_grad(set_to_none=True)
        l_disc_T = discriminator_loss(self.model.D_T, y, self.pool_T.query(gen.fake_y))
        l_disc_S = discriminator_loss(self.model.D_S, x, self.pool_S.query(gen.fake_x))
        ensure_finite(_detached({"l_disc_S": l_disc_S, "l_disc_T": l_disc_T}))
        (l_disc_S + l_disc_T).backward()
        self.opt_D.step()

        parts = _detached({**gen.parts, "l_disc_S": l_disc_S, "l_disc_T": l_disc_T})
        return dan_total_loss(parts, self.weights)

    def fit(self, source_paths: Sequence[str], target_paths: Sequence[str]) -> Checkpoint:
        """source_paths / target_paths の画像だけを使って学習する。"""
        if not source_paths or not target_paths:
            raise ValueError(f"画像がありません: source={len(source_paths)}, target={len(target_paths)}")
        epochs = self.config.dan.epochs
        if epochs <= 0:
            return self.checkpoint(0)

        manager = CheckpointManager(self.checkpoint_dir, keep_last=self.config.keep_last)
        self.model.train()
        for epoch in range(1, epochs + 1):
            rng = np.random.default_rng([self.config.seed, epoch])
            plan = _plan_epoch(len(source_paths), len(target_paths), self.config.dan.batch_size, rng)
            reports: List[DanLossReport] = []
            for pos_s, pos_t in zip(plan.source, plan.target):
                x = self._load(source_paths, pos_s)
                y = self._load(target_paths, pos_t)
                try:
                    reports.append(self.train_step(x, y))
                except NonFiniteLossError:
                    latest = manager.latest()
                    logger.error("エポック %d で損失が発散しました。最後の正常なチェックポイント: %s", epoch, latest)
                    raise
            report = DanLossReport.mean(reports)
            losses = report.to_dict()
            losses.pop("weights")
            self.history.append({"epoch": epoch, **losses})
            logger.info("epoch %d/%d total=%.4f", epoch, epochs, report.total)
            if self.run_log is not None:
                self.run_log.log_epoch(epoch, losses, self.config.dan.lr)
            manager.save(self.checkpoint(epoch), score=report.total)
        return self.checkpoint(epochs)


def train_dan(
    config: TrainConfig,
    source: DatasetIndex,
    target: DatasetIndex,
    *,
    run_log: Optional[RunLog] = None,
    checkpoint_dir: Optional[Path | str] = None,
) -> Checkpoint:
    """ラベルを使わずに DAN を学習する。

    Args:
        config: 学習設定（dan セクションを使う）
        source: ソースドメインのインデックス（画像パスのみ使う）
        target: ターゲットドメインのインデックス（画像パスのみ使う）
        run_log: エポックごとの記録先
        checkpoint_dir: エポックごとのチェックポイント保存先（省略時は config.checkpoint_dir）

    Raises:
        NonFiniteLossError: 損失が発散した場合。それまでのチェックポイントは残る
    """
    trainer = DanTrainer(config, run_log=run_log, checkpoint_dir=checkpoint_dir)
    return trainer.fit(_image_paths(source), _image_paths(target))


@torch.no_grad()
def translate_batch(gen: Generator, images: torch.Tensor) -> torch.Tensor:
    """評価モードで変換する。出力は [-1, 1]。"""
    was_training = gen.training
    gen.eval()
    try:
        return gen(images)
    finally:
        gen.train(was_training)


def _relative_paths(records: Sequence[DatasetRecord]) -> List[Path]:
    paths = [Path(r.image_path).resolve() for r in records]
    if not paths:
        return []
    root = Path(os.path.commonpath([str(p.parent) for p in paths]))
    return [p.relative_to(root) for p in paths]


def translate_dataset(
    ckpt: Checkpoint,
    index: DatasetIndex,
    direction: Direction | str,
    output_dir: Path | str,
    *,
    batch_size: int = 16,
) -> DatasetIndex:
    """インデックスの全画像を変換して ``<output_dir>/translated/<direction>/`` に書き出す。

    元の相対レイアウトを保ち、vehicle_id と camera_id をそのまま引き継ぐ。
    変換後のインデックスは同じディレクトリの index.json にも保存する。
    """
    direction = Direction(direction)
    model = dan_model_from_checkpoint(ckpt)
    config = TrainConfig.from_dict(ckpt.config)
    device = torch.device(config.resolve_device())
    model.to(device)
    gen = model.G if direction is Direction.SOURCE_TO_TARGET else model.F

    base = Path(output_dir) / "translated" / direction.value
    relative = _relative_paths(index.records)
    records: List[DatasetRecord] = []
    for start in range(0, len(index.records), batch_size):
        chunk = index.records[start : start + batch_size]
        images = load_image_batch(chunk, config.dan.image_size).to(device)
        translated = translate_batch(gen, images).cpu()
        for offset, (record, image) in enumerate(zip(chunk, translated)):
            out_path = (base / relative[start + offset]).with_suffix(".png")
            try:
                out_path.parent.mkdir(parents=True, exist_ok=True)
                tensor_to_image(image).save(out_path, format="PNG")
            except OSError as exc:
                raise OSError(f"変換画像を書き込めません: {out_path} (元画像 {record.image_path})") from exc
            records.append(
                DatasetRecord(
                    image_path=str(out_path),
                    vehicle_id=record.vehicle_id,
                    camera_id=record.camera_id,
                    domain_tag=direction.destination,
                )
            )

    result = DatasetIndex(records=records, split=index.split, id_map=dict(index.id_map))
    result.save_json(base / "index.json")
    logger.info("%d 枚を変換しました (%s) -> %s", len(records), direction.value, base)
    return result
