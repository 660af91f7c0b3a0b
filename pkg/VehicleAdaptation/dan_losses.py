"""DAN の学習目的関数（敵対・サイクル・恒等・スタイル損失）。"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Mapping, Sequence, Tuple

import torch
from torch import nn

from .dan_networks import DualBranchAdversarialNetwork
from .errors import ensure_finite

ImageFn = Callable[[torch.Tensor], torch.Tensor]

GENERATOR_TERMS = ("l_adv_G", "l_adv_F", "l_cyc", "l_id", "l_style")
DISCRIMINATOR_TERMS = ("l_disc_S", "l_disc_T")


def gram(feature: torch.Tensor) -> torch.Tensor:
    """チャネル間の内積行列（正規化なし）。

    Args:
        feature: (N, M)、(N, H, W) または (B, N, H, W)

    Returns:
        (N, N) または (B, N, N)
    """
    if feature.dim() == 2:
        flat = feature
    elif feature.dim() == 3:
        flat = feature.reshape(feature.shape[0], -1)
    elif feature.dim() == 4:
        flat = feature.reshape(feature.shape[0], feature.shape[1], -1)
    else:
        raise ValueError(f"特徴マップの次元が不正です: {tuple(feature.shape)}")
    return flat @ flat.transpose(-1, -2)


def _gram_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    n = a.shape[-3] if a.dim() >= 3 else a.shape[0]
    m = a.shape[-1] * a.shape[-2] if a.dim() >= 3 else a.shape[1]
    diff = (gram(a) - gram(b)) ** 2
    return diff.sum(dim=(-2, -1)) / (n * m)


def style_loss(sx: torch.Tensor, sy: torch.Tensor, tx: torch.Tensor, ty: torch.Tensor) -> torch.Tensor:
    """グラム行列の差の二乗和を NM で割ったものを両方向で足す。

    sx = E_g^s(x), sy = E_g^s(y), tx = E_f^s(x), ty = E_f^s(y)。
    バッチの場合はサンプル平均。
    """
    shapes = {tuple(t.shape) for t in (sx, sy, tx, ty)}
    if len(shapes) != 1:
        raise ValueError(f"スタイル特徴の形状が一致しません: {sorted(shapes)}")
    loss = _gram_distance(sx, sy) + _gram_distance(ty, tx)
    return loss.mean()


def lsgan_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return torch.mean((real_scores - 1.0) ** 2) + torch.mean(fake_scores**2)


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return torch.mean((fake_scores - 1.0) ** 2)


def generator_adversarial_loss(disc: nn.Module, fake: torch.Tensor) -> torch.Tensor:
    """識別器を騙すための最小二乗損失。勾配は fake を通してジェネレータへ流れる。"""
    return lsgan_generator_loss(disc(fake))


def discriminator_loss(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """識別器の最小二乗損失。fake は切り離して評価する。"""
    return lsgan_discriminator_loss(disc(real), disc(fake.detach()))


def adversarial_losses(disc: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(l_gen, l_disc) を返す。"""
    return generator_adversarial_loss(disc, fake), discriminator_loss(disc, real, fake)


def _check_same_shape(*pairs: Tuple[torch.Tensor, torch.Tensor]) -> None:
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"形状が一致しません: {tuple(a.shape)} / {tuple(b.shape)}")


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor, y: torch.Tensor, y_rec: torch.Tensor) -> torch.Tensor:
    """mean|F(G(x)) - x| + mean|G(F(y)) - y|。"""
    _check_same_shape((x, x_rec), (y, y_rec))
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def identity_loss(G: ImageFn, F: ImageFn, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """mean|G(y) - y| + mean|F(x) - x|。"""
    return (G(y) - y).abs().mean() + (F(x) - x).abs().mean()


@dataclass(frozen=True)
class LossWeights:
    """L = L_adv + λ1 L_cyc + λ2 L_id + λ3 L_style の重み。"""

    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    lambda_style: float = 1.0


@dataclass
class DanLossReport:
    """1ステップ（またはエポック平均）の損失。total はジェネレータ目的関数。"""

    l_adv_G: float = 0.0
    l_adv_F: float = 0.0
    l_disc_S: float = 0.0
    l_disc_T: float = 0.0
    l_cyc: float = 0.0
    l_id: float = 0.0
    l_style: float = 0.0
    total: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def mean(cls, reports: Sequence["DanLossReport"]) -> "DanLossReport":
        if not reports:
            raise ValueError("平均を取るレポートがありません")
        terms = GENERATOR_TERMS + DISCRIMINATOR_TERMS + ("total",)
        values = {t: sum(getattr(r, t) for r in reports) / len(reports) for t in terms}
        return cls(**values, weights=reports[0].weights)


def generator_objective(parts: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """逆伝播用のジェネレータ目的関数（テンソル）。"""
    return (
        parts["l_adv_G"]
        + parts["l_adv_F"]
        + weights.lambda_cyc * parts["l_cyc"]
        + weights.lambda_id * parts["l_id"]
        + weights.lambda_style * parts["l_style"]
    )


def dan_total_loss(parts: Mapping[str, float | torch.Tensor], weights: LossWeights = LossWeights()) -> DanLossReport:
    """損失項を集計する。識別器損失は total に含めない。

    有限値でない項があれば NonFiniteLossError でその項を名指しする。
    """
    unknown = set(parts) - set(GENERATOR_TERMS + DISCRIMINATOR_TERMS)
    if unknown:
        raise KeyError(f"未知の損失項: {sorted(unknown)}")
    values = {name: float(parts.get(name, 0.0)) for name in GENERATOR_TERMS + DISCRIMINATOR_TERMS}
    ensure_finite(values)
    total = (
        values["l_adv_G"]
        + values["l_adv_F"]
        + weights.lambda_cyc * values["l_cyc"]
        + weights.lambda_id * values["l_id"]
        + weights.lambda_style * values["l_style"]
    )
    return DanLossReport(**values, total=total, weights=weights)


@dataclass
class GeneratorPass:
    """ジェネレータ更新1回分の順伝播結果。"""

    fake_y: torch.Tensor
    fake_x: torch.Tensor
    parts: Dict[str, torch.Tensor]
    total: torch.Tensor


def generator_pass(
    model: DualBranchAdversarialNetwork, x: torch.Tensor, y: torch.Tensor, weights: LossWeights
) -> GeneratorPass:
    """G(x), F(y) を生成してジェネレータ側の全損失を計算する。

    x はソースドメイン、y はターゲットドメインの画像。D_T は G(x) を、
    D_S は F(y) を判定する。
    """
    fake_y, _, style_gx = model.G.translate_with_features(x)
    fake_x, _, style_fy = model.F.translate_with_features(y)
    rec_x = model.F(fake_y)
    rec_y = model.G(fake_x)

    parts = {
        "l_adv_G": generator_adversarial_loss(model.D_T, fake_y),
        "l_adv_F": generator_adversarial_loss(model.D_S, fake_x),
        "l_cyc": cycle_loss(x, rec_x, y, rec_y),
        "l_id": identity_loss(model.G, model.F, x, y),
        "l_style": style_loss(
            style_gx.f_s,
            model.G.style_encode(y).f_s,
            model.F.style_encode(x).f_s,
            style_fy.f_s,
        ),
    }
    return GeneratorPass(fake_y=fake_y, fake_x=fake_x, parts=parts, total=generator_objective(parts, weights))
