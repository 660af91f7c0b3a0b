"""DAN（Dual-branch Adversarial Network）のネットワーク定義。

各ジェネレータはコンテンツエンコーダ（アテンション付き）、スタイルエンコーダ、
デコーダから成る。先頭の3つの畳み込みブロック（ステム）はコンテンツ/スタイル両経路と
G/F 両ジェネレータで1つの重みを共有する。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import torch
from torch import nn


@dataclass
class ContentOutput:
    """コンテンツエンコーダの出力。

    f_c: 注意適用後に射影した特徴 (B, 4c, H/4, W/4)
    mask_a: 注意マスク (B, 1, H/4, W/4)、値は (0, 1)
    f_e2: ステム2ブロック目の特徴 (B, 2c, H/2, W/2)
    f_fused: 残差ブロック出力の連結 (B, n*4c, H/4, W/4)
    f_share: ステム出力 (B, 4c, H/4, W/4)
    """

    f_c: torch.Tensor
    mask_a: torch.Tensor
    f_e2: torch.Tensor
    f_fused: torch.Tensor
    f_share: torch.Tensor


@dataclass
class StyleFeature:
    """スタイルエンコーダの出力。"""

    f_s: torch.Tensor
    f_share: torch.Tensor


def check_image_batch(img: torch.Tensor) -> None:
    """B x 3 x H x W で H, W が4の倍数であることを確認する。"""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValueError(f"入力は Bx3xHxW である必要があります: {tuple(img.shape)}")
    if img.shape[2] % 4 != 0 or img.shape[3] % 4 != 0:
        raise ValueError(f"画像の高さと幅は4の倍数である必要があります: {tuple(img.shape[2:])}")


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """畳み込み層を N(0, std) で初期化する。"""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBlock(nn.Sequential):
    """畳み込み + インスタンス正規化 + ReLU。"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int) -> None:
        padding = kernel_size // 2
        layers = []
        if stride == 1:
            layers.append(nn.ReflectionPad2d(padding))
            padding = 0
        layers += [
            nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=padding),
            nn.InstanceNorm2d(out_channels),
            nn.ReLU(),
        ]
        super().__init__(*layers)


class SharedStem(nn.Module):
    """3つの畳み込みブロック。2ブロック目の出力をスキップ用に返す。"""

    def __init__(self, base_channels: int = 64) -> None:
        super().__init__()
        c = base_channels
        self.block1 = ConvBlock(3, c, 7, 1)
        self.block2 = ConvBlock(c, 2 * c, 3, 2)
        self.block3 = ConvBlock(2 * c, 4 * c, 3, 2)
        self.out_channels = 4 * c

    def forward(self, img: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        f_e2 = self.block2(self.block1(img))
        return f_e2, self.block3(f_e2)


class ResidualBlock(nn.Module):
    """3x3 畳み込み2層の残差ブロック。normalize=False なら正規化なし。"""

    def __init__(self, channels: int, normalize: bool = True) -> None:
        super().__init__()
        self.pad1 = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.norm1 = nn.InstanceNorm2d(channels) if normalize else nn.Identity()
        self.act = nn.ReLU()
        self.pad2 = nn.ReflectionPad2d(1)
        self.conv2 = nn.Conv2d(channels, channels, 3)
        self.norm2 = nn.InstanceNorm2d(channels) if normalize else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(self.pad1(x))))
        return x + self.norm2(self.conv2(self.pad2(h)))


class Decoder(nn.Module):
    """G(I) = tanh(conv(deconv(deconv([f_c, f_s]) + f_e2)))。"""

    def __init__(self, base_channels: int = 64) -> None:
        super().__init__()
        c = base_channels
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(8 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(),
        )
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 3, 7), nn.Tanh())

    def forward(self, f_c: torch.Tensor, f_s: torch.Tensor, f_e2: torch.Tensor) -> torch.Tensor:
        h = self.up1(torch.cat([f_c, f_s], dim=1))
        if h.shape[1:] != f_e2.shape[1:]:
            raise ValueError(
                f"スキップ接続の形状が一致しません: deconv1 {tuple(h.shape[1:])} / f_e2 {tuple(f_e2.shape[1:])}"
            )
        return self.out(self.up2(h + f_e2))


class Generator(nn.Module):
    """コンテンツ/スタイルの2ブランチを持つジェネレータ。

    Args:
        stem: 共有するステム。None なら新規に作る
        base_channels: ステム1ブロック目のチャネル数（既定値は64）
        num_resblocks: 各ブランチの残差ブロック数（既定値は9）
    """

    def __init__(
        self,
        stem: Optional[SharedStem] = None,
        base_channels: int = 64,
        num_resblocks: int = 9,
    ) -> None:
        super().__init__()
        self.stem = stem if stem is not None else SharedStem(base_channels)
        channels = self.stem.out_channels
        fused = num_resblocks * channels
        self.content_resblocks = nn.ModuleList(
            ResidualBlock(channels, normalize=False) for _ in range(num_resblocks)
        )
        # 各位置の fused ベクトルに対する全結合（1x1 畳み込みと等価）
        self.attention_fc = nn.Conv2d(fused, 1, kernel_size=1)
        self.content_projection = nn.Conv2d(fused, channels, kernel_size=1)
        self.style_resblocks = nn.Sequential(
            *(ResidualBlock(channels, normalize=True) for _ in range(num_resblocks))
        )
        self.decoder = Decoder(channels // 4)

    def content_encode(self, img: torch.Tensor) -> ContentOutput:
        check_image_batch(img)
        f_e2, f_share = self.stem(img)
        outputs = []
        h = f_share
        for block in self.content_resblocks:
            h = block(h)
            outputs.append(h)
        f_fused = torch.cat(outputs, dim=1)
        mask_a = torch.sigmoid(self.attention_fc(f_fused))
        f_c = self.content_projection(mask_a * f_fused)
        return ContentOutput(f_c=f_c, mask_a=mask_a, f_e2=f_e2, f_fused=f_fused, f_share=f_share)

    def style_encode(self, img: torch.Tensor) -> StyleFeature:
        check_image_batch(img)
        _, f_share = self.stem(img)
        return StyleFeature(f_s=self.style_resblocks(f_share), f_share=f_share)

    def decode(self, content: ContentOutput, style: StyleFeature) -> torch.Tensor:
        if content.f_c.shape[-2:] != style.f_s.shape[-2:]:
            raise ValueError(
                f"コンテンツとスタイルの空間サイズが一致しません: {tuple(content.f_c.shape[-2:])} / {tuple(style.f_s.shape[-2:])}"
            )
        return self.decoder(content.f_c, style.f_s, content.f_e2)

    def translate_with_features(self, img: torch.Tensor) -> Tuple[torch.Tensor, ContentOutput, StyleFeature]:
        """変換結果と中間特徴をまとめて返す。"""
        content = self.content_encode(img)
        style = self.style_encode(img)
        return self.decode(content, style), content, style

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.translate_with_features(img)[0]


def translate(gen: Generator, img: torch.Tensor) -> torch.Tensor:
    """decode(content_encode(img), style_encode(img))。"""
    return gen(img)


class PatchDiscriminator(nn.Module):
    """パッチ単位のスコアマップを出力する識別器。

    stride 2 の 4x4 畳み込みを num_layers 段（64, 128, 256, 512ch）重ね、
    1チャネルのスコア畳み込みで終える。
    """

    def __init__(self, base_channels: int = 64, num_layers: int = 4) -> None:
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(3, base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        ]
        channels = base_channels
        for n in range(1, num_layers):
            out_channels = base_channels * min(2**n, 8)
            layers += [
                nn.Conv2d(channels, out_channels, 4, stride=2, padding=1),
                nn.InstanceNorm2d(out_channels),
                nn.LeakyReLU(0.2),
            ]
            channels = out_channels
        layers.append(nn.Conv2d(channels, 1, 3, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.model(img)


class DualBranchAdversarialNetwork(nn.Module):
    """G: X→Y, F: Y→X と識別器 D_S（ソース側）, D_T（ターゲット側）。"""

    def __init__(
        self,
        base_channels: int = 64,
        num_resblocks: int = 9,
        disc_channels: int = 64,
        disc_layers: int = 4,
    ) -> None:
        super().__init__()
        stem = SharedStem(base_channels)
        self.G = Generator(stem, base_channels, num_resblocks)
        self.F = Generator(stem, base_channels, num_resblocks)
        self.D_S = PatchDiscriminator(disc_channels, disc_layers)
        self.D_T = PatchDiscriminator(disc_channels, disc_layers)
        init_weights(self)

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        # ModuleList.parameters() は共有ステムを重複なく列挙する
        return nn.ModuleList([self.G, self.F]).parameters()

    def discriminator_parameters(self) -> Iterator[nn.Parameter]:
        return nn.ModuleList([self.D_S, self.D_T]).parameters()

    def set_discriminators_trainable(self, trainable: bool) -> None:
        for p in self.discriminator_parameters():
            p.requires_grad_(trainable)
