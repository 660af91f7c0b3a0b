"""CMC 曲線を PNG と CSV に書き出す。"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from PIL import Image, ImageDraw, ImageFont

from .retrieval_metrics import EvalReport


class CmcPlotter:
    """rank-k と一致率の折れ線グラフを描画するクラス。"""

    # 系列ごとの色（RGB）
    SERIES_COLORS = [
        (220, 50, 47),    # 赤
        (38, 139, 210),   # 青
        (133, 153, 0),    # 緑
        (211, 54, 130),   # マゼンタ
        (181, 137, 0),    # 黄
        (42, 161, 152),   # シアン
    ]

    def __init__(
        self,
        width: int = 640,
        height: int = 480,
        margin: int = 60,
        line_width: int = 2,
        font_size: int = 14,
    ) -> None:
        """初期化。

        Args:
            width: 画像の幅
            height: 画像の高さ
            margin: 軸の外側の余白（ピクセル）
            line_width: 曲線の線幅
            font_size: 目盛りと凡例のフォントサイズ
        """
        self.width = width
        self.height = height
        self.margin = margin
        self.line_width = line_width
        self.font_size = font_size
        self._font = None

    def _get_font(self) -> ImageFont.FreeTypeFont | ImageFont.ImageFont:
        """フォントを取得（キャッシュ）。"""
        if self._font is None:
            try:
                self._font = ImageFont.truetype("arial.ttf", self.font_size)
            except OSError:
                self._font = ImageFont.load_default()
        return self._font

    def _plot_box(self) -> Tuple[int, int, int, int]:
        return (self.margin, self.margin // 2, self.width - self.margin // 2, self.height - self.margin)

    def curve_points(self, cmc: Sequence[float], max_rank: int) -> List[Tuple[float, float]]:
        """CMC の各点をピクセル座標に変換する。x は rank、y は一致率（0..1）。"""
        x0, y0, x1, y1 = self._plot_box()
        span = max(max_rank - 1, 1)
        points = []
        for k, rate in enumerate(cmc[:max_rank], start=1):
            x = x0 + (x1 - x0) * (k - 1) / span
            y = y1 - (y1 - y0) * min(max(rate, 0.0), 1.0)
            points.append((x, y))
        return points

    def rate_at_pixel(self, y: float) -> float:
        """curve_points の y 座標を一致率に戻す。"""
        _, y0, _, y1 = self._plot_box()
        return (y1 - y) / (y1 - y0)

    def draw(self, reports: Sequence[EvalReport], max_rank: int) -> Image.Image:
        image = Image.new("RGB", (self.width, self.height), (255, 255, 255))
        draw = ImageDraw.Draw(image)
        font = self._get_font()
        x0, y0, x1, y1 = self._plot_box()

        # 軸と目盛り
        draw.rectangle([(x0, y0), (x1, y1)], outline=(0, 0, 0), width=1)
        for tick in range(0, 11, 2):
            y = y1 - (y1 - y0) * tick / 10
            draw.line([(x0 - 4, y), (x0, y)], fill=(0, 0, 0))
            draw.text((x0 - 40, y - self.font_size // 2), f"{tick / 10:.1f}", fill=(0, 0, 0), font=font)
        for k in sorted({1, max(1, max_rank // 2), max_rank}):
            x = x0 + (x1 - x0) * (k - 1) / max(max_rank - 1, 1)
            draw.line([(x, y1), (x, y1 + 4)], fill=(0, 0, 0))
            draw.text((x - 4, y1 + 8), str(k), fill=(0, 0, 0), font=font)
        draw.text(((x0 + x1) // 2 - 12, y1 + 8 + self.font_size), "rank", fill=(0, 0, 0), font=font)

        for i, report in enumerate(reports):
            color = self.SERIES_COLORS[i % len(self.SERIES_COLORS)]
            points = self.curve_points(report.cmc, max_rank)
            if len(points) > 1:
                draw.line(points, fill=color, width=self.line_width)
            elif points:
                px, py = points[0]
                draw.ellipse([(px - 2, py - 2), (px + 2, py + 2)], fill=color)
            # 凡例
            legend_y = y0 + 6 + i * (self.font_size + 4)
            draw.line([(x1 - 150, legend_y + self.font_size // 2), (x1 - 130, legend_y + self.font_size // 2)],
                      fill=color, width=self.line_width)
            draw.text((x1 - 124, legend_y), _label(report, i), fill=color, font=font)
        return image


def _label(report: EvalReport, position: int) -> str:
    return report.label or f"run{position + 1}"


def plot_cmc(
    reports: Sequence[EvalReport],
    output_path: Path | str,
    *,
    max_rank: Optional[int] = None,
    plotter: Optional[CmcPlotter] = None,
) -> Tuple[Path, Path]:
    """CMC 曲線の PNG と、同名の CSV（label,k,rate）を書き出す。

    Args:
        reports: 描画する評価結果（1件以上）
        output_path: PNG の出力先。CSV は拡張子を .csv にしたパス
        max_rank: 描画する最大 rank（省略時は最長の曲線の長さ）

    Returns:
        (PNG のパス, CSV のパス)
    """
    if not reports:
        raise ValueError("描画する評価結果がありません")
    png_path = Path(output_path)
    csv_path = png_path.with_suffix(".csv")
    png_path.parent.mkdir(parents=True, exist_ok=True)
    k_max = max_rank or max(len(r.cmc) for r in reports)

    (plotter or CmcPlotter()).draw(reports, k_max).save(png_path, format="PNG")

    with csv_path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "k", "rate"])
        for i, report in enumerate(reports):
            for k, rate in enumerate(report.cmc[:k_max], start=1):
                writer.writerow([_label(report, i), k, f"{rate:.6f}"])
    return png_path, csv_path
