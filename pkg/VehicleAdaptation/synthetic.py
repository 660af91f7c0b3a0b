"""机上検証用の決定論的な2ドメイン合成車両データセット。"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .dataset_index import DatasetIndex, DatasetRecord, Domain, Split
from .image_loader import denormalize, normalize

logger = logging.getLogger(__name__)

Color = Tuple[int, int, int]


@dataclass(frozen=True)
class DomainStyle:
    """ドメインの見た目（照明・解像度・背景）。

    brightness は [-1, 1] 正規化空間での加算オフセット。
    """

    brightness: float = 0.0
    blur_radius: float = 0.0
    palette: Tuple[Color, ...] = ((120, 120, 120),)

    def __post_init__(self) -> None:
        if not -0.5 <= self.brightness <= 0.5:
            raise ValueError(f"brightness は [-0.5, 0.5] の範囲で指定してください: {self.brightness}")
        if self.blur_radius < 0:
            raise ValueError(f"blur_radius は 0 以上である必要があります: {self.blur_radius}")
        if not self.palette:
            raise ValueError("palette が空です")


@dataclass(frozen=True)
class SyntheticSpec:
    """合成データセットの仕様。"""

    num_identities: int = 20
    images_per_id: int = 8
    image_size: int = 64
    num_cameras: int = 4
    source_style: DomainStyle = field(
        default_factory=lambda: DomainStyle(0.2, 0.0, ((110, 120, 130), (130, 120, 110)))
    )
    target_style: DomainStyle = field(
        default_factory=lambda: DomainStyle(-0.2, 1.0, ((120, 128, 116), (124, 112, 128)))
    )
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class SyntheticVehicleRenderer:
    """IDごとに決まった色と2つのマークを持つ角丸矩形の「車両」を描く。"""

    def __init__(self, spec: SyntheticSpec) -> None:
        if spec.image_size % 4 != 0:
            raise ValueError(f"image_size は4の倍数である必要があります: {spec.image_size}")
        if spec.num_identities < 2 or spec.images_per_id < 2:
            raise ValueError(
                "num_identities と images_per_id は2以上が必要です: "
                f"{spec.num_identities}, {spec.images_per_id}"
            )
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        n = spec.num_identities
        # 車体色とマーク色、マーク位置（車体内の相対座標）
        self._body_colors = rng.integers(40, 216, size=(n, 3))
        self._mark_colors = rng.integers(40, 216, size=(n, 2, 3))
        self._mark_positions = rng.uniform(0.15, 0.65, size=(n, 2, 2))

    def render(self, vehicle_id: int, image_number: int, domain: Domain) -> Image.Image:
        """1枚をレンダリングして uint8 RGB 画像として返す。"""
        spec = self.spec
        style = spec.source_style if domain is Domain.SOURCE else spec.target_style
        domain_key = 0 if domain is Domain.SOURCE else 1
        rng = np.random.default_rng([spec.seed, 1, domain_key, vehicle_id, image_number])
        size = spec.image_size

        background = style.palette[int(rng.integers(len(style.palette)))]
        canvas = Image.new("RGB", (size, size), tuple(int(c) for c in background))
        draw = ImageDraw.Draw(canvas)

        # 視点のゆらぎ: 大きさと位置
        scale = rng.uniform(0.85, 1.1)
        width = size * 0.6 * scale
        height = size * 0.4 * scale
        cx = size / 2 + rng.uniform(-0.08, 0.08) * size
        cy = size / 2 + rng.uniform(-0.08, 0.08) * size
        x0, y0 = cx - width / 2, cy - height / 2
        draw.rounded_rectangle(
            [x0, y0, x0 + width, y0 + height],
            radius=max(1, int(height * 0.2)),
            fill=tuple(int(c) for c in self._body_colors[vehicle_id]),
        )
        mirror = bool(rng.integers(2))
        mark = max(2.0, width * 0.18)
        for k in range(2):
            rx, ry = self._mark_positions[vehicle_id, k]
            if mirror:
                rx = 1.0 - rx - 0.18
            mx, my = x0 + rx * width, y0 + ry * height
            draw.ellipse(
                [mx, my, mx + mark, my + mark],
                fill=tuple(int(c) for c in self._mark_colors[vehicle_id, k]),
            )

        array = normalize(np.asarray(canvas))
        array = np.clip(array + style.brightness, -1.0, 1.0)
        if style.blur_radius > 0:
            array = ndimage.gaussian_filter(array, sigma=(style.blur_radius, style.blur_radius, 0), mode="reflect")
        return Image.fromarray(denormalize(array))


def generate_synthetic_domains(
    spec: SyntheticSpec, output_dir: Path | str
) -> Tuple[DatasetIndex, DatasetIndex]:
    """2ドメイン分の合成画像を書き出してインデックスを返す。

    画像は ``<output_dir>/synth/<domain>/<id>/<n>.png`` に保存され、
    各ドメインのインデックスは ``synth/<domain>/index.json`` に書き出される。
    """
    renderer = SyntheticVehicleRenderer(spec)
    base = Path(output_dir) / "synth"
    indexes = []
    for domain in (Domain.SOURCE, Domain.TARGET):
        records = []
        for vehicle_id in range(spec.num_identities):
            id_dir = base / domain.value / f"{vehicle_id:04d}"
            id_dir.mkdir(parents=True, exist_ok=True)
            for n in range(spec.images_per_id):
                path = id_dir / f"{n}.png"
                renderer.render(vehicle_id, n, domain).save(path, format="PNG")
                records.append(
                    DatasetRecord(
                        image_path=str(path),
                        vehicle_id=vehicle_id,
                        camera_id=n % spec.num_cameras,
                        domain_tag=domain,
                    )
                )
        index = DatasetIndex(
            records=records,
            split=Split.TRAIN,
            id_map={i: i for i in range(spec.num_identities)},
        )
        index.save_json(base / domain.value / "index.json")
        indexes.append(index)

    with (base / "spec.json").open("w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2)
    logger.info(
        "合成データを生成しました: %d ID x %d 枚 x 2 ドメイン -> %s",
        spec.num_identities,
        spec.images_per_id,
        base,
    )
    return indexes[0], indexes[1]
