"""車両画像コーパスのインデックス構築（VeRi-776 / VehicleID / flat レイアウト）。"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")

# VeRi-776 の公開命名規則 <id>_c<cam>_<time>_<n>.jpg
_VERI_PATTERN = re.compile(r"^(\d+)_c(\d+)_")
_VERI_SPLIT_DIRS = {"train": "image_train", "query": "image_query", "gallery": "image_test"}


class Domain(Enum):
    """レコードが属するドメイン。"""

    SOURCE = "source"
    TARGET = "target"


class Split(Enum):
    """インデックスの分割種別。"""

    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"
    TEST = "test"  # VehicleID のテストリスト（ギャラリーは評価時に抽出）


class Layout(Enum):
    """ディレクトリレイアウト。"""

    VERI776 = "veri776"
    VEHICLEID = "vehicleid"
    FLAT = "flat"


@dataclass(frozen=True)
class DatasetRecord:
    """画像1枚分のラベル付きレコード。"""

    image_path: str
    vehicle_id: int
    camera_id: int = 0
    domain_tag: Domain = Domain.SOURCE

    def to_dict(self) -> Dict:
        return {
            "path": self.image_path,
            "vehicle_id": self.vehicle_id,
            "camera_id": self.camera_id,
            "domain": self.domain_tag.value,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DatasetRecord":
        return cls(
            image_path=str(data["path"]),
            vehicle_id=int(data["vehicle_id"]),
            camera_id=int(data.get("camera_id", 0)),
            domain_tag=Domain(data.get("domain", Domain.SOURCE.value)),
        )


@dataclass
class DatasetIndex:
    """レコード列と分割メタデータ。

    vehicle_id は分割内で 0..num_identities-1 に詰め直されている。
    id_map は元のIDから詰め直し後のIDへの対応表。
    """

    records: List[DatasetRecord]
    split: Split = Split.TRAIN
    id_map: Dict[int, int] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    @property
    def num_identities(self) -> int:
        return len({r.vehicle_id for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def ids_to_records(self) -> Dict[int, List[int]]:
        """vehicle_id ごとのレコード位置を返す（出現順）。"""
        groups: Dict[int, List[int]] = {}
        for pos, record in enumerate(self.records):
            groups.setdefault(record.vehicle_id, []).append(pos)
        return groups

    def subset(self, positions: Iterable[int], split: Optional[Split] = None) -> "DatasetIndex":
        """指定位置のレコードだけを持つインデックスを作る（IDはそのまま）。"""
        return DatasetIndex(
            records=[self.records[p] for p in positions],
            split=split or self.split,
            id_map=dict(self.id_map),
        )

    def save_json(self, path: Path | str) -> Path:
        """分割1つ分のインデックスをJSONで保存する。"""
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        data = {
            "split": self.split.value,
            "num_identities": self.num_identities,
            "records": [r.to_dict() for r in self.records],
        }
        with output_path.open("w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        return output_path

    @classmethod
    def load_json(cls, path: Path | str) -> "DatasetIndex":
        input_path = Path(path)
        if not input_path.exists():
            raise FileNotFoundError(input_path)
        with input_path.open("r", encoding="utf-8") as f:
            data = json.load(f)
        records = [DatasetRecord.from_dict(item) for item in data["records"]]
        return cls(records=records, split=Split(data.get("split", Split.TRAIN.value)))


def load_dataset_index(
    root: Path | str,
    layout: Layout | str = Layout.FLAT,
    *,
    split: Split | str = Split.TRAIN,
    domain: Domain | str = Domain.SOURCE,
    test_size: Optional[int] = None,
    id_map: Optional[Dict[int, int]] = None,
) -> DatasetIndex:
    """ディレクトリからインデックスを構築する。

    Args:
        root: データセットのルート
        layout: ディレクトリレイアウト
        split: 読み込む分割
        domain: 付与するドメインタグ
        test_size: VehicleID のテストリストのサイズ（800, 1600, ...）
        id_map: 共有するID対応表（query/gallery を同じ名前空間にする場合）

    Returns:
        IDを詰め直したインデックス。解析できないファイルは skipped に記録される。
    """
    root_path = Path(root)
    if not root_path.exists():
        raise FileNotFoundError(root_path)

    layout = Layout(layout)
    split = Split(split)
    domain = Domain(domain)

    if layout is Layout.VERI776:
        raw, skipped = _scan_veri(root_path, split)
    elif layout is Layout.VEHICLEID:
        raw, skipped = _scan_vehicleid(root_path, split, test_size)
    else:
        raw, skipped = _scan_flat(root_path)

    for name in skipped:
        logger.warning("解析できないファイルをスキップしました: %s", name)
    if skipped:
        logger.warning("%s: %d 件をスキップしました", root_path, len(skipped))

    mapping = dict(id_map) if id_map is not None else {}
    if id_map is None:
        for dense, raw_id in enumerate(sorted({vid for _, vid, _ in raw})):
            mapping[raw_id] = dense
    else:
        next_id = max(mapping.values(), default=-1) + 1
        for raw_id in sorted({vid for _, vid, _ in raw}):
            if raw_id not in mapping:
                mapping[raw_id] = next_id
                next_id += 1

    records = [
        DatasetRecord(image_path=str(path), vehicle_id=mapping[vid], camera_id=cam, domain_tag=domain)
        for path, vid, cam in raw
    ]
    used = {vid for _, vid, _ in raw}
    return DatasetIndex(
        records=records,
        split=split,
        id_map={k: v for k, v in mapping.items() if k in used},
        skipped=skipped,
    )


def load_query_gallery(
    root: Path | str,
    layout: Layout | str = Layout.VERI776,
    *,
    domain: Domain | str = Domain.TARGET,
) -> Tuple[DatasetIndex, DatasetIndex]:
    """query と gallery を1つのID名前空間で読み込む。"""
    query = load_dataset_index(root, layout, split=Split.QUERY, domain=domain)
    gallery = load_dataset_index(root, layout, split=Split.GALLERY, domain=domain, id_map=query.id_map)
    return query, gallery


def _candidate_files(directory: Path) -> List[Path]:
    # インデックスのJSONサイドカーは対象外
    return sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() != ".json")


def _scan_veri(root: Path, split: Split) -> Tuple[List[Tuple[Path, int, int]], List[str]]:
    sub = _VERI_SPLIT_DIRS.get(split.value)
    directory = root / sub if sub and (root / sub).is_dir() else root
    raw: List[Tuple[Path, int, int]] = []
    skipped: List[str] = []
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        match = _VERI_PATTERN.match(path.name)
        if path.suffix.lower() not in IMAGE_SUFFIXES or match is None:
            skipped.append(str(path))
            continue
        raw.append((path, int(match.group(1)), int(match.group(2))))
    return raw, skipped


def _scan_vehicleid(
    root: Path, split: Split, test_size: Optional[int]
) -> Tuple[List[Tuple[Path, int, int]], List[str]]:
    list_dir = root / "train_test_split"
    if split is Split.TRAIN:
        list_file = list_dir / "train_list.txt"
    else:
        list_file = list_dir / f"test_list_{test_size or 800}.txt"
    if not list_file.exists():
        raise FileNotFoundError(list_file)

    raw: List[Tuple[Path, int, int]] = []
    skipped: List[str] = []
    for line in list_file.read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        path = root / "image" / f"{parts[0]}.jpg"
        if len(parts) < 2 or not parts[1].isdigit() or not path.is_file():
            skipped.append(line)
            continue
        # VehicleID にはカメララベルがない
        raw.append((path, int(parts[1]), 0))
    return raw, skipped


def _scan_flat(root: Path) -> Tuple[List[Tuple[Path, int, int]], List[str]]:
    raw: List[Tuple[Path, int, int]] = []
    skipped: List[str] = []
    for path in _candidate_files(root):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            skipped.append(str(path))
            continue
        match = _VERI_PATTERN.match(path.name)
        if match is not None:
            raw.append((path, int(match.group(1)), int(match.group(2))))
        elif path.parent != root and path.parent.name.isdigit():
            # synth/<domain>/<id>/<n>.png 形式
            raw.append((path, int(path.parent.name), 0))
        else:
            skipped.append(str(path))
    return raw, skipped
