"""検索評価: 距離行列、AP、mAP、CMC と VeRi / VehicleID のプロトコル。"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .dataset_index import DatasetIndex

logger = logging.getLogger(__name__)

VEHICLEID_TEST_SIZES = (800, 1600, 2400, 3200)


class Protocol(Enum):
    """評価プロトコル。"""

    VERI_CROSS_CAMERA = "veri_cross_camera"
    VEHICLEID_RANDOM_GALLERY = "vehicleid_random_gallery"
    PLAIN = "plain"


@dataclass
class EvalReport:
    """mAP と CMC（cmc[k-1] が rank-k の一致率）。"""

    mAP: float
    cmc: List[float]
    num_queries: int
    num_gallery: int
    protocol: str = Protocol.PLAIN.value
    num_skipped_queries: int = 0
    trials: int = 1
    label: str = ""

    def rank(self, k: int) -> float:
        """rank-k の一致率。k が曲線の長さを超える場合は最後の値。"""
        if k < 1:
            raise ValueError(f"k は1以上である必要があります: {k}")
        if not self.cmc:
            return 0.0
        return self.cmc[min(k, len(self.cmc)) - 1]

    def to_dict(self) -> dict:
        return asdict(self)

    def save_json(self, path: Path | str) -> Path:
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with output_path.open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)
        return output_path

    @classmethod
    def load_json(cls, path: Path | str) -> "EvalReport":
        with Path(path).open("r", encoding="utf-8") as f:
            return cls(**json.load(f))

    def save_cmc_csv(self, path: Path | str) -> Path:
        """(k, rate) の CSV を書く。"""
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with output_path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "rate"])
            for k, rate in enumerate(self.cmc, start=1):
                writer.writerow([k, f"{rate:.6f}"])
        return output_path


def pairwise_distance(Q: np.ndarray, G: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """クエリ x ギャラリーの距離行列。

    cosine は 1 - cos 類似度で [0, 2] に収まる。
    """
    Q = np.asarray(Q, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise ValueError(f"埋め込みの次元が一致しません: {Q.shape} / {G.shape}")
    if metric == "euclidean":
        return cdist(Q, G, metric="euclidean")
    if metric != "cosine":
        raise ValueError(f"未サポートの距離: {metric}")
    qn = Q / np.maximum(np.linalg.norm(Q, axis=1, keepdims=True), 1e-12)
    gn = G / np.maximum(np.linalg.norm(G, axis=1, keepdims=True), 1e-12)
    return np.clip(1.0 - qn @ gn.T, 0.0, 2.0)


def average_precision(ranked_relevance: Sequence[int] | np.ndarray) -> float:
    """AP = (1/R) Σ_{k: 正解} precision@k。

    正解が1つもない場合は ValueError。
    """
    relevance = np.asarray(ranked_relevance, dtype=bool)
    num_relevant = int(relevance.sum())
    if num_relevant == 0:
        raise ValueError("正解が含まれていないため AP を計算できません")
    hits = np.flatnonzero(relevance)
    precisions = np.arange(1, num_relevant + 1) / (hits + 1)
    return float(precisions.mean())


def _query_ranking(
    distances: np.ndarray,
    query_id: int,
    query_cam: int,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    protocol: Protocol,
) -> np.ndarray:
    """1クエリの並べ替え済み正解フラグ。同距離はギャラリー順。"""
    order = np.argsort(distances, kind="stable")
    keep = np.ones(order.shape[0], dtype=bool)
    if protocol is Protocol.VERI_CROSS_CAMERA:
        keep = ~((gallery_ids[order] == query_id) & (gallery_cams[order] == query_cam))
    order = order[keep]
    return gallery_ids[order] == query_id


def evaluate_arrays(
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    distmat: np.ndarray,
    protocol: Protocol | str = Protocol.PLAIN,
    max_rank: int = 50,
) -> EvalReport:
    """ラベル配列と距離行列から mAP と CMC を計算する。"""
    protocol = Protocol(protocol)
    num_q, num_g = distmat.shape
    if num_q != len(query_ids) or num_g != len(gallery_ids):
        raise ValueError(f"距離行列とラベルの数が一致しません: {distmat.shape} / ({len(query_ids)}, {len(gallery_ids)})")

    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    aps: List[float] = []
    skipped = 0
    for i in range(num_q):
        relevance = _query_ranking(distmat[i], query_ids[i], query_cams[i], gallery_ids, gallery_cams, protocol)
        if not relevance.any():
            skipped += 1
            continue
        aps.append(average_precision(relevance))
        first = int(np.flatnonzero(relevance)[0])
        if first < max_rank:
            cmc_hits[first:] += 1

    if skipped:
        logger.warning("ギャラリーに正解がないクエリを %d 件スキップしました", skipped)
    valid = len(aps)
    cmc = (cmc_hits / valid).tolist() if valid else [0.0] * max_rank
    return EvalReport(
        mAP=float(np.mean(aps)) if aps else 0.0,
        cmc=cmc,
        num_queries=valid,
        num_gallery=num_g,
        protocol=protocol.value,
        num_skipped_queries=skipped,
    )


def _labels(index: DatasetIndex) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.array([r.vehicle_id for r in index.records], dtype=np.int64)
    cams = np.array([r.camera_id for r in index.records], dtype=np.int64)
    return ids, cams


def evaluate(
    query_index: DatasetIndex,
    gallery_index: DatasetIndex,
    Q: np.ndarray,
    G: np.ndarray,
    protocol: Protocol | str = Protocol.PLAIN,
    *,
    metric: str = "cosine",
    max_rank: int = 50,
) -> EvalReport:
    """インデックスと埋め込みから評価する。

    veri_cross_camera ではクエリと同じIDかつ同じカメラのギャラリー画像を除外する。
    """
    if len(Q) != len(query_index) or len(G) != len(gallery_index):
        raise ValueError(
            f"埋め込みとインデックスの件数が一致しません: {len(Q)}/{len(query_index)}, {len(G)}/{len(gallery_index)}"
        )
    q_ids, q_cams = _labels(query_index)
    g_ids, g_cams = _labels(gallery_index)
    distmat = pairwise_distance(Q, G, metric)
    return evaluate_arrays(q_ids, q_cams, g_ids, g_cams, distmat, protocol, max_rank)


def sample_vehicleid_gallery(
    test_index: DatasetIndex, test_size: int, rng: np.random.Generator
) -> Tuple[List[int], List[int]]:
    """test_size 個のIDを選び、各IDから1枚をギャラリー、残りをクエリにする。

    Returns:
        (クエリ位置, ギャラリー位置)
    """
    groups = test_index.ids_to_records()
    if len(groups) < test_size:
        raise ValueError(f"IDが不足しています: 必要 {test_size} / 実際 {len(groups)}")
    ids = sorted(groups)
    if len(ids) > test_size:
        ids = sorted(int(i) for i in rng.choice(ids, size=test_size, replace=False))
    queries: List[int] = []
    gallery: List[int] = []
    for vid in ids:
        members = groups[vid]
        chosen = members[int(rng.integers(len(members)))]
        gallery.append(chosen)
        queries.extend(p for p in members if p != chosen)
    return queries, gallery


def vehicleid_multi_trial_eval(
    test_index: DatasetIndex,
    embeddings: np.ndarray,
    test_size: int = 800,
    trials: int = 10,
    seed: int = 0,
    *,
    metric: str = "cosine",
    max_rank: int = 50,
) -> EvalReport:
    """ギャラリー抽出を trials 回繰り返し、mAP と CMC を平均する。"""
    if trials < 1:
        raise ValueError(f"trials は1以上である必要があります: {trials}")
    if len(embeddings) != len(test_index):
        raise ValueError(f"埋め込みとインデックスの件数が一致しません: {len(embeddings)} / {len(test_index)}")
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        queries, gallery = sample_vehicleid_gallery(test_index, test_size, rng)
        reports.append(
            evaluate(
                test_index.subset(queries),
                test_index.subset(gallery),
                embeddings[queries],
                embeddings[gallery],
                Protocol.VEHICLEID_RANDOM_GALLERY,
                metric=metric,
                max_rank=max_rank,
            )
        )
    return EvalReport(
        mAP=float(np.mean([r.mAP for r in reports])),
        cmc=np.mean([r.cmc for r in reports], axis=0).tolist(),
        num_queries=int(round(np.mean([r.num_queries for r in reports]))),
        num_gallery=reports[0].num_gallery,
        protocol=Protocol.VEHICLEID_RANDOM_GALLERY.value,
        num_skipped_queries=int(sum(r.num_skipped_queries for r in reports)),
        trials=trials,
    )
