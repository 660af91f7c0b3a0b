"""コマンドラインの入口。

サブコマンド: synth, train-dan, translate, train-reid, eval, export-embeddings, plot-cmc。
終了コードは成功 0、使い方の誤り 1、実行時の失敗 2。
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attnet import export_embeddings, extract_embeddings, load_embeddings
from .checkpoint import load_checkpoint, save_checkpoint
from .cmc_plotter import CmcPlotter, plot_cmc
from .dan_trainer import Direction, train_dan, translate_dataset
from .dataset_index import DatasetIndex, DatasetRecord, Domain, Layout, Split, load_dataset_index, load_query_gallery
from .reid_trainer import attnet_from_checkpoint, train_reid
from .retrieval_metrics import EvalReport, Protocol, evaluate, vehicleid_multi_trial_eval
from .run_log import RunLog, configure_logging
from .synthetic import SyntheticSpec, generate_synthetic_domains
from .train_config import TrainConfig, apply_overrides, build_dataclass, merge_settings, resolve_data_path

logger = logging.getLogger(__name__)

RUN_LOG_NAME = "run_log.jsonl"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
PLOTTER_DEFAULTS: Dict[str, int] = {"width": 640, "height": 480, "margin": 60, "line_width": 2, "font_size": 14}


class UsageError(Exception):
    """引数や設定キーの誤り。"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class CommandSpec:
    """解析済みのサブコマンド。"""

    name: str
    config_path: Optional[Path] = None
    overrides: List[str] = field(default_factory=list)
    output_dir: Path = Path("runs")
    seed: Optional[int] = None
    args: argparse.Namespace = field(default_factory=argparse.Namespace)

    def effective_config(self, stage: str) -> TrainConfig:
        """設定ファイル + --set + --seed を適用した設定。未知のキーは UsageError。"""
        try:
            config = TrainConfig.load(self.config_path) if self.config_path else TrainConfig()
            config = config.with_overrides(self.overrides)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        changes: Dict[str, Any] = {"stage": stage}
        if self.seed is not None:
            changes["seed"] = self.seed
        return dataclasses.replace(config, **changes)

    def settings(self, defaults: Dict[str, Any], explicit: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """既定値 < 設定ファイル < 個別の引数 < --set の順に重ねた設定辞書。未知のキーは UsageError。"""
        try:
            data = dict(defaults)
            if self.config_path:
                with self.config_path.open("r", encoding="utf-8") as f:
                    data = merge_settings(data, json.load(f))
            data = merge_settings(data, {k: v for k, v in (explicit or {}).items() if v is not None})
            return apply_overrides(data, self.overrides)
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON 設定ファイル")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="設定の上書き（繰り返し可）")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="出力ディレクトリ")
    parser.add_argument("--seed", type=int, help="乱数シード")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="davr", description="ドメイン適応による車両再識別パイプライン")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="2ドメインの合成データを生成")
    _add_common(p)
    p.add_argument("--ids", type=int, help="ID数（num_identities）")
    p.add_argument("--per-id", type=int, help="IDあたりの枚数（images_per_id）")
    p.add_argument("--size", type=int, help="画像の一辺（image_size）")

    p = sub.add_parser("train-dan", help="DAN を学習")
    _add_common(p)

    p = sub.add_parser("translate", help="学習済み DAN でデータセットを変換")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, help="変換するインデックス JSON（省略時は data.source_index）")
    p.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.SOURCE_TO_TARGET.value)
    p.add_argument("--force", action="store_true", help="設定ハッシュ不一致でも読み込む")

    p = sub.add_parser("train-reid", help="ATTNet を学習")
    _add_common(p)

    p = sub.add_parser("eval", help="mAP と CMC を計算")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, help="ATTNet のチェックポイント")
    p.add_argument("--query-embeddings", type=Path)
    p.add_argument("--gallery-embeddings", type=Path)
    p.add_argument("--test-embeddings", type=Path)
    p.add_argument("--protocol", choices=[pr.value for pr in Protocol], default=Protocol.VERI_CROSS_CAMERA.value)
    p.add_argument("--metric", choices=["cosine", "euclidean"], default="cosine")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--max-rank", type=int, default=50)
    p.add_argument("--label", default="")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("export-embeddings", help="埋め込みを書き出す")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--name", default="embeddings.bin")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("plot-cmc", help="CMC 曲線を描画")
    _add_common(p)
    p.add_argument("reports", nargs="+", type=Path, help="EvalReport の JSON")
    p.add_argument("--name", default="cmc.png")
    p.add_argument("--max-rank", type=int)
    return parser


def parse_command(argv: Sequence[str]) -> CommandSpec:
    args = build_parser().parse_args(list(argv))
    return CommandSpec(
        name=args.command,
        config_path=getattr(args, "config", None),
        overrides=list(getattr(args, "overrides", [])),
        output_dir=args.out,
        seed=args.seed,
        args=args,
    )


# --- データの解決 ---


def _index_from(index_path: Optional[str], root: Optional[str], layout: str, split: Split,
                domain: Domain, test_size: Optional[int] = None) -> Optional[DatasetIndex]:
    if index_path:
        return DatasetIndex.load_json(resolve_data_path(index_path))
    if root:
        return load_dataset_index(resolve_data_path(root), layout, split=split, domain=domain, test_size=test_size)
    return None


def _require(index: Optional[DatasetIndex], what: str) -> DatasetIndex:
    if index is None:
        raise UsageError(f"{what} が指定されていません（data.*_index または data.*_root）")
    return index


def _query_gallery(config: TrainConfig) -> Tuple[DatasetIndex, DatasetIndex]:
    data = config.data
    if data.query_index and data.gallery_index:
        return (
            DatasetIndex.load_json(resolve_data_path(data.query_index)),
            DatasetIndex.load_json(resolve_data_path(data.gallery_index)),
        )
    if data.query_root and Layout(data.layout) is Layout.VERI776:
        return load_query_gallery(resolve_data_path(data.query_root), data.layout)
    if data.query_root and data.gallery_root:
        query = load_dataset_index(resolve_data_path(data.query_root), data.layout, split=Split.QUERY,
                                   domain=Domain.TARGET)
        gallery = load_dataset_index(resolve_data_path(data.gallery_root), data.layout, split=Split.GALLERY,
                                     domain=Domain.TARGET, id_map=query.id_map)
        return query, gallery
    raise UsageError("query / gallery が指定されていません（data.query_* と data.gallery_*）")


def _checkpoint_dir(config: TrainConfig, out: Path) -> Path:
    path = Path(config.checkpoint_dir)
    return path if path.is_absolute() else out / path


# --- サブコマンド ---


def cmd_synth(spec: CommandSpec, run_log: RunLog) -> int:
    args = spec.args
    data = spec.settings(
        SyntheticSpec().to_dict(),
        {"num_identities": args.ids, "images_per_id": args.per_id, "image_size": args.size, "seed": spec.seed},
    )
    try:
        synth = build_dataclass(SyntheticSpec, data)
    except (KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    run_log.log_config(synth.to_dict(), command=spec.name)
    source, target = generate_synthetic_domains(synth, spec.output_dir)
    print(f"source={len(source)} target={len(target)} -> {spec.output_dir / 'synth'}")
    return EXIT_OK


def cmd_train_dan(spec: CommandSpec, run_log: RunLog) -> int:
    config = spec.effective_config("dan")
    run_log.log_config(config.to_dict(), command=spec.name)
    data = config.data
    source = _require(_index_from(data.source_index, data.source_root, data.source_layout or data.layout,
                                  Split.TRAIN, Domain.SOURCE), "ソースドメイン")
    target = _require(_index_from(data.target_index, data.target_root, data.target_layout or data.layout,
                                  Split.TRAIN, Domain.TARGET), "ターゲットドメイン")
    ckpt = train_dan(config, source, target, run_log=run_log, checkpoint_dir=_checkpoint_dir(config, spec.output_dir))
    path = save_checkpoint(ckpt, spec.output_dir / "final")
    print(f"checkpoint={path}")
    return EXIT_OK


def cmd_translate(spec: CommandSpec, run_log: RunLog) -> int:
    config = spec.effective_config("dan")
    run_log.log_config(config.to_dict(), command=spec.name)
    args = spec.args
    if args.index is not None:
        index = DatasetIndex.load_json(args.index)
    else:
        index = _require(
            _index_from(config.data.source_index, config.data.source_root,
                        config.data.source_layout or config.data.layout, Split.TRAIN, Domain.SOURCE),
            "変換するインデックス",
        )
    ckpt = load_checkpoint(args.checkpoint, force=args.force)
    result = translate_dataset(ckpt, index, args.direction, spec.output_dir)
    print(f"translated={len(result)} -> {spec.output_dir / 'translated' / args.direction}")
    return EXIT_OK


def cmd_train_reid(spec: CommandSpec, run_log: RunLog) -> int:
    config = spec.effective_config("reid")
    run_log.log_config(config.to_dict(), command=spec.name)
    data = config.data
    train_index = _require(_index_from(data.train_index, data.train_root, data.layout, Split.TRAIN, Domain.TARGET),
                           "学習データ")
    ckpt = train_reid(config, train_index, run_log=run_log, checkpoint_dir=_checkpoint_dir(config, spec.output_dir))
    path = save_checkpoint(ckpt, spec.output_dir / "final")
    print(f"checkpoint={path}")
    return EXIT_OK


def _embed(ckpt_dir: Path, records: Sequence[DatasetRecord], force: bool) -> np.ndarray:
    model = attnet_from_checkpoint(load_checkpoint(ckpt_dir, force=force))
    return extract_embeddings(model, records)


def _report_line(report: EvalReport) -> str:
    ranks = " ".join(f"rank-{k}={report.rank(k):.4f}" for k in (1, 5) if k <= len(report.cmc))
    return f"mAP={report.mAP:.4f} {ranks}".rstrip()


def cmd_eval(spec: CommandSpec, run_log: RunLog) -> int:
    args = spec.args
    config = spec.effective_config("reid")
    run_log.log_config({**config.to_dict(), "eval": {k: str(v) for k, v in vars(args).items()}}, command=spec.name)
    protocol = Protocol(args.protocol)

    if protocol is Protocol.VEHICLEID_RANDOM_GALLERY:
        if args.test_embeddings is not None:
            embeddings, records = load_embeddings(args.test_embeddings)
            test_index = DatasetIndex(records=records, split=Split.TEST)
        else:
            if args.checkpoint is None:
                raise UsageError("--checkpoint か --test-embeddings を指定してください")
            test_index = _require(
                _index_from(config.data.test_index, config.data.test_root, Layout.VEHICLEID.value, Split.TEST,
                            Domain.TARGET, test_size=config.data.test_size),
                "テストリスト",
            )
            embeddings = _embed(args.checkpoint, test_index.records, args.force)
        report = vehicleid_multi_trial_eval(
            test_index, embeddings, config.data.test_size, args.trials, config.seed,
            metric=args.metric, max_rank=args.max_rank,
        )
    else:
        if args.query_embeddings is not None and args.gallery_embeddings is not None:
            Q, q_records = load_embeddings(args.query_embeddings)
            G, g_records = load_embeddings(args.gallery_embeddings)
            query = DatasetIndex(records=q_records, split=Split.QUERY)
            gallery = DatasetIndex(records=g_records, split=Split.GALLERY)
        else:
            if args.checkpoint is None:
                raise UsageError("--checkpoint か --query-embeddings/--gallery-embeddings を指定してください")
            query, gallery = _query_gallery(config)
            Q = _embed(args.checkpoint, query.records, args.force)
            G = _embed(args.checkpoint, gallery.records, args.force)
        report = evaluate(query, gallery, Q, G, protocol, metric=args.metric, max_rank=args.max_rank)

    report.label = args.label
    report.save_json(spec.output_dir / "eval_report.json")
    report.save_cmc_csv(spec.output_dir / "cmc.csv")
    print(_report_line(report))
    return EXIT_OK


def cmd_export_embeddings(spec: CommandSpec, run_log: RunLog) -> int:
    args = spec.args
    config = spec.effective_config("reid")
    run_log.log_config(config.to_dict(), command=spec.name)
    index = DatasetIndex.load_json(args.index)
    matrix = _embed(args.checkpoint, index.records, args.force)
    path = export_embeddings(matrix, index.records, spec.output_dir / args.name)
    print(f"embeddings={path} shape={matrix.shape}")
    return EXIT_OK


def cmd_plot_cmc(spec: CommandSpec, run_log: RunLog) -> int:
    args = spec.args
    settings = spec.settings(PLOTTER_DEFAULTS)
    run_log.log_config(
        {"reports": [str(p) for p in args.reports], "max_rank": args.max_rank, "plotter": settings}, command=spec.name
    )
    reports = [EvalReport.load_json(p) for p in args.reports]
    plotter = CmcPlotter(**settings)
    png, csv_path = plot_cmc(reports, spec.output_dir / args.name, max_rank=args.max_rank, plotter=plotter)
    print(f"png={png} csv={csv_path}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[CommandSpec, RunLog], int]] = {
    "synth": cmd_synth,
    "train-dan": cmd_train_dan,
    "translate": cmd_translate,
    "train-reid": cmd_train_reid,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
    "plot-cmc": cmd_plot_cmc,
}


def dispatch(argv: Sequence[str]) -> int:
    """argv を解析してサブコマンドを実行し、終了コードを返す。"""
    try:
        spec = parse_command(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    configure_logging(spec.args.log_level.upper())
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    run_log = RunLog(spec.output_dir / RUN_LOG_NAME)
    try:
        return COMMANDS[spec.name](spec, run_log)
    except UsageError as exc:
        print(f"{build_parser().format_usage()}davr {spec.name}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.error("%s に失敗しました: %s", spec.name, exc)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)
