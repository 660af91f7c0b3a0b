"""コマンドラインのテスト。"""
import json
from pathlib import Path
from typing import Dict

import numpy as np
import pytest
from PIL import Image

from VehicleAdaptation.attnet import export_embeddings
from VehicleAdaptation.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, dispatch
from VehicleAdaptation.dataset_index import DatasetRecord
from VehicleAdaptation.retrieval_metrics import EvalReport

TINY_DAN = [
    "--set", "device=cpu",
    "--set", "dan.image_size=16",
    "--set", "dan.batch_size=4",
    "--set", "dan.epochs=1",
    "--set", "dan.base_channels=2",
    "--set", "dan.num_resblocks=1",
    "--set", "dan.disc_channels=4",
    "--set", "dan.disc_layers=3",
]

TINY_REID = [
    "--set", "device=cpu",
    "--set", "reid.image_size=16",
    "--set", "reid.batch_size=4",
    "--set", "reid.epochs=1",
    "--set", "reid.backbone=tiny",
    "--set", "reid.hidden_dims=[16,8]",
    "--set", "reid.batches_per_epoch=2",
    "--set", "reid.lr_schedule=[[1,0.01]]",
]


def _synth(out: Path) -> int:
    return dispatch(["synth", "--out", str(out), "--ids", "3", "--per-id", "2", "--size", "16", "--seed", "7"])


def _snapshot(root: Path) -> Dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_subcommand_is_usage_error(capsys: pytest.CaptureFixture) -> None:
    assert dispatch(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_help_exits_cleanly(capsys: pytest.CaptureFixture) -> None:
    assert dispatch(["--help"]) == EXIT_OK
    assert "train-dan" in capsys.readouterr().out


def test_synth_is_reproducible(tmp_path: Path) -> None:
    """同じ出力先に2回生成しても synth/ 以下はバイト単位で一致する。"""
    assert _synth(tmp_path) == EXIT_OK
    first = _snapshot(tmp_path / "synth")
    assert _synth(tmp_path) == EXIT_OK
    assert _snapshot(tmp_path / "synth") == first
    assert len([name for name in first if name.endswith(".png")]) == 12


def test_run_log_starts_with_config(tmp_path: Path) -> None:
    _synth(tmp_path)
    first = json.loads((tmp_path / "run_log.jsonl").read_text(encoding="utf-8").splitlines()[0])
    assert first["event"] == "config"
    assert first["command"] == "synth"
    assert first["config"]["num_identities"] == 3


def test_unknown_override_key_is_usage_error(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    code = dispatch(["train-dan", "--out", str(tmp_path), "--set", "dan.no_such_key=1"])
    assert code == EXIT_USAGE
    assert "dan.no_such_key" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path: Path) -> None:
    _synth(tmp_path)
    code = dispatch([
        "translate", "--out", str(tmp_path),
        "--checkpoint", str(tmp_path / "missing"),
        "--index", str(tmp_path / "synth" / "source" / "index.json"),
    ])
    assert code == EXIT_RUNTIME


def test_eval_self_retrieval(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """埋め込みが単位行列で ID が全て異なれば mAP=1。"""
    records = [DatasetRecord(image_path=f"{i}.png", vehicle_id=i, camera_id=0) for i in range(6)]
    path = export_embeddings(np.eye(6, dtype=np.float32), records, tmp_path / "emb.bin")
    code = dispatch([
        "eval", "--out", str(tmp_path / "eval"),
        "--query-embeddings", str(path), "--gallery-embeddings", str(path),
        "--protocol", "plain", "--max-rank", "5", "--label", "self",
    ])
    assert code == EXIT_OK
    assert "mAP=1.0000 rank-1=1.0000 rank-5=1.0000" in capsys.readouterr().out
    report = EvalReport.load_json(tmp_path / "eval" / "eval_report.json")
    assert report.mAP == pytest.approx(1.0)
    assert report.label == "self"
    assert (tmp_path / "eval" / "cmc.csv").exists()


def test_plot_cmc(tmp_path: Path) -> None:
    report = EvalReport(mAP=0.5, cmc=[0.5, 0.7, 0.9], num_queries=4, num_gallery=8, label="a")
    path = report.save_json(tmp_path / "report.json")
    assert dispatch(["plot-cmc", str(path), "--out", str(tmp_path), "--name", "curve.png"]) == EXIT_OK
    assert (tmp_path / "curve.png").exists()
    assert (tmp_path / "curve.csv").exists()


def test_tiny_pipeline(tmp_path: Path) -> None:
    """synth → train-dan → translate → train-reid → export-embeddings → eval を通す。"""
    assert _synth(tmp_path) == EXIT_OK
    source_index = tmp_path / "synth" / "source" / "index.json"
    target_index = tmp_path / "synth" / "target" / "index.json"

    dan_out = tmp_path / "dan"
    assert dispatch([
        "train-dan", "--out", str(dan_out), *TINY_DAN,
        "--set", f"data.source_index={source_index}",
        "--set", f"data.target_index={target_index}",
    ]) == EXIT_OK
    assert (dan_out / "final" / "manifest.json").exists()
    assert (dan_out / "checkpoints" / "epoch_001" / "manifest.json").exists()

    assert dispatch([
        "translate", "--out", str(tmp_path), *TINY_DAN,
        "--checkpoint", str(dan_out / "final"), "--index", str(source_index),
    ]) == EXIT_OK
    translated_index = tmp_path / "translated" / "source_to_target" / "index.json"
    assert translated_index.exists()

    reid_out = tmp_path / "reid"
    assert dispatch([
        "train-reid", "--out", str(reid_out), *TINY_REID,
        "--set", f"data.train_index={translated_index}",
    ]) == EXIT_OK
    assert (reid_out / "final" / "manifest.json").exists()

    assert dispatch([
        "export-embeddings", "--out", str(tmp_path / "emb"), *TINY_REID,
        "--checkpoint", str(reid_out / "final"), "--index", str(target_index),
    ]) == EXIT_OK
    assert (tmp_path / "emb" / "embeddings.bin").exists()

    assert dispatch([
        "eval", "--out", str(tmp_path / "eval"), *TINY_REID,
        "--checkpoint", str(reid_out / "final"),
        "--set", f"data.query_index={target_index}",
        "--set", f"data.gallery_index={target_index}",
    ]) == EXIT_OK
    report = EvalReport.load_json(tmp_path / "eval" / "eval_report.json")
    assert 0.0 <= report.mAP <= 1.0


def test_synth_accepts_config_and_overrides(tmp_path: Path) -> None:
    """synth も --config と --set を受け付け、--set が最後に効く。"""
    config = tmp_path / "synth.json"
    config.write_text(json.dumps({"num_identities": 4, "image_size": 16}), encoding="utf-8")
    code = dispatch([
        "synth", "--out", str(tmp_path), "--config", str(config),
        "--ids", "3", "--set", "images_per_id=2", "--set", "target_style.brightness=-0.3",
    ])
    assert code == EXIT_OK
    spec = json.loads((tmp_path / "synth" / "spec.json").read_text(encoding="utf-8"))
    assert spec["num_identities"] == 3
    assert spec["images_per_id"] == 2
    assert spec["image_size"] == 16
    assert spec["target_style"]["brightness"] == -0.3
    assert len(list((tmp_path / "synth").rglob("*.png"))) == 12


def test_synth_unknown_override_is_usage_error(tmp_path: Path) -> None:
    assert dispatch(["synth", "--out", str(tmp_path), "--set", "wheels=4"]) == EXIT_USAGE


def test_plot_cmc_overrides_plotter(tmp_path: Path) -> None:
    report = EvalReport(mAP=0.5, cmc=[0.5, 0.7], num_queries=2, num_gallery=4)
    path = report.save_json(tmp_path / "report.json")
    code = dispatch(["plot-cmc", str(path), "--out", str(tmp_path), "--set", "width=320", "--set", "height=240"])
    assert code == EXIT_OK
    with Image.open(tmp_path / "cmc.png") as image:
        assert image.size == (320, 240)
