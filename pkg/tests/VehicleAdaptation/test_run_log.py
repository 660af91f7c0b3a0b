"""ログ設定と学習記録のテスト。"""
import logging
from pathlib import Path

from VehicleAdaptation.run_log import RunLog, configure_logging


def test_config_then_epochs(tmp_path: Path) -> None:
    run_log = RunLog(tmp_path / "nested" / "run_log.jsonl")
    run_log.log_config({"seed": 3}, command="train-dan")
    run_log.log_epoch(1, {"total": 2.5}, 2e-4)
    run_log.log_epoch(2, {"total": 1.5}, 2e-4)

    records = run_log.read()
    assert records[0] == {"event": "config", "config": {"seed": 3}, "command": "train-dan"}
    assert [r["epoch"] for r in records[1:]] == [1, 2]
    assert records[2]["losses"] == {"total": 1.5}
    assert records[2]["wall_time"] >= records[1]["wall_time"] >= 0


def test_read_missing_file(tmp_path: Path) -> None:
    assert RunLog(tmp_path / "none.jsonl").read() == []


def test_configure_logging_replaces_handlers() -> None:
    """何度呼んでもハンドラは1つ。"""
    configure_logging("DEBUG")
    package_logger = configure_logging(logging.WARNING)
    assert len(package_logger.handlers) == 1
    assert package_logger.level == logging.WARNING
    package_logger.handlers.clear()
    package_logger.setLevel(logging.NOTSET)
