"""ログ設定と、エポックごとの学習記録（JSON Lines）。"""
from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

LOG_FORMAT = "%(asctime)s %(name)s:%(levelname)s:%(message)s"


def configure_logging(level: int | str = logging.INFO) -> logging.Logger:
    """パッケージのロガーに標準エラー出力のハンドラを1つだけ設定する。"""
    package_logger = logging.getLogger("VehicleAdaptation")
    package_logger.setLevel(level)
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package_logger.addHandler(handler)
    return package_logger


class RunLog:
    """追記専用の JSON Lines ファイル。

    1行目は実効設定 {"event": "config", "config": ...}、
    以降はエポックごとに {epoch, losses, lr, wall_time}。
    """

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._start = time.perf_counter()

    def _append(self, record: Mapping[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def log_config(self, config: Mapping[str, Any], command: Optional[str] = None) -> None:
        record: Dict[str, Any] = {"event": "config", "config": dict(config)}
        if command is not None:
            record["command"] = command
        self._append(record)

    def log_epoch(self, epoch: int, losses: Mapping[str, Any], lr: float) -> None:
        self._append(
            {
                "epoch": epoch,
                "losses": dict(losses),
                "lr": lr,
                "wall_time": round(time.perf_counter() - self._start, 3),
            }
        )

    def read(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
