"""パッケージ固有の例外。"""
from __future__ import annotations

import math
from typing import Iterable, Mapping


class NonFiniteLossError(FloatingPointError):
    """損失項が NaN または無限大になった。"""

    def __init__(self, term: str, value: float) -> None:
        super().__init__(f"損失項 {term} が有限値ではありません: {value}")
        self.term = term
        self.value = value


class CheckpointError(RuntimeError):
    """チェックポイントのマニフェストと実体が一致しない。"""

    def __init__(self, directory: str, problems: Iterable[str]) -> None:
        self.problems = list(problems)
        detail = "\n  ".join(self.problems)
        super().__init__(f"チェックポイントを読み込めません: {directory}\n  {detail}")


def ensure_finite(terms: Mapping[str, float]) -> None:
    """全ての項が有限値であることを確認し、違反した最初の項を名指しする。"""
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise NonFiniteLossError(name, float(value))
