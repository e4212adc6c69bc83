"""
出力サービス

行列は CSV（浮動小数点は往復可能な最短表現）、レポートは JSON
（キー順ソート・2スペースインデント・末尾改行）で書き出す。
同じ入力からは常にバイト単位で同一のファイルになる。
"""

import csv
import io
import json
import sys
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
import structlog

from app.core.exceptions import FutureMaskError


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


class ExportError(FutureMaskError):
    """出力エラー"""
    pass


def format_float(value: float) -> str:
    """往復可能な最短表現（inf は "inf" / "-inf"）"""
    return repr(float(value))


def matrix_rows(matrix: npt.ArrayLike) -> List[List[str]]:
    """2次元配列を CSV 行に変換"""
    array = np.asarray(matrix, dtype=np.float64)
    if array.ndim == 1:
        array = array[np.newaxis, :]
    if array.ndim != 2:
        raise ExportError(f"expected a 1-D or 2-D array, got shape {array.shape}")
    return [[format_float(v) for v in row] for row in array.tolist()]


def render_csv(rows: Iterable[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(rows)
    return buffer.getvalue()


def render_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write_text(text: str, path: Optional[PathLike]) -> None:
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    # newline="" で改行変換を止める（プラットフォーム間でバイト一致）
    with open(target, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    logger.debug("File written", path=str(target), bytes=len(text.encode("utf-8")))


def write_csv(rows: Iterable[Sequence[str]], path: Optional[PathLike] = None) -> None:
    """CSV 書き出し（path が None なら標準出力）"""
    _write_text(render_csv(rows), path)


def write_matrix(matrix: npt.ArrayLike, path: Optional[PathLike] = None) -> None:
    write_csv(matrix_rows(matrix), path)


def write_json(payload: Any, path: Optional[PathLike] = None) -> None:
    """JSON 書き出し（path が None なら標準出力）"""
    _write_text(render_json(payload), path)


def write_text(text: str, path: Optional[PathLike] = None) -> None:
    _write_text(text, path)
