"""
マスク構築サービス

因果マスク M^c と3種のフューチャーアウェアマスク（M^f, M^v2v, M^v2t）。
すべてのマスクで対角と下三角は可視、テキストクエリ行は因果マスクと一致する。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, List

import numpy as np
import numpy.typing as npt
import structlog

from app.core.exceptions import FutureMaskError
from app.core.layout import SequenceLayout


logger = structlog.get_logger(__name__)

# (rows, cols) の0始まりインデックス配列から可視性タイルを返す関数
VisibilityFn = Callable[[npt.NDArray[np.intp], npt.NDArray[np.intp]], npt.NDArray[np.bool_]]


class MaskError(FutureMaskError):
    """マスク関連エラー"""
    pass


class MaskIndexError(MaskError):
    """インデックス範囲外"""
    pass


class MaskKind(str, Enum):
    """マスク種別（CLI値: causal | f | v2v | v2t）"""
    CAUSAL = "causal"
    FULL = "f"
    V2V = "v2v"
    V2T = "v2t"

    @property
    def is_future_aware(self) -> bool:
        return self is not MaskKind.CAUSAL


@dataclass(frozen=True, eq=False)
class MaskMatrix:
    """L×L の加算マスク（値は 0 または -inf）"""
    layout: SequenceLayout
    kind: MaskKind
    entries: npt.NDArray[np.float64]

    @property
    def allowed(self) -> npt.NDArray[np.bool_]:
        """可視セル（entries == 0）"""
        return self.entries == 0.0

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.allowed))

    def visible_columns(self, i: int) -> List[int]:
        """行 i（1始まり）の可視列集合（1始まり）"""
        return [int(j) + 1 for j in np.flatnonzero(self.allowed[i - 1])]

    def to_csv_rows(self) -> List[List[str]]:
        """CSV出力用の行（"0" / "-inf"）"""
        return [["0" if v == 0.0 else "-inf" for v in row] for row in self.entries]


def visible(layout: SequenceLayout, kind: MaskKind, i: int, j: int) -> bool:
    """セル (i, j)（1始まり）が kind の下で可視か

    j ≤ i は常に可視。j > i の場合は i ∈ 𝒱 のときのみ:
      FULL: すべての未来、V2V: j ∈ 𝒱、V2T: j ∈ 𝒯。
    """
    L = layout.total
    if not (1 <= i <= L and 1 <= j <= L):
        raise MaskIndexError(f"index out of range: (i={i}, j={j}) for L={L}")
    if j <= i:
        return True
    if not layout.is_visual(i):
        return False
    if kind is MaskKind.FULL:
        return True
    if kind is MaskKind.V2V:
        return layout.is_visual(j)
    if kind is MaskKind.V2T:
        return layout.is_text(j)
    return False


def visibility_block(
    layout: SequenceLayout,
    kind: MaskKind,
    rows: npt.NDArray[np.intp],
    cols: npt.NDArray[np.intp],
) -> npt.NDArray[np.bool_]:
    """0始まりの行・列インデックスに対する可視性タイル（visible のベクトル版）"""
    r = np.asarray(rows)[:, np.newaxis]
    c = np.asarray(cols)[np.newaxis, :]
    past = c <= r
    if kind is MaskKind.CAUSAL:
        return past

    m = layout.num_visual
    visual_query = r < m
    if kind is MaskKind.FULL:
        future_ok = np.ones_like(c, dtype=bool)
    elif kind is MaskKind.V2V:
        future_ok = c < m
    else:
        future_ok = c >= m
    return past | (visual_query & future_ok)


def visibility_fn(layout: SequenceLayout, kind: MaskKind) -> VisibilityFn:
    """レイアウト・種別を束縛した可視性述語"""
    def predicate(rows: npt.NDArray[np.intp], cols: npt.NDArray[np.intp]) -> npt.NDArray[np.bool_]:
        return visibility_block(layout, kind, rows, cols)
    return predicate


def build_mask(layout: SequenceLayout, kind: MaskKind) -> MaskMatrix:
    """加算マスク行列の構築"""
    index = np.arange(layout.total)
    allowed = visibility_block(layout, kind, index, index)
    entries = np.where(allowed, 0.0, -np.inf)
    entries.setflags(write=False)

    logger.debug(
        "Mask built",
        kind=kind.value,
        num_visual=layout.num_visual,
        num_text=layout.num_text,
        valid=int(np.count_nonzero(allowed)),
    )
    return MaskMatrix(layout=layout, kind=kind, entries=entries)


def causal_count(total: int) -> int:
    """L(L+1)/2"""
    return total * (total + 1) // 2


def valid_attention_count(layout: SequenceLayout, kind: MaskKind, merged: bool = False) -> int:
    """プリフィルの有効アテンション数（マスクされないスコアセル数）の閉形式"""
    L = layout.total
    m = layout.num_visual
    n = layout.num_text
    base = causal_count(L)

    # 統合版は過去の可視セルにしか書き込まないので因果と同数
    if merged or kind is MaskKind.CAUSAL:
        return base
    if kind is MaskKind.FULL:
        return base + m * L - m * (m + 1) // 2
    if kind is MaskKind.V2V:
        return base + m * (m - 1) // 2
    return base + m * n
