"""
ブロック化アテンションサービス（オンラインソフトマックス）

Q を B_r 行、K/V を B_c 列のブロックに分けてストリーミングし、
行ごとの実行中最大値 m と正規化項 ℓ を保持して出力を再スケールする。
L×L のスコア行列やマスクは実体化しない（マスクタイルは可視性述語から都度生成）。

更新式:
  m_new = max(m_old, rowmax(S))
  ℓ_new = exp(m_old - m_new)·ℓ_old + rowsum(exp(S - m_new))
  O_new = exp(m_old - m_new)·O_old + exp(S - m_new)·V
  最後に O / ℓ、logsumexp = m + log ℓ
"""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import structlog

from app.core.exceptions import FutureMaskError
from app.core.layout import AttentionInputs, DenseMatrix, SequenceLayout
from app.services.attention_service import AttentionOutput, ShapeMismatchError, dot_scores
from app.services.mask_service import MaskKind, VisibilityFn, visibility_fn
from app.services.merge_service import (
    MergeConfig,
    MergeSummary,
    WindowMaxPooler,
    prefix_bias,
    prefix_widths,
)


logger = structlog.get_logger(__name__)


class BlockSpecError(FutureMaskError):
    """ブロックサイズエラー"""
    pass


@dataclass(frozen=True)
class BlockSpec:
    """ブロックサイズ（B_r 行 × B_c 列、L を割り切る必要はない）"""
    block_rows: int = 16
    block_cols: int = 16

    def __post_init__(self) -> None:
        if self.block_rows < 1 or self.block_cols < 1:
            raise BlockSpecError(
                f"block sizes must be >= 1: B_r={self.block_rows}, B_c={self.block_cols}"
            )

    def row_blocks(self, total: int) -> Iterator[Tuple[int, int]]:
        """T_r 個の行ブロック [start, stop)"""
        for start in range(0, total, self.block_rows):
            yield start, min(start + self.block_rows, total)

    def col_blocks(self, total: int, start: int = 0) -> Iterator[Tuple[int, int]]:
        """列ブロック [start, stop)（start 列から）"""
        for begin in range(start, total, self.block_cols):
            yield begin, min(begin + self.block_cols, total)


@dataclass
class WorkspaceTracker:
    """補助記憶の要素数を数えるフック

    クエリブロックごとの常駐バッファ（m, ℓ, 出力ブロック）と、
    タイルごとに確保して捨てる一時配列を分けて数え、同時に存在する最大要素数を記録する。
    """
    resident: int = 0
    current: int = 0
    peak: int = 0
    tiles: int = 0
    skipped_tiles: int = 0

    def begin_block(self) -> None:
        self.resident = 0
        self.current = 0

    def hold(self, elements: int) -> None:
        self.resident += int(elements)
        self.current = self.resident
        self.peak = max(self.peak, self.current)

    def begin_tile(self) -> None:
        self.current = self.resident
        self.tiles += 1

    def observe(self, *arrays: np.ndarray) -> None:
        self.current += sum(int(a.size) for a in arrays)
        self.peak = max(self.peak, self.current)


def _validate(inputs: AttentionInputs, layout: SequenceLayout) -> None:
    if inputs.layout != layout:
        raise ShapeMismatchError(f"layout {layout} does not match inputs layout {inputs.layout}")


def _stream_row_block(
    q: DenseMatrix,
    keys: DenseMatrix,
    values: DenseMatrix,
    rows: npt.NDArray[np.intp],
    spec: BlockSpec,
    visibility: VisibilityFn,
    head_dim: int,
    tracker: WorkspaceTracker,
    bias: Optional[npt.NDArray[np.float64]] = None,
    widths: Optional[npt.NDArray[np.int64]] = None,
) -> Tuple[DenseMatrix, npt.NDArray[np.float64]]:
    """1つのクエリブロックについて全列ブロックをストリーミング

    bias/widths が与えられた場合、列 j < widths[row] のロジットに bias[row] を加える（統合パス）。
    """
    total = keys.shape[0]
    nr = rows.size
    dtype = q.dtype

    # 実行中統計は精度によらず64ビット
    m = np.full(nr, -np.inf, dtype=np.float64)
    ell = np.zeros(nr, dtype=np.float64)
    acc = np.zeros((nr, values.shape[-1]), dtype=np.float64)
    tracker.begin_block()
    tracker.hold(m.size + ell.size + acc.size)

    for c0, c1 in spec.col_blocks(total):
        cols = np.arange(c0, c1)
        tile_mask = visibility(rows, cols)
        if not tile_mask.any():
            tracker.skipped_tiles += 1
            continue
        tracker.begin_tile()

        s = dot_scores(q, keys[c0:c1], head_dim)
        if bias is not None and widths is not None:
            in_prefix = cols[np.newaxis, :] < widths[:, np.newaxis]
            s = s + np.where(in_prefix, bias[:, np.newaxis].astype(dtype), dtype.type(0.0))
        s = np.where(tile_mask, s.astype(np.float64), -np.inf)

        m_new = np.maximum(m, s.max(axis=1))
        # ここまで可視セルが無い行は統計を変えない
        seen = np.isfinite(m_new)
        m_safe = np.where(seen, m_new, 0.0)
        alpha = np.where(seen, np.exp(m - m_safe), 1.0)
        p = np.exp(s - m_safe[:, np.newaxis])
        tracker.observe(tile_mask, s, p)

        ell = alpha * ell + p.sum(axis=1)
        acc = alpha[:, np.newaxis] * acc + p @ values[c0:c1].astype(np.float64)
        m = m_new

    out = (acc / ell[:, np.newaxis]).astype(dtype)
    lse = m + np.log(ell)
    return out, lse


def _blocked_forward(
    inputs: AttentionInputs,
    spec: BlockSpec,
    visibility: VisibilityFn,
    tracker: WorkspaceTracker,
    bias: Optional[npt.NDArray[np.float64]] = None,
    widths: Optional[npt.NDArray[np.int64]] = None,
) -> AttentionOutput:
    L = inputs.layout.total
    output = np.empty((inputs.num_heads, L, inputs.head_dim), dtype=inputs.dtype)
    lse = np.empty((inputs.num_heads, L), dtype=np.float64)

    for h in range(inputs.num_heads):
        for r0, r1 in spec.row_blocks(L):
            block_out, block_lse = _stream_row_block(
                inputs.queries[h, r0:r1],
                inputs.keys[h],
                inputs.values[h],
                np.arange(r0, r1),
                spec,
                visibility,
                inputs.head_dim,
                tracker,
                bias=None if bias is None else bias[h, r0:r1],
                widths=None if widths is None else widths[r0:r1],
            )
            output[h, r0:r1] = block_out
            lse[h, r0:r1] = block_lse

    return AttentionOutput(output=output, logsumexp=lse.astype(inputs.dtype), probs=None)


def flash_forward(
    inputs: AttentionInputs,
    layout: SequenceLayout,
    kind: MaskKind,
    spec: BlockSpec,
    tracker: Optional[WorkspaceTracker] = None,
    visibility: Optional[VisibilityFn] = None,
) -> AttentionOutput:
    """フューチャーアウェアマスク付きブロック化順伝播

    visibility を渡すとマスク述語を差し替えられる（等価性スイープの故障注入用）。
    """
    _validate(inputs, layout)
    predicate = visibility or visibility_fn(layout, kind)
    tracker = tracker if tracker is not None else WorkspaceTracker()

    result = _blocked_forward(inputs, spec, predicate, tracker)
    logger.debug(
        "Flash forward completed",
        kind=kind.value,
        total=layout.total,
        block_rows=spec.block_rows,
        block_cols=spec.block_cols,
        tiles=tracker.tiles,
        skipped_tiles=tracker.skipped_tiles,
    )
    return result


def flash_merge_summary(
    inputs: AttentionInputs,
    layout: SequenceLayout,
    kind: MaskKind,
    kernel_size: int,
    spec: BlockSpec,
    tracker: Optional[WorkspaceTracker] = None,
) -> MergeSummary:
    """パス1：未来の可視セルだけをストリーミングして行ごとのプール値を集計

    各行のスコアは列順に WindowMaxPooler へ渡されるので、結果は B_c によらずビット単位で一致する。
    """
    _validate(inputs, layout)
    predicate = visibility_fn(layout, kind)
    tracker = tracker if tracker is not None else WorkspaceTracker()
    L = layout.total

    pooled = np.zeros((inputs.num_heads, L), dtype=np.float64)
    counts = np.zeros(L, dtype=np.int64)

    for h in range(inputs.num_heads):
        for r0, r1 in spec.row_blocks(L):
            rows = np.arange(r0, r1)
            poolers: List[WindowMaxPooler] = [WindowMaxPooler(kernel_size) for _ in range(rows.size)]
            q = inputs.queries[h, r0:r1]
            tracker.begin_block()
            tracker.hold(rows.size * min(kernel_size, L))

            for c0, c1 in spec.col_blocks(L, start=r0 + 1):
                cols = np.arange(c0, c1)
                future = predicate(rows, cols) & (cols[np.newaxis, :] > rows[:, np.newaxis])
                if not future.any():
                    tracker.skipped_tiles += 1
                    continue
                tracker.begin_tile()
                s = dot_scores(q, inputs.keys[h, c0:c1], inputs.head_dim)
                tracker.observe(future, s)
                for local, pooler in enumerate(poolers):
                    pooler.extend(s[local, future[local]].tolist())

            for local, pooler in enumerate(poolers):
                pooled[h, r0 + local] = pooler.result()
                counts[r0 + local] = pooler.count

    return MergeSummary(pooled=pooled, valid_future_counts=counts)


def flash_merged_forward(
    inputs: AttentionInputs,
    layout: SequenceLayout,
    kind: MaskKind,
    cfg: MergeConfig,
    spec: BlockSpec,
    tracker: Optional[WorkspaceTracker] = None,
) -> AttentionOutput:
    """2パスの統合付きブロック化順伝播

    パス1でプール値を集計し、パス2で先頭列のロジットに C を加えながら因果マスクでストリーミングする。
    """
    _validate(inputs, layout)
    L = layout.total
    cfg.check_prefix(L)
    tracker = tracker if tracker is not None else WorkspaceTracker()

    summary = flash_merge_summary(inputs, layout, kind, cfg.kernel_size, spec, tracker)
    bias = prefix_bias(summary.pooled, cfg, L)
    widths = prefix_widths(L, cfg.prefix_size)

    result = _blocked_forward(
        inputs,
        spec,
        visibility_fn(layout, MaskKind.CAUSAL),
        tracker,
        bias=bias,
        widths=widths,
    )
    logger.debug(
        "Flash merged forward completed",
        kind=kind.value,
        total=L,
        kernel_size=cfg.kernel_size,
        prefix_size=cfg.prefix_size,
        block_rows=spec.block_rows,
        block_cols=spec.block_cols,
    )
    return result
