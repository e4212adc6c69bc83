"""
未来スコア統合サービス（ライト・フューチャーアウェアアテンション）

各行の可視な未来スコアをカーネルサイズ k のスライディング窓最大値で集約し、
先頭 p 列（アテンションシンク）に統合してから厳密な因果ソフトマックスを行う。
"""

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, List, Optional, Sequence

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
import structlog

from app.core.exceptions import FutureMaskError
from app.core.layout import AttentionInputs, DenseMatrix, SequenceLayout
from app.services.attention_service import (
    AttentionOutput,
    future_attention_mass,
    masked_forward,
    scores,
    softmax_forward,
)
from app.services.mask_service import MaskKind, build_mask, visibility_block


logger = structlog.get_logger(__name__)


class MergeConfigError(FutureMaskError):
    """統合設定エラー"""
    pass


class Distribute(str, Enum):
    """プレフィックス列への配分方法"""
    REPLICATE = "replicate"
    DIVIDE = "divide"


class MergeConfig(BaseModel):
    """カーネルプーリング統合設定"""
    kernel_size: int = Field(default=1, ge=1, description="スライディング窓サイズ k")
    prefix_size: int = Field(default=1, ge=1, description="統合先の先頭列数 p")
    merge_scale: float = Field(default=1.0, description="プール値に掛ける倍率")
    distribute: Distribute = Field(default=Distribute.REPLICATE)

    model_config = ConfigDict(frozen=True)

    def prefix_ratio(self, total: int) -> float:
        """prefix_size / L"""
        self.check_prefix(total)
        return self.prefix_size / total

    def check_prefix(self, total: int) -> None:
        if self.prefix_size > total:
            raise MergeConfigError(f"prefix_size {self.prefix_size} exceeds sequence length {total}")


@dataclass(frozen=True, eq=False)
class MergeSummary:
    """行ごとのプール済み未来スコアと可視未来数"""
    pooled: npt.NDArray[np.float64]               # H×L
    valid_future_counts: npt.NDArray[np.int64]    # L


class WindowMaxPooler:
    """pool_row のストリーミング版

    可視な未来スコアを列順に1つずつ受け取り、直近 k 個の単調減少キューで窓最大値を保ち、
    窓最大値の和を左から順に積み上げる。pool_row とビット単位で一致する。
    """

    def __init__(self, kernel_size: int):
        if kernel_size < 1:
            raise MergeConfigError(f"kernel_size must be >= 1: {kernel_size}")
        self.kernel_size = kernel_size
        self.count = 0
        self.total = 0.0
        self.running_max = -np.inf
        self._window: Deque[tuple[int, float]] = deque()

    def push(self, value: float) -> None:
        value = float(value)
        position = self.count
        self.count += 1
        if value > self.running_max:
            self.running_max = value

        while self._window and self._window[-1][1] <= value:
            self._window.pop()
        self._window.append((position, value))
        if self._window[0][0] <= position - self.kernel_size:
            self._window.popleft()

        if self.count >= self.kernel_size:
            self.total += self._window[0][1]

    def extend(self, values: Sequence[float]) -> None:
        for value in values:
            self.push(value)

    def result(self) -> float:
        if self.count == 0:
            return 0.0
        if self.count < self.kernel_size:
            return float(self.running_max)
        return self.total


def future_indicator(layout: SequenceLayout, kind: MaskKind) -> npt.NDArray[np.bool_]:
    """M^p：j > i かつ kind の下で可視なセルが True"""
    index = np.arange(layout.total)
    allowed = visibility_block(layout, kind, index, index)
    return allowed & (index[np.newaxis, :] > index[:, np.newaxis])


def pool_row(
    scores_row: npt.ArrayLike,
    indicator_row: npt.ArrayLike,
    k: int,
) -> float:
    """1行の未来スコアのカーネルプーリング C(B, μ)

    F = 指示子が True の位置のスコアを列順に詰めた列（長さ T）。
    T = 0 なら 0、T < k なら max(F)、それ以外はストライド1の窓最大値の和。
    """
    if k < 1:
        raise MergeConfigError(f"kernel_size must be >= 1: {k}")
    row = np.asarray(scores_row, dtype=np.float64)
    mask = np.asarray(indicator_row, dtype=bool)
    compact = row[mask]
    T = compact.size
    if T == 0:
        return 0.0
    if T < k:
        return float(compact.max())

    window_max = sliding_window_view(compact, k).max(axis=1)
    # 左から順の逐次和（ストリーミング版と同じ加算順序）
    total = 0.0
    for value in window_max.tolist():
        total += value
    return total


def merge_summary(
    score_matrix: DenseMatrix,
    layout: SequenceLayout,
    kind: MaskKind,
    kernel_size: int,
) -> MergeSummary:
    """全行（全ヘッド）のプール値"""
    s = np.asarray(score_matrix)
    if s.ndim == 2:
        s = s[np.newaxis]
    indicator = future_indicator(layout, kind)
    counts = indicator.sum(axis=1).astype(np.int64)

    pooled = np.zeros((s.shape[0], layout.total), dtype=np.float64)
    for h in range(s.shape[0]):
        for i in np.flatnonzero(counts):
            pooled[h, i] = pool_row(s[h, i], indicator[i], kernel_size)
    return MergeSummary(pooled=pooled, valid_future_counts=counts)


def prefix_widths(total: int, prefix_size: int) -> npt.NDArray[np.int64]:
    """各行の統合先列数 min(p, i)（i は1始まり）"""
    return np.minimum(prefix_size, np.arange(1, total + 1)).astype(np.int64)


def prefix_bias(pooled: npt.NDArray[np.float64], cfg: MergeConfig, total: int) -> npt.NDArray[np.float64]:
    """行ごとのプレフィックス列への加算値（H×L）"""
    value = cfg.merge_scale * pooled
    if cfg.distribute is Distribute.DIVIDE:
        value = value / prefix_widths(total, cfg.prefix_size)
    return value


def merge_scores(
    score_matrix: DenseMatrix,
    layout: SequenceLayout,
    kind: MaskKind,
    cfg: MergeConfig,
) -> DenseMatrix:
    """統合後のロジット h′ = B + C + M^c（厳密に因果的）"""
    L = layout.total
    cfg.check_prefix(L)

    s = np.asarray(score_matrix)
    squeeze = s.ndim == 2
    if squeeze:
        s = s[np.newaxis]
    if s.shape[-2:] != (L, L):
        raise MergeConfigError(f"score matrix shape {s.shape} does not match L={L}")

    summary = merge_summary(s, layout, kind, cfg.kernel_size)
    bias = prefix_bias(summary.pooled, cfg, L).astype(s.dtype)

    index = np.arange(L)
    in_prefix = index[np.newaxis, :] < prefix_widths(L, cfg.prefix_size)[:, np.newaxis]
    causal = index[np.newaxis, :] <= index[:, np.newaxis]

    adjusted = s + np.where(in_prefix, bias[:, :, np.newaxis], s.dtype.type(0.0))
    logits = np.where(causal, adjusted, -np.inf).astype(s.dtype)
    return logits[0] if squeeze else logits


def light_forward(
    inputs: AttentionInputs,
    kind: MaskKind,
    cfg: MergeConfig,
    retain_probs: Optional[bool] = None,
) -> AttentionOutput:
    """統合ロジットに対する因果ソフトマックス順伝播"""
    L = inputs.layout.total
    logits = merge_scores(scores(inputs), inputs.layout, kind, cfg)
    index = np.arange(L)
    causal = index[np.newaxis, :] <= index[:, np.newaxis]

    result = softmax_forward(logits, causal, inputs.values, retain_probs)
    logger.debug(
        "Light forward completed",
        kind=kind.value,
        total=L,
        kernel_size=cfg.kernel_size,
        prefix_size=cfg.prefix_size,
        merge_scale=cfg.merge_scale,
        distribute=cfg.distribute.value,
    )
    return result


def prefix_mass(probs: DenseMatrix, prefix_size: int) -> npt.NDArray[np.float64]:
    """各行の先頭 min(p, i) 列の確率質量"""
    p = np.asarray(probs, dtype=np.float64)
    L = p.shape[-1]
    index = np.arange(L)
    in_prefix = index[np.newaxis, :] < prefix_widths(L, prefix_size)[:, np.newaxis]
    return np.where(in_prefix, p, 0.0).sum(axis=-1)


class PrefixSweepRow(BaseModel):
    """プレフィックス比スイープの1行"""
    prefix_size: int
    prefix_ratio: float
    visual_prefix_mass: Optional[float]
    visual_future_mass_unmerged: Optional[float]


def prefix_ratio_sweep(
    inputs: AttentionInputs,
    kind: MaskKind,
    cfg: MergeConfig,
    prefix_sizes: Sequence[int],
) -> List[PrefixSweepRow]:
    """プレフィックスサイズごとの視覚行のプレフィックス質量（全ヘッド平均）

    比較用に、統合しない kind マスクでの視覚行の未来質量も併記する。
    """
    layout = inputs.layout
    m = layout.num_visual
    unmerged = masked_forward(inputs, build_mask(layout, kind), retain_probs=True)
    assert unmerged.probs is not None
    future = future_attention_mass(unmerged.probs)[:, :m]
    future_mean = float(future.mean()) if m else None

    rows = []
    for p in prefix_sizes:
        swept = cfg.model_copy(update={"prefix_size": int(p)})
        merged = light_forward(inputs, kind, swept, retain_probs=True)
        assert merged.probs is not None
        mass = prefix_mass(merged.probs, swept.prefix_size)[:, :m]
        rows.append(
            PrefixSweepRow(
                prefix_size=swept.prefix_size,
                prefix_ratio=swept.prefix_ratio(layout.total),
                visual_prefix_mass=float(mass.mean()) if m else None,
                visual_future_mass_unmerged=future_mean,
            )
        )
    logger.info("Prefix ratio sweep completed", kind=kind.value, points=len(rows))
    return rows
