"""
参照アテンションサービス（全行列を実体化する素朴実装）

probs = row-softmax(B + mask)、output = probs · V、logsumexp は可視セルのみで計算する。
マスクされたセルは記号的に扱い、確率はちょうど0になる。
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt
import structlog

from app.core.config import settings
from app.core.exceptions import FutureMaskError
from app.core.layout import AttentionInputs, DenseMatrix, SequenceLayout
from app.services.mask_service import MaskMatrix


logger = structlog.get_logger(__name__)


class AttentionError(FutureMaskError):
    """アテンション計算エラー"""
    pass


class ShapeMismatchError(AttentionError):
    """入力とマスクのレイアウト・形状不一致"""
    pass


class DistributionGapError(AttentionError):
    """分布ギャップ計算エラー"""
    pass


@dataclass(frozen=True, eq=False)
class AttentionOutput:
    """アテンション出力（ヘッド軸付き）"""
    output: DenseMatrix                    # H×L×d
    logsumexp: DenseMatrix                 # H×L
    probs: Optional[DenseMatrix] = None    # H×L×L（保持時のみ）

    @property
    def num_heads(self) -> int:
        return int(self.output.shape[0])


@dataclass(frozen=True, eq=False)
class DistributionGap:
    """行ごとの対称KLと視覚行・テキスト行の平均"""
    per_row: npt.NDArray[np.float64]
    visual_mean: Optional[float]
    text_mean: Optional[float]
    mean: float


def dot_scores(q: DenseMatrix, k: DenseMatrix, head_dim: Optional[int] = None) -> DenseMatrix:
    """スコア B = Q Kᵀ / √d（R×d と C×d から R×C）

    ヘッド次元方向の和は左から順に固定順序で積み上げる。
    行列全体でもタイル内でも同じセルは同じビット列になる。
    """
    d = head_dim if head_dim is not None else q.shape[-1]
    acc = np.zeros((q.shape[0], k.shape[0]), dtype=np.result_type(q.dtype, k.dtype))
    for t in range(q.shape[-1]):
        acc += np.multiply.outer(q[:, t], k[:, t])
    acc /= acc.dtype.type(math.sqrt(d))
    return acc


def scores(inputs: AttentionInputs) -> DenseMatrix:
    """ヘッドごとのスコア行列 H×L×L"""
    return np.stack(
        [dot_scores(inputs.queries[h], inputs.keys[h], inputs.head_dim) for h in range(inputs.num_heads)]
    )


def _should_retain(total: int, retain_probs: Optional[bool]) -> bool:
    if retain_probs is not None:
        return retain_probs
    return total <= settings.PROBS_RETENTION_LIMIT


def softmax_forward(
    logits: DenseMatrix,
    allowed: npt.NDArray[np.bool_],
    values: DenseMatrix,
    retain_probs: Optional[bool] = None,
) -> AttentionOutput:
    """可視セルのみの行ソフトマックスと V との積

    logits: H×L×L、allowed: L×L（全ヘッド共通）、values: H×L×d。
    行最大値は可視セルのみから取り、非可視セルは exp(-inf) = 0 として扱う。
    """
    row_max = np.max(np.where(allowed, logits, -np.inf), axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise AttentionError("fully masked attention row")

    shifted = np.where(allowed, logits - row_max, -np.inf)
    weights = np.exp(shifted)
    denom = weights.sum(axis=-1, keepdims=True)
    probs = weights / denom

    output = probs @ values
    lse = (row_max + np.log(denom))[..., 0]

    total = logits.shape[-1]
    return AttentionOutput(
        output=output,
        logsumexp=lse,
        probs=probs if _should_retain(total, retain_probs) else None,
    )


def masked_forward(
    inputs: AttentionInputs,
    mask: MaskMatrix,
    retain_probs: Optional[bool] = None,
) -> AttentionOutput:
    """マスク付き順伝播（参照実装）"""
    if mask.layout != inputs.layout:
        raise ShapeMismatchError(
            f"mask layout {mask.layout} does not match inputs layout {inputs.layout}"
        )
    L = inputs.layout.total
    if mask.entries.shape != (L, L):
        raise ShapeMismatchError(f"mask shape {mask.entries.shape} != ({L}, {L})")

    result = softmax_forward(scores(inputs), mask.allowed, inputs.values, retain_probs)
    logger.debug(
        "Masked forward completed",
        kind=mask.kind.value,
        total=L,
        num_heads=inputs.num_heads,
        retained=result.probs is not None,
    )
    return result


def _symmetric_kl(p: npt.NDArray[np.float64], q: npt.NDArray[np.float64]) -> float:
    support = (p > 0) & (q > 0)
    if not support.any():
        raise DistributionGapError("empty support intersection")
    ps = p[support] / p[support].sum()
    qs = q[support] / q[support].sum()
    return float(np.sum((ps - qs) * (np.log(ps) - np.log(qs))))


def distribution_gap(
    probs_a: DenseMatrix,
    probs_b: DenseMatrix,
    layout: SequenceLayout,
) -> DistributionGap:
    """2つの行確率行列（L×L）の行ごとの対称KL（共通サポート上で再正規化）"""
    L = layout.total
    a = np.asarray(probs_a, dtype=np.float64)
    b = np.asarray(probs_b, dtype=np.float64)
    if a.shape != (L, L) or b.shape != (L, L):
        raise ShapeMismatchError(f"expected ({L}, {L}) matrices, got {a.shape} and {b.shape}")

    per_row = np.array([_symmetric_kl(a[i], b[i]) for i in range(L)])
    m = layout.num_visual
    visual = per_row[:m]
    text = per_row[m:]
    return DistributionGap(
        per_row=per_row,
        visual_mean=float(visual.mean()) if visual.size else None,
        text_mean=float(text.mean()) if text.size else None,
        mean=float(per_row.mean()),
    )


def future_attention_mass(probs: DenseMatrix) -> npt.NDArray[np.float64]:
    """各行の確率質量のうち未来列（j > i）にある割合"""
    p = np.asarray(probs, dtype=np.float64)
    upper = np.triu(np.ones(p.shape[-2:], dtype=bool), k=1)
    return np.where(upper, p, 0.0).sum(axis=-1)


def attention_entropy(probs: DenseMatrix) -> npt.NDArray[np.float64]:
    """各行のシャノンエントロピー（自然対数）"""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
