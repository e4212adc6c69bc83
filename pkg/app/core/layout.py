"""
系列レイアウト・数値型・シード付き合成データ

インデックスは文書とマスク数式では1始まり（視覚トークン 1..m、テキストトークン m+1..m+n）、
配列格納は0始まり。変換は型の境界でのみ行う。
"""

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
import numpy.typing as npt
import structlog

from app.core.exceptions import FutureMaskError


logger = structlog.get_logger(__name__)

# 行優先の実数行列（Q/K/V、スコア行列B、確率行列A）
DenseMatrix = npt.NDArray[np.floating]

UINT64_MAX = 2**64 - 1


class LayoutError(FutureMaskError):
    """レイアウト・入力形状エラー"""
    pass


class EmptySequenceError(LayoutError):
    """視覚・テキストとも0トークンの系列"""
    pass


class Precision(str, Enum):
    """数値精度"""
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32) if self is Precision.F32 else np.dtype(np.float64)


@dataclass(frozen=True)
class SequenceLayout:
    """視覚トークンm個の後にテキストトークンn個が続く平坦化系列"""
    num_visual: int
    num_text: int

    def __post_init__(self) -> None:
        if self.num_visual < 0 or self.num_text < 0:
            raise LayoutError(
                f"token counts must be non-negative: m={self.num_visual}, n={self.num_text}"
            )
        if self.num_visual + self.num_text < 1:
            raise EmptySequenceError("sequence must contain at least one token")

    @property
    def total(self) -> int:
        """系列長 L = m + n"""
        return self.num_visual + self.num_text

    @property
    def visual_indices(self) -> range:
        """視覚インデックス集合 𝒱 = [1, m]（1始まり）"""
        return range(1, self.num_visual + 1)

    @property
    def text_indices(self) -> range:
        """テキストインデックス集合 𝒯 = [m+1, m+n]（1始まり）"""
        return range(self.num_visual + 1, self.total + 1)

    def is_visual(self, i: int) -> bool:
        return 1 <= i <= self.num_visual

    def is_text(self, i: int) -> bool:
        return self.num_visual < i <= self.total

    def grow_text(self, count: int = 1) -> "SequenceLayout":
        """テキストトークンを末尾に追加したレイアウト（デコード用）"""
        return SequenceLayout(self.num_visual, self.num_text + count)


@dataclass(frozen=True)
class Seed:
    """64ビット符号なし整数シード"""
    value: int

    def __post_init__(self) -> None:
        if not 0 <= int(self.value) <= UINT64_MAX:
            raise LayoutError(f"seed must be a 64-bit unsigned integer: {self.value}")

    def generator(self, stream: int = 0) -> np.random.Generator:
        """Philox4x64-10 生成器（key = (seed, stream)、カウンタ0開始）

        同じシード・同じストリーム番号なら全プラットフォームで同一の乱数列になる。
        """
        key = np.array([int(self.value), stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def standard_normals(self, count: int, stream: int = 0) -> npt.NDArray[np.float64]:
        """Philox の生出力から Box-Muller で標準正規乱数を count 個作る

        64ビット語を2つずつ (a, b) と取り、u = (w >> 11) · 2⁻⁵³ で [0, 1) の一様乱数にする。
        r = √(−2 ln(1 − u_a)) として r·cos(2π u_b), r·sin(2π u_b) の順に並べ、先頭 count 個を返す。
        Generator の分布メソッドを経由しないので、生ストリームが同じなら numpy の版によらず同じ値になる。
        """
        pairs = (count + 1) // 2
        words = self.generator(stream).bit_generator.random_raw(2 * pairs)
        uniform = (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log1p(-uniform[0::2]))
        angle = 2.0 * np.pi * uniform[1::2]
        draws = np.empty(2 * pairs, dtype=np.float64)
        draws[0::2] = radius * np.cos(angle)
        draws[1::2] = radius * np.sin(angle)
        return draws[:count]


SeedLike = Union[Seed, int]


def as_seed(seed: SeedLike) -> Seed:
    return seed if isinstance(seed, Seed) else Seed(int(seed))


@dataclass(frozen=True, eq=False)
class AttentionInputs:
    """ヘッドごとの Q/K/V（形状 H×L×d）"""
    layout: SequenceLayout
    head_dim: int
    num_heads: int
    queries: DenseMatrix
    keys: DenseMatrix
    values: DenseMatrix

    def __post_init__(self) -> None:
        if self.head_dim < 1 or self.num_heads < 1:
            raise LayoutError(
                f"head_dim and num_heads must be >= 1: d={self.head_dim}, H={self.num_heads}"
            )
        expected = (self.num_heads, self.layout.total, self.head_dim)
        for name in ("queries", "keys", "values"):
            array = getattr(self, name)
            if array.shape != expected:
                raise LayoutError(f"{name} shape {array.shape} != expected {expected}")
            if not np.all(np.isfinite(array)):
                raise LayoutError(f"{name} contains non-finite values")
            # 構築後は不変
            array.setflags(write=False)

    @property
    def dtype(self) -> np.dtype:
        return self.queries.dtype

    @property
    def precision(self) -> Precision:
        return Precision.F32 if self.dtype == np.float32 else Precision.F64


def make_layout(num_visual: int, num_text: int) -> SequenceLayout:
    """レイアウト作成"""
    layout = SequenceLayout(num_visual, num_text)
    logger.debug("Layout created", num_visual=num_visual, num_text=num_text, total=layout.total)
    return layout


def build_inputs(
    layout: SequenceLayout,
    queries: npt.ArrayLike,
    keys: npt.ArrayLike,
    values: npt.ArrayLike,
    precision: Precision = Precision.F64,
) -> AttentionInputs:
    """配列から AttentionInputs を作成（2次元なら1ヘッドとみなす）"""
    arrays = []
    for array in (queries, keys, values):
        a = np.array(array, dtype=precision.dtype)
        if a.ndim == 2:
            a = a[np.newaxis]
        if a.ndim != 3:
            raise LayoutError(f"expected (H, L, d) or (L, d) array, got shape {a.shape}")
        arrays.append(a)
    num_heads, _, head_dim = arrays[0].shape
    return AttentionInputs(layout, head_dim, num_heads, *arrays)


def synth_inputs(
    layout: SequenceLayout,
    head_dim: int,
    num_heads: int,
    seed: SeedLike,
    precision: Precision = Precision.F64,
) -> AttentionInputs:
    """シード付き標準正規乱数による Q/K/V 生成

    生成順序: Seed.standard_normals(H*3*L*d, stream=0) を64ビットで一括に引き、
    (H, 3, L, d) に行優先で並べる。
    すなわちヘッド優先、ヘッド内で Q, K, V の順、各行列は行優先。
    32ビット精度は64ビット値を丸めて得る。
    """
    if head_dim < 1 or num_heads < 1:
        raise LayoutError(f"head_dim and num_heads must be >= 1: d={head_dim}, H={num_heads}")

    seed = as_seed(seed)
    L = layout.total
    draws = seed.standard_normals(num_heads * 3 * L * head_dim, stream=0)
    block = draws.reshape(num_heads, 3, L, head_dim).astype(precision.dtype)

    logger.debug(
        "Synthetic inputs generated",
        seed=seed.value,
        total=L,
        head_dim=head_dim,
        num_heads=num_heads,
        precision=precision.value,
    )
    return AttentionInputs(
        layout=layout,
        head_dim=head_dim,
        num_heads=num_heads,
        queries=np.ascontiguousarray(block[:, 0]),
        keys=np.ascontiguousarray(block[:, 1]),
        values=np.ascontiguousarray(block[:, 2]),
    )
