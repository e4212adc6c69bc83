"""
等価性スイープサービス

シード付き試行ごとに (L, d, 分割, マスク種別, ブロックサイズ) を選び、
ブロック化カーネルと参照実装の出力・logsumexp の最大絶対誤差を測る。
"""

from typing import List, Optional

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field
import structlog

from app.core.config import settings
from app.core.exceptions import FutureMaskError
from app.core.layout import Precision, SequenceLayout, Seed, synth_inputs
from app.services.attention_service import masked_forward
from app.services.flash_attention import (
    BlockSpec,
    flash_forward,
    flash_merged_forward,
)
from app.services.mask_service import MaskKind, VisibilityFn, build_mask, visibility_fn
from app.services.merge_service import Distribute, MergeConfig, light_forward


logger = structlog.get_logger(__name__)

# 試行パラメータ用の乱数ストリーム番号
SWEEP_STREAM = 4

# 1ヘッドあたりのタイル数を抑えるための行・列ブロック数の上限
MAX_BLOCKS_PER_AXIS = 16

MERGE_SCALES = (0.5, 1.0, 1.5, 2.0)


class EquivalenceError(FutureMaskError):
    """等価性スイープ設定エラー"""
    pass


class TrialResult(BaseModel):
    """1試行の結果"""
    trial: int
    total: int
    num_visual: int
    head_dim: int
    num_heads: int
    kind: MaskKind
    block_rows: int
    block_cols: int
    output_error: float
    lse_error: float
    merged_output_error: Optional[float] = None
    merged_lse_error: Optional[float] = None

    @property
    def max_error(self) -> float:
        errors = [self.output_error, self.lse_error, self.merged_output_error, self.merged_lse_error]
        return max(e for e in errors if e is not None)


class EquivalenceReport(BaseModel):
    """スイープ結果レポート"""
    trials: int
    seed: int
    precision: Precision
    tolerance: float
    fault_injected: bool
    block_rows: Optional[int] = None
    block_cols: Optional[int] = None
    max_output_error: float
    max_lse_error: float
    max_merged_error: Optional[float] = None
    passed: bool
    worst: Optional[TrialResult] = None
    results: List[TrialResult] = Field(default_factory=list)


def _max_abs(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _divisors(value: int, lower: int) -> List[int]:
    return [d for d in range(max(1, lower), value + 1) if value % d == 0]


def choose_block_spec(rng: np.random.Generator, total: int, trial: int) -> BlockSpec:
    """試行番号で方式を巡回：割り切るブロック、端数ありブロック、単一ブロック"""
    lower = max(1, -(-total // MAX_BLOCKS_PER_AXIS))
    mode = trial % 3
    if mode == 0:
        options = _divisors(total, lower)
        return BlockSpec(int(rng.choice(options)), int(rng.choice(options)))
    if mode == 1:
        return BlockSpec(int(rng.integers(lower, total + 1)), int(rng.integers(lower, total + 1)))
    return BlockSpec(total, total)


def faulty_visibility(layout: SequenceLayout, kind: MaskKind) -> VisibilityFn:
    """セル (1, L) の可視性を1ビット反転した述語（負の対照用）"""
    base = visibility_fn(layout, kind)
    last = layout.total - 1

    def predicate(rows: npt.NDArray[np.intp], cols: npt.NDArray[np.intp]) -> npt.NDArray[np.bool_]:
        tile = base(rows, cols).copy()
        hit = (np.asarray(rows)[:, np.newaxis] == 0) & (np.asarray(cols)[np.newaxis, :] == last)
        return tile ^ hit

    return predicate


def run_equivalence_sweep(
    trials: Optional[int] = None,
    seed: int = 0,
    precision: Precision = Precision.F64,
    max_length: int = 64,
    max_head_dim: int = 16,
    max_heads: int = 2,
    fault: bool = False,
    include_merged: bool = True,
    block_spec: Optional[BlockSpec] = None,
    tolerance: Optional[float] = None,
    keep_results: bool = False,
) -> EquivalenceReport:
    """flash_forward と masked_forward（統合時は flash_merged_forward と light_forward）の比較

    block_spec を渡すと全試行をそのブロックサイズで行い、省略時は試行ごとに選ぶ。
    fault=True のとき、ブロック化側の述語でセル (1, L) を反転させる（L ≥ 2 の系列のみ選ぶ）。
    """
    trials = trials if trials is not None else settings.EQUIV_DEFAULT_TRIALS
    if trials < 1:
        raise EquivalenceError(f"trials must be >= 1: {trials}")
    if max_length < 2 or max_head_dim < 1 or max_heads < 1:
        raise EquivalenceError(
            f"invalid sweep bounds: max_length={max_length}, max_head_dim={max_head_dim}, max_heads={max_heads}"
        )
    tolerance = tolerance if tolerance is not None else settings.tolerance_for(precision)

    rng = Seed(seed).generator(stream=SWEEP_STREAM)
    kinds = list(MaskKind)
    results: List[TrialResult] = []

    for trial in range(trials):
        total = int(rng.integers(2 if fault else 1, max_length + 1))
        num_visual = int(rng.integers(0, total + 1))
        head_dim = int(rng.integers(1, max_head_dim + 1))
        num_heads = int(rng.integers(1, max_heads + 1))
        kind = kinds[trial % len(kinds)]
        spec = block_spec or choose_block_spec(rng, total, trial)
        trial_seed = int(rng.integers(0, 2**63))

        layout = SequenceLayout(num_visual, total - num_visual)
        inputs = synth_inputs(layout, head_dim, num_heads, trial_seed, precision)

        predicate = faulty_visibility(layout, kind) if fault else None
        reference = masked_forward(inputs, build_mask(layout, kind), retain_probs=False)
        blocked = flash_forward(inputs, layout, kind, spec, visibility=predicate)

        result = TrialResult(
            trial=trial,
            total=total,
            num_visual=num_visual,
            head_dim=head_dim,
            num_heads=num_heads,
            kind=kind,
            block_rows=spec.block_rows,
            block_cols=spec.block_cols,
            output_error=_max_abs(blocked.output, reference.output),
            lse_error=_max_abs(blocked.logsumexp, reference.logsumexp),
        )

        if include_merged:
            cfg = MergeConfig(
                kernel_size=int(rng.integers(1, 5)),
                prefix_size=int(rng.integers(1, min(4, total) + 1)),
                merge_scale=float(rng.choice(MERGE_SCALES)),
                distribute=Distribute.DIVIDE if rng.integers(0, 2) else Distribute.REPLICATE,
            )
            light = light_forward(inputs, kind, cfg, retain_probs=False)
            merged = flash_merged_forward(inputs, layout, kind, cfg, spec)
            result.merged_output_error = _max_abs(merged.output, light.output)
            result.merged_lse_error = _max_abs(merged.logsumexp, light.logsumexp)

        results.append(result)

    worst = max(results, key=lambda r: r.max_error)
    merged_errors = [
        max(r.merged_output_error, r.merged_lse_error)
        for r in results
        if r.merged_output_error is not None and r.merged_lse_error is not None
    ]
    report = EquivalenceReport(
        trials=trials,
        seed=seed,
        precision=precision,
        tolerance=tolerance,
        fault_injected=fault,
        block_rows=block_spec.block_rows if block_spec else None,
        block_cols=block_spec.block_cols if block_spec else None,
        max_output_error=max(r.output_error for r in results),
        max_lse_error=max(r.lse_error for r in results),
        max_merged_error=max(merged_errors) if merged_errors else None,
        passed=worst.max_error <= tolerance,
        worst=worst,
        results=results if keep_results else [],
    )

    log = logger.info if report.passed else logger.warning
    log(
        "Equivalence sweep completed",
        trials=trials,
        precision=precision.value,
        max_error=worst.max_error,
        tolerance=tolerance,
        passed=report.passed,
        fault=fault,
    )
    return report
