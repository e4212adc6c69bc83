"""
ベンチマークサービス

4種のマスク × {非統合, 統合} で生成を走らせ、内積回数の閉形式・デコード同等性・
順序関係を検査して判定をまとめる。
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field
import structlog

from app.core.layout import SequenceLayout
from app.services.mask_service import MaskKind
from app.services.merge_service import MergeConfig
from app.services.simulator_service import (
    GenerationResult,
    RefreshPolicy,
    ToyModel,
    count_ordering_holds,
    decode_pairs_closed_form,
    expected_totals,
    run_generation,
)


logger = structlog.get_logger(__name__)


class BenchmarkRun(BaseModel):
    """1つの (kind, merged) 組の結果"""
    kind: MaskKind
    merged: bool
    tokens: List[int]
    prefill_pairs: int
    decode_pairs: int
    step_pairs: List[int]
    expected_prefill_pairs: int
    expected_decode_pairs: int
    trace: Dict[str, Any]


class BenchmarkVerdict(BaseModel):
    """検査項目ごとの合否"""
    checks: Dict[str, bool] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> List[str]:
        return sorted(name for name, ok in self.checks.items() if not ok)


class BenchmarkReport(BaseModel):
    """ベンチマーク結果レポート"""
    config: Dict[str, Any]
    runs: List[BenchmarkRun]
    decode_ratio: Dict[str, Optional[float]]
    verdict: BenchmarkVerdict

    def to_report(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "runs": [run.model_dump(mode="json") for run in self.runs],
            "decode_ratio": self.decode_ratio,
            "verdict": {"checks": self.verdict.checks, "passed": self.verdict.passed},
        }

    def to_csv_rows(self) -> List[List[str]]:
        """1ステップ1行（先頭はプリフィル）"""
        rows = [["kind", "merged", "phase", "step", "length", "pairs", "expected_pairs", "ms"]]
        for run in self.runs:
            layers_heads = self.config["layers"] * self.config["heads"]
            layout = SequenceLayout(self.config["num_visual"], self.config["num_text"])
            policy = RefreshPolicy(self.config["refresh"])
            rows.append([
                run.kind.value,
                str(run.merged).lower(),
                "prefill",
                "0",
                str(run.trace["prefill"]["length"]),
                str(run.prefill_pairs),
                str(run.expected_prefill_pairs),
                _ms(run.trace["prefill"]["ms"]),
            ])
            for index, step in enumerate(run.trace["steps"], start=1):
                expected = decode_pairs_closed_form(layout, run.kind, run.merged, step["length"], policy)
                rows.append([
                    run.kind.value,
                    str(run.merged).lower(),
                    "decode",
                    str(index),
                    str(step["length"]),
                    str(step["pairs"]),
                    str(expected * layers_heads),
                    _ms(step["ms"]),
                ])
        return rows


def _ms(value: Optional[float]) -> str:
    return "" if value is None else repr(value)


def _run(
    model: ToyModel,
    layout: SequenceLayout,
    kind: MaskKind,
    merge: Optional[MergeConfig],
    num_new_tokens: int,
    policy: RefreshPolicy,
    include_timings: bool,
) -> BenchmarkRun:
    result: GenerationResult = run_generation(model, layout, kind, merge, num_new_tokens, policy)
    per_layer_head = model.num_layers * model.num_heads
    prefill, decode = expected_totals(layout, kind, merge is not None, num_new_tokens, policy)
    return BenchmarkRun(
        kind=kind,
        merged=merge is not None,
        tokens=result.tokens,
        prefill_pairs=result.trace.prefill_pairs,
        decode_pairs=result.trace.decode_pairs,
        step_pairs=[step.pairs for step in result.trace.steps],
        expected_prefill_pairs=prefill * per_layer_head,
        expected_decode_pairs=decode * per_layer_head,
        trace=result.trace.to_report(include_timings),
    )


def run_benchmark(
    model: ToyModel,
    layout: SequenceLayout,
    merge: MergeConfig,
    num_new_tokens: int,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
    include_timings: bool = False,
) -> BenchmarkReport:
    """全種別 × {非統合, 統合} のスイープと判定"""
    runs: List[BenchmarkRun] = []
    for kind in MaskKind:
        runs.append(_run(model, layout, kind, None, num_new_tokens, policy, include_timings))
        runs.append(_run(model, layout, kind, merge, num_new_tokens, policy, include_timings))

    by_key = {(run.kind, run.merged): run for run in runs}
    causal = by_key[(MaskKind.CAUSAL, False)]
    m = layout.num_visual

    checks: Dict[str, bool] = {
        "prefill_closed_form": all(r.prefill_pairs == r.expected_prefill_pairs for r in runs),
        "decode_closed_form": all(r.decode_pairs == r.expected_decode_pairs for r in runs),
        "decode_parity": all(r.step_pairs == causal.step_pairs for r in runs if r.merged),
        "ordering": count_ordering_holds(layout, num_new_tokens, policy),
    }
    if m >= 1 and num_new_tokens >= 1:
        checks["strict_dominance"] = all(
            all(u > c for u, c in zip(by_key[(kind, False)].step_pairs, causal.step_pairs))
            for kind in MaskKind
            if kind.is_future_aware
        )
    if m == 0:
        checks["degenerate_collapse"] = all(
            r.prefill_pairs == causal.prefill_pairs
            and r.step_pairs == causal.step_pairs
            and r.tokens == causal.tokens
            for r in runs
        )

    decode_ratio: Dict[str, Optional[float]] = {}
    for kind in MaskKind:
        merged_decode = by_key[(kind, True)].decode_pairs
        unmerged_decode = by_key[(kind, False)].decode_pairs
        decode_ratio[kind.value] = unmerged_decode / merged_decode if merged_decode else None

    config: Dict[str, Any] = {
        "num_visual": layout.num_visual,
        "num_text": layout.num_text,
        "new_tokens": num_new_tokens,
        "refresh": policy.value,
        "merge": merge.model_dump(mode="json"),
        "vocab": model.vocab_size,
        "embed_dim": model.embed_dim,
        "layers": model.num_layers,
        "heads": model.num_heads,
        "seed": model.seed.value,
    }
    verdict = BenchmarkVerdict(checks=checks)
    report = BenchmarkReport(config=config, runs=runs, decode_ratio=decode_ratio, verdict=verdict)

    if verdict.passed:
        logger.info("Benchmark completed", runs=len(runs), passed=True)
    else:
        logger.warning("Benchmark verdict failed", failed=verdict.failed())
    return report
