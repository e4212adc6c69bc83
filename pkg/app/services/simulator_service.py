"""
プリフィル/デコード・シミュレーター

アテンション＋残差のみのトイ・デコーダーでプリフィルと貪欲デコードを行い、
(クエリ, キー) の内積回数をステップごとに数える。
フューチャーアウェアマスク（非統合）はデコード時に全視覚行を伸びた系列に対して再スコアし、
統合版は純粋な因果デコードのコストになる。
"""

import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import psutil
from pydantic import BaseModel, Field
import structlog

from app.core.exceptions import FutureMaskError
from app.core.layout import (
    AttentionInputs,
    DenseMatrix,
    LayoutError,
    SequenceLayout,
    Seed,
    SeedLike,
    as_seed,
)
from app.services.attention_service import (
    AttentionOutput,
    dot_scores,
    masked_forward,
    softmax_forward,
)
from app.services.mask_service import (
    MaskKind,
    build_mask,
    causal_count,
    valid_attention_count,
    visibility_block,
)
from app.services.merge_service import MergeConfig, light_forward


logger = structlog.get_logger(__name__)

# 乱数ストリーム番号
WEIGHT_STREAM = 1
VISUAL_STREAM = 2
TEXT_STREAM = 3


class SimulatorError(FutureMaskError):
    """シミュレーターエラー"""
    pass


class RefreshPolicy(str, Enum):
    """非統合フューチャーアウェアマスクのデコード時の視覚行再スコア規則"""
    DENSE = "dense"      # 全視覚行 × 全キー（m·L_c）
    VISIBLE = "visible"  # 伸びた系列でマスク上可視なペアのみ


@dataclass(frozen=True, eq=False)
class Prompt:
    """プロンプト（合成視覚埋め込み＋テキストトークンID）"""
    visual_embeddings: DenseMatrix     # m×D
    text_ids: npt.NDArray[np.int64]    # n

    @property
    def layout(self) -> SequenceLayout:
        return SequenceLayout(int(self.visual_embeddings.shape[0]), int(self.text_ids.size))


@dataclass(frozen=True, eq=False)
class ToyModel:
    """シード付き重みのトイ・デコーダー（アテンション＋残差のみ）"""
    vocab_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    seed: Seed
    embedding: DenseMatrix        # V×D
    w_query: DenseMatrix          # layers×D×D
    w_key: DenseMatrix
    w_value: DenseMatrix
    w_output: DenseMatrix
    unembedding: DenseMatrix      # D×V

    @classmethod
    def create(
        cls,
        vocab_size: int = 64,
        embed_dim: int = 16,
        num_layers: int = 2,
        num_heads: int = 2,
        seed: SeedLike = 0,
    ) -> "ToyModel":
        """重み生成

        Seed.generator(stream=1) から埋め込み表、層ごとの Wq, Wk, Wv, Wo、逆埋め込みの順に
        standard_normal を引く。射影は 1/√D でスケールする。
        """
        if min(vocab_size, embed_dim, num_layers, num_heads) < 1:
            raise SimulatorError("model dimensions must be positive")
        if embed_dim % num_heads != 0:
            raise SimulatorError(f"embed_dim {embed_dim} is not divisible by num_heads {num_heads}")

        seed = as_seed(seed)
        rng = seed.generator(stream=WEIGHT_STREAM)
        D = embed_dim
        scale = 1.0 / np.sqrt(D)

        embedding = rng.standard_normal((vocab_size, D))
        layers = [rng.standard_normal((4, D, D)) * scale for _ in range(num_layers)]
        unembedding = rng.standard_normal((D, vocab_size)) * scale
        stacked = np.stack(layers)

        model = cls(
            vocab_size=vocab_size,
            embed_dim=embed_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            seed=seed,
            embedding=embedding,
            w_query=stacked[:, 0],
            w_key=stacked[:, 1],
            w_value=stacked[:, 2],
            w_output=stacked[:, 3],
            unembedding=unembedding,
        )
        logger.debug(
            "Toy model created",
            vocab_size=vocab_size,
            embed_dim=embed_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            seed=seed.value,
        )
        return model

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def synth_prompt(self, layout: SequenceLayout) -> Prompt:
        """視覚埋め込み（ストリーム2）とテキストID（ストリーム3）の合成"""
        visual = self.seed.generator(stream=VISUAL_STREAM).standard_normal(
            (layout.num_visual, self.embed_dim)
        )
        text = self.seed.generator(stream=TEXT_STREAM).integers(
            0, self.vocab_size, size=layout.num_text, dtype=np.int64
        )
        return Prompt(visual_embeddings=visual, text_ids=text)

    def embed_prompt(self, prompt: Prompt) -> DenseMatrix:
        """視覚トークンの後にテキストトークン埋め込みを連結（L×D）"""
        return np.concatenate([prompt.visual_embeddings, self.embedding[prompt.text_ids]], axis=0)

    def project(self, layer: int, hidden: DenseMatrix) -> Tuple[DenseMatrix, DenseMatrix, DenseMatrix]:
        """Q/K/V をヘッドに分割（各 H×rows×head_dim）"""
        def split(x: DenseMatrix) -> DenseMatrix:
            rows = x.shape[0]
            return np.ascontiguousarray(x.reshape(rows, self.num_heads, self.head_dim).transpose(1, 0, 2))

        return (
            split(hidden @ self.w_query[layer]),
            split(hidden @ self.w_key[layer]),
            split(hidden @ self.w_value[layer]),
        )

    def combine(self, layer: int, heads: DenseMatrix) -> DenseMatrix:
        """ヘッド出力（H×rows×head_dim）を連結して出力射影"""
        rows = heads.shape[1]
        merged = heads.transpose(1, 0, 2).reshape(rows, self.embed_dim)
        return merged @ self.w_output[layer]

    def next_token(self, hidden_row: DenseMatrix) -> int:
        """温度0の貪欲選択（最初の最大値）"""
        return int(np.argmax(hidden_row @ self.unembedding))


@dataclass
class KVCache:
    """層ごと・ヘッドごとのキー/値行（系列順に追加、追加後は不変）"""
    layout: SequenceLayout
    keys: List[DenseMatrix] = field(default_factory=list)            # 層ごと H×L_c×hd
    values: List[DenseMatrix] = field(default_factory=list)
    visual_queries: List[DenseMatrix] = field(default_factory=list)  # 層ごと H×m×hd
    visual_outputs: List[DenseMatrix] = field(default_factory=list)  # 層ごと H×m×hd（直近の視覚行出力）
    next_token: Optional[int] = None

    @property
    def length(self) -> int:
        return 0 if not self.keys else int(self.keys[0].shape[1])

    @property
    def num_visual(self) -> int:
        return self.layout.num_visual

    def append(self, layer: int, key: DenseMatrix, value: DenseMatrix) -> Tuple[DenseMatrix, DenseMatrix]:
        keys = np.concatenate([self.keys[layer], key], axis=1)
        values = np.concatenate([self.values[layer], value], axis=1)
        keys.setflags(write=False)
        values.setflags(write=False)
        self.keys[layer] = keys
        self.values[layer] = values
        return keys, values


class TraceEntry(BaseModel):
    """ステップごとの記録"""
    phase: str
    length: int
    pairs: int
    ms: Optional[float] = None
    visual_shift: Optional[float] = None


class DecodeTrace(BaseModel):
    """プリフィル/デコードのトレース"""
    config: Dict[str, Any] = Field(default_factory=dict)
    prefill: TraceEntry
    steps: List[TraceEntry] = Field(default_factory=list)
    ordering_ok: Optional[bool] = None
    memory_rss_mb: Optional[float] = None

    @property
    def prefill_pairs(self) -> int:
        return self.prefill.pairs

    @property
    def decode_pairs(self) -> int:
        return sum(step.pairs for step in self.steps)

    @property
    def total_pairs(self) -> int:
        return self.prefill_pairs + self.decode_pairs

    def totals(self, include_timings: bool = False) -> Dict[str, Any]:
        totals: Dict[str, Any] = {
            "prefill_pairs": self.prefill_pairs,
            "decode_pairs": self.decode_pairs,
            "total_pairs": self.total_pairs,
            "decode_steps": len(self.steps),
        }
        if include_timings:
            decode_ms = sum(step.ms or 0.0 for step in self.steps)
            totals["prefill_ms"] = self.prefill.ms
            totals["decode_ms"] = decode_ms
            totals["ms_per_token"] = decode_ms / len(self.steps) if self.steps else None
        return totals

    def to_report(self, include_timings: bool = False) -> Dict[str, Any]:
        """JSON出力形式 {config, prefill, steps, totals}"""
        def ms(entry: TraceEntry) -> Optional[float]:
            return entry.ms if include_timings else None

        report: Dict[str, Any] = {
            "config": self.config,
            "prefill": {"length": self.prefill.length, "pairs": self.prefill.pairs, "ms": ms(self.prefill)},
            "steps": [
                {"length": s.length, "pairs": s.pairs, "ms": ms(s), "visual_shift": s.visual_shift}
                for s in self.steps
            ],
            "totals": self.totals(include_timings),
            "ordering_ok": self.ordering_ok,
        }
        if include_timings:
            report["memory_rss_mb"] = self.memory_rss_mb
        return report

    def to_csv_rows(self, include_timings: bool = False) -> List[List[str]]:
        """CSV出力（1ステップ1行、先頭はプリフィル）"""
        rows = [["phase", "step", "length", "pairs", "ms"]]
        for index, entry in enumerate([self.prefill, *self.steps]):
            value = "" if not include_timings or entry.ms is None else repr(entry.ms)
            rows.append([entry.phase, str(index), str(entry.length), str(entry.pairs), value])
        return rows


@dataclass(frozen=True)
class GenerationResult:
    """生成結果"""
    tokens: List[int]
    trace: DecodeTrace


def _elapsed_ms(start: float) -> float:
    return (time.perf_counter() - start) * 1000.0


def prefill(
    model: ToyModel,
    layout: SequenceLayout,
    kind: MaskKind,
    merge: Optional[MergeConfig] = None,
    prompt: Optional[Prompt] = None,
) -> Tuple[KVCache, DenseMatrix, TraceEntry]:
    """プロンプト全体の順伝播（統合時は light_forward）とKVキャッシュ構築

    最終行の隠れ状態から最初の生成トークンを決め、キャッシュの next_token に置く。
    """
    prompt = prompt or model.synth_prompt(layout)
    if prompt.layout != layout:
        raise LayoutError(f"prompt layout {prompt.layout} does not match {layout}")

    start = time.perf_counter()
    hidden = model.embed_prompt(prompt)
    mask = None if merge is not None else build_mask(layout, kind)
    cache = KVCache(layout=layout)
    pairs = 0
    m = layout.num_visual

    for layer in range(model.num_layers):
        q, k, v = model.project(layer, hidden)
        inputs = AttentionInputs(layout, model.head_dim, model.num_heads, q, k, v)
        if merge is not None:
            result: AttentionOutput = light_forward(inputs, kind, merge, retain_probs=False)
            pairs += causal_count(layout.total) * model.num_heads
        else:
            assert mask is not None
            result = masked_forward(inputs, mask, retain_probs=False)
            pairs += mask.valid_count * model.num_heads

        cache.keys.append(k)
        cache.values.append(v)
        cache.visual_queries.append(q[:, :m])
        cache.visual_outputs.append(result.output[:, :m])
        hidden = hidden + model.combine(layer, result.output)

    cache.next_token = model.next_token(hidden[-1])
    entry = TraceEntry(phase="prefill", length=layout.total, pairs=pairs, ms=_elapsed_ms(start))

    logger.debug(
        "Prefill completed",
        kind=kind.value,
        merged=merge is not None,
        total=layout.total,
        pairs=pairs,
        first_token=cache.next_token,
    )
    return cache, hidden, entry


def decode_step(
    model: ToyModel,
    cache: KVCache,
    kind: MaskKind,
    merged: bool,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
) -> Tuple[int, KVCache, TraceEntry]:
    """1トークンのデコード

    直前に生成したトークンをテキストトークンとして追加し、新クエリは L_c 個のキーすべてに注意する。
    非統合のフューチャーアウェアマスクでは、全視覚クエリ行を伸びた系列に対して再スコアする
    （キャッシュのキー/値は読むだけで書き換えない）。再スコア後の視覚行出力が直前から動いた最大幅を
    visual_shift に記録する。
    """
    if cache.length == 0 or cache.next_token is None:
        raise SimulatorError("decode requires a non-empty cache with a pending token")

    start = time.perf_counter()
    token = cache.next_token
    layout = cache.layout.grow_text(1)
    Lc = layout.total
    m = layout.num_visual
    refresh = kind.is_future_aware and not merged and m > 0

    hidden = model.embedding[token][np.newaxis, :]
    pairs = 0
    shift = 0.0
    all_visible = np.ones((1, Lc), dtype=bool)

    for layer in range(model.num_layers):
        q, k, v = model.project(layer, hidden)
        keys, values = cache.append(layer, k, v)

        logits = np.stack([dot_scores(q[h], keys[h], model.head_dim) for h in range(model.num_heads)])
        result = softmax_forward(logits, all_visible, values, retain_probs=False)
        pairs += Lc * model.num_heads

        if refresh:
            allowed = visibility_block(layout, kind, np.arange(m), np.arange(Lc))
            vq = cache.visual_queries[layer]
            visual_logits = np.stack(
                [dot_scores(vq[h], keys[h], model.head_dim) for h in range(model.num_heads)]
            )
            refreshed = softmax_forward(visual_logits, allowed, values, retain_probs=False)
            shift = max(shift, float(np.max(np.abs(refreshed.output - cache.visual_outputs[layer]))))
            cache.visual_outputs[layer] = refreshed.output
            if policy is RefreshPolicy.DENSE:
                pairs += m * Lc * model.num_heads
            else:
                pairs += int(np.count_nonzero(allowed)) * model.num_heads

        hidden = hidden + model.combine(layer, result.output)

    next_id = model.next_token(hidden[0])
    cache.layout = layout
    cache.next_token = next_id
    entry = TraceEntry(
        phase="decode",
        length=Lc,
        pairs=pairs,
        ms=_elapsed_ms(start),
        visual_shift=shift if refresh else None,
    )
    return next_id, cache, entry


def decode_pairs_closed_form(
    layout: SequenceLayout,
    kind: MaskKind,
    merged: bool,
    current_length: int,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
) -> int:
    """1層1ヘッドあたりのデコード1ステップの内積回数（閉形式）"""
    m = layout.num_visual
    Lc = current_length
    if merged or not kind.is_future_aware or m == 0:
        return Lc
    if policy is RefreshPolicy.DENSE or kind is MaskKind.FULL:
        return Lc + m * Lc
    if kind is MaskKind.V2V:
        return Lc + m * m
    return Lc + m * (Lc - m) + m * (m + 1) // 2


def expected_totals(
    layout: SequenceLayout,
    kind: MaskKind,
    merged: bool,
    num_new_tokens: int,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
) -> Tuple[int, int]:
    """(プリフィル, デコード合計) の内積回数（1層1ヘッドあたり）"""
    prefill_pairs = valid_attention_count(layout, kind, merged)
    decode = sum(
        decode_pairs_closed_form(layout, kind, merged, layout.total + t, policy)
        for t in range(1, num_new_tokens + 1)
    )
    return prefill_pairs, decode


def count_ordering_holds(
    layout: SequenceLayout,
    num_new_tokens: int,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
) -> bool:
    """ops(FULL) ≥ ops(V2V), ops(V2T) > ops(統合) の検査（m, n ≥ 1 かつデコード1ステップ以上）

    縮退分割やデコード無しでは、統合版を下回らないことのみ確認する。
    """
    def ops(kind: MaskKind, merged: bool) -> int:
        return sum(expected_totals(layout, kind, merged, num_new_tokens, policy))

    merged_ops = ops(MaskKind.FULL, True)
    full = ops(MaskKind.FULL, False)
    v2v = ops(MaskKind.V2V, False)
    v2t = ops(MaskKind.V2T, False)
    if full < max(v2v, v2t):
        return False
    if layout.num_visual >= 1 and layout.num_text >= 1 and num_new_tokens >= 1:
        return min(v2v, v2t) > merged_ops
    return min(v2v, v2t) >= merged_ops


def _resident_mb() -> float:
    return psutil.Process(os.getpid()).memory_info().rss / 1024 / 1024


def run_generation(
    model: ToyModel,
    layout: SequenceLayout,
    kind: MaskKind,
    merge: Optional[MergeConfig] = None,
    num_new_tokens: int = 0,
    policy: RefreshPolicy = RefreshPolicy.DENSE,
    prompt: Optional[Prompt] = None,
) -> GenerationResult:
    """プリフィル後に num_new_tokens 回のデコード

    プリフィルが最初のトークンを出し、各デコードステップが1トークンずつ追加する
    （返すトークン列の長さは num_new_tokens + 1）。
    """
    if num_new_tokens < 0:
        raise SimulatorError(f"num_new_tokens must be >= 0: {num_new_tokens}")

    cache, _, prefill_entry = prefill(model, layout, kind, merge, prompt)
    assert cache.next_token is not None
    tokens = [cache.next_token]
    steps: List[TraceEntry] = []
    merged = merge is not None

    for _ in range(num_new_tokens):
        next_id, cache, entry = decode_step(model, cache, kind, merged, policy)
        tokens.append(next_id)
        steps.append(entry)

    config: Dict[str, Any] = {
        "num_visual": layout.num_visual,
        "num_text": layout.num_text,
        "mask": kind.value,
        "merged": merged,
        "merge": merge.model_dump(mode="json") if merge is not None else None,
        "refresh": policy.value,
        "new_tokens": num_new_tokens,
        "vocab": model.vocab_size,
        "embed_dim": model.embed_dim,
        "layers": model.num_layers,
        "heads": model.num_heads,
        "seed": model.seed.value,
    }
    trace = DecodeTrace(
        config=config,
        prefill=prefill_entry,
        steps=steps,
        ordering_ok=count_ordering_holds(layout, num_new_tokens, policy),
        memory_rss_mb=_resident_mb(),
    )
    logger.info(
        "Generation completed",
        kind=kind.value,
        merged=merged,
        prefill_pairs=trace.prefill_pairs,
        decode_pairs=trace.decode_pairs,
        tokens=len(tokens),
    )
    return GenerationResult(tokens=tokens, trace=trace)
