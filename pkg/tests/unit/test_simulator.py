"""
プリフィル/デコード・シミュレーターのユニットテスト
"""

import numpy as np
import pytest

from app.core.layout import SequenceLayout
from app.services.mask_service import MaskKind, causal_count
from app.services.merge_service import MergeConfig
from app.services.simulator_service import (
    RefreshPolicy,
    SimulatorError,
    ToyModel,
    count_ordering_holds,
    decode_pairs_closed_form,
    expected_totals,
    prefill,
    run_generation,
)


FUTURE_KINDS = [MaskKind.FULL, MaskKind.V2V, MaskKind.V2T]


# m=6, n=4 で Causal と FutureFull の貪欲生成が分かれるシード（2層2ヘッド、語彙64、D=16）
WITNESS_SEED = 0


def witness_model():
    return ToyModel.create(vocab_size=64, embed_dim=16, num_layers=2, num_heads=2, seed=WITNESS_SEED)


class TestToyModel:
    """ToyModelのテスト"""

    def test_weights_are_seeded(self):
        a = ToyModel.create(seed=9)
        b = ToyModel.create(seed=9)
        c = ToyModel.create(seed=10)
        np.testing.assert_array_equal(a.w_query, b.w_query)
        assert not np.array_equal(a.w_query, c.w_query)

    def test_shapes(self, toy_model):
        assert toy_model.embedding.shape == (64, 16)
        assert toy_model.w_key.shape == (2, 16, 16)
        assert toy_model.unembedding.shape == (16, 64)
        assert toy_model.head_dim == 8

    def test_invalid_dimensions(self):
        with pytest.raises(SimulatorError):
            ToyModel.create(embed_dim=10, num_heads=3)
        with pytest.raises(SimulatorError):
            ToyModel.create(vocab_size=0)

    def test_prompt_layout(self, toy_model, base_layout):
        prompt = toy_model.synth_prompt(base_layout)
        assert prompt.layout == base_layout
        assert prompt.text_ids.max() < toy_model.vocab_size


class TestPrefillCounts:
    """プリフィルの有効アテンション数"""

    def test_base_layout_counts(self, single_head_model, base_layout):
        """L=10, m=6, n=4、1層1ヘッド"""
        counts = {}
        for kind in MaskKind:
            _, _, entry = prefill(single_head_model, base_layout, kind)
            counts[kind.value] = entry.pairs
        assert counts == {"causal": 55, "f": 94, "v2v": 70, "v2t": 79}

    @pytest.mark.parametrize("kind", list(MaskKind))
    def test_merged_prefill_is_causal_count(self, toy_model, base_layout, kind):
        _, _, entry = prefill(toy_model, base_layout, kind, merge=MergeConfig())
        assert entry.pairs == causal_count(10) * toy_model.num_layers * toy_model.num_heads

    def test_first_token_from_prefill(self, toy_model, base_layout):
        cache, hidden, _ = prefill(toy_model, base_layout, MaskKind.FULL)
        assert cache.length == 10
        assert cache.next_token == toy_model.next_token(hidden[-1])


class TestDecode:
    """デコードの内積回数"""

    def test_token_count(self, toy_model, base_layout):
        result = run_generation(toy_model, base_layout, MaskKind.V2T, num_new_tokens=4)
        assert len(result.tokens) == 5
        assert [s.length for s in result.trace.steps] == [11, 12, 13, 14]

    def test_merged_decode_equals_causal(self, single_head_model, base_layout):
        causal = run_generation(single_head_model, base_layout, MaskKind.CAUSAL, num_new_tokens=5)
        for kind in MaskKind:
            merged = run_generation(
                single_head_model, base_layout, kind, merge=MergeConfig(), num_new_tokens=5
            )
            assert [s.pairs for s in merged.trace.steps] == [s.pairs for s in causal.trace.steps]

    def test_full_decode_factor(self, single_head_model, base_layout):
        """非統合 FutureFull のステップごとの回数は統合の (1 + m) 倍"""
        merged = run_generation(
            single_head_model, base_layout, MaskKind.FULL, merge=MergeConfig(), num_new_tokens=5
        )
        unmerged = run_generation(single_head_model, base_layout, MaskKind.FULL, num_new_tokens=5)
        for u, c in zip(unmerged.trace.steps, merged.trace.steps):
            assert u.pairs == (1 + 6) * c.pairs

    @pytest.mark.parametrize("policy", list(RefreshPolicy))
    @pytest.mark.parametrize("kind", list(MaskKind))
    @pytest.mark.parametrize("merged", [False, True])
    def test_closed_form(self, toy_model, base_layout, policy, kind, merged):
        result = run_generation(
            toy_model,
            base_layout,
            kind,
            merge=MergeConfig() if merged else None,
            num_new_tokens=3,
            policy=policy,
        )
        per = toy_model.num_layers * toy_model.num_heads
        for step in result.trace.steps:
            expected = decode_pairs_closed_form(base_layout, kind, merged, step.length, policy)
            assert step.pairs == expected * per
        prefill_pairs, decode_pairs = expected_totals(base_layout, kind, merged, 3, policy)
        assert result.trace.prefill_pairs == prefill_pairs * per
        assert result.trace.decode_pairs == decode_pairs * per

    def test_visible_policy_counts(self, base_layout):
        """VISIBLE は伸びた系列で可視なペアのみ数える"""
        Lc = 11
        assert decode_pairs_closed_form(base_layout, MaskKind.FULL, False, Lc, RefreshPolicy.VISIBLE) == Lc + 6 * Lc
        assert decode_pairs_closed_form(base_layout, MaskKind.V2V, False, Lc, RefreshPolicy.VISIBLE) == Lc + 36
        assert decode_pairs_closed_form(base_layout, MaskKind.V2T, False, Lc, RefreshPolicy.VISIBLE) == (
            Lc + 6 * 5 + 21
        )

    @pytest.mark.parametrize("kind", [MaskKind.FULL, MaskKind.V2T])
    def test_refresh_moves_visual_rows_that_see_text(self, toy_model, base_layout, kind):
        """新しいテキストトークンが視覚行から見えるマスクでは再スコアで視覚行出力が動く"""
        result = run_generation(toy_model, base_layout, kind, num_new_tokens=3)
        shifts = [s.visual_shift for s in result.trace.steps]
        assert all(shift is not None and shift > 0.0 for shift in shifts)

    def test_v2v_refresh_leaves_visual_rows(self, toy_model, base_layout):
        """V2V の視覚行は視覚トークンしか見ないので新トークンで出力は変わらない"""
        result = run_generation(toy_model, base_layout, MaskKind.V2V, num_new_tokens=3)
        assert all(s.visual_shift is not None and s.visual_shift <= 1e-12 for s in result.trace.steps)

    @pytest.mark.parametrize("kind, merge", [(MaskKind.CAUSAL, None), (MaskKind.FULL, MergeConfig())])
    def test_no_refresh_no_shift(self, toy_model, base_layout, kind, merge):
        result = run_generation(toy_model, base_layout, kind, merge=merge, num_new_tokens=2)
        assert all(s.visual_shift is None for s in result.trace.steps)
        assert all("visual_shift" in step for step in result.trace.to_report()["steps"])

    def test_negative_tokens_rejected(self, toy_model, base_layout):
        with pytest.raises(SimulatorError):
            run_generation(toy_model, base_layout, MaskKind.CAUSAL, num_new_tokens=-1)


class TestOrdering:
    """内積回数の順序関係"""

    @pytest.mark.parametrize("policy", list(RefreshPolicy))
    def test_base_layout_ordering(self, base_layout, policy):
        assert count_ordering_holds(base_layout, 5, policy)

    def test_ordering_over_layouts(self):
        for total in range(1, 13):
            for m in range(total + 1):
                layout = SequenceLayout(m, total - m)
                for steps in (0, 1, 4):
                    for policy in RefreshPolicy:
                        assert count_ordering_holds(layout, steps, policy)

    def test_trace_reports_ordering(self, toy_model, base_layout):
        result = run_generation(toy_model, base_layout, MaskKind.FULL, num_new_tokens=2)
        assert result.trace.ordering_ok is True


class TestGeneration:
    """生成結果のテスト"""

    def test_deterministic(self, toy_model, base_layout):
        a = run_generation(toy_model, base_layout, MaskKind.V2V, num_new_tokens=4)
        b = run_generation(toy_model, base_layout, MaskKind.V2V, num_new_tokens=4)
        assert a.tokens == b.tokens
        assert a.trace.to_report() == b.trace.to_report()

    def test_report_omits_timings_by_default(self, toy_model, base_layout):
        report = run_generation(toy_model, base_layout, MaskKind.FULL, num_new_tokens=1).trace.to_report()
        assert report["prefill"]["ms"] is None
        assert all(step["ms"] is None for step in report["steps"])
        assert "memory_rss_mb" not in report
        assert set(report) == {"config", "prefill", "steps", "totals", "ordering_ok"}

    def test_report_with_timings(self, toy_model, base_layout):
        report = run_generation(toy_model, base_layout, MaskKind.FULL, num_new_tokens=1).trace.to_report(True)
        assert report["prefill"]["ms"] >= 0.0
        assert report["memory_rss_mb"] > 0.0

    def test_no_visual_tokens_collapses_all_kinds(self, toy_model):
        layout = SequenceLayout(0, 6)
        baseline = run_generation(toy_model, layout, MaskKind.CAUSAL, num_new_tokens=4)
        for kind in MaskKind:
            for merge in (None, MergeConfig(prefix_size=2)):
                result = run_generation(toy_model, layout, kind, merge=merge, num_new_tokens=4)
                assert result.tokens == baseline.tokens
                assert result.trace.total_pairs == baseline.trace.total_pairs

    def test_future_access_changes_generation(self, base_layout):
        """固定シードで未来可視マスクが予測を変える"""
        model = witness_model()
        causal = run_generation(model, base_layout, MaskKind.CAUSAL, num_new_tokens=3)
        full = run_generation(model, base_layout, MaskKind.FULL, num_new_tokens=3)
        assert len(causal.tokens) == len(full.tokens) == 4
        assert causal.tokens != full.tokens

    def test_single_layer_text_rows_unaffected(self, single_head_model, base_layout):
        """1層ではテキスト行の出力は因果と同一なので生成も同一"""
        causal = run_generation(single_head_model, base_layout, MaskKind.CAUSAL, num_new_tokens=3)
        for kind in FUTURE_KINDS:
            result = run_generation(single_head_model, base_layout, kind, num_new_tokens=3)
            assert result.tokens == causal.tokens
