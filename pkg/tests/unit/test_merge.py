"""
未来スコア統合サービスのユニットテスト
"""

import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st
from pydantic import ValidationError

from app.core.layout import SequenceLayout, synth_inputs
from app.services.attention_service import masked_forward, scores
from app.services.mask_service import MaskKind, build_mask
from app.services.merge_service import (
    Distribute,
    MergeConfig,
    MergeConfigError,
    WindowMaxPooler,
    future_indicator,
    light_forward,
    merge_scores,
    merge_summary,
    pool_row,
    prefix_mass,
    prefix_ratio_sweep,
    prefix_widths,
)
from tests.fixtures.oracles import direct_sum_pool, direct_window_pool


finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


class TestPoolRow:
    """カーネルプーリングのテスト"""

    def test_no_visible_future_is_zero(self):
        assert pool_row([1.0, 2.0, 3.0], [False, False, False], 2) == 0.0

    def test_truncated_window_takes_max(self):
        """T < k なら最大値"""
        assert pool_row([5.0, -1.0, 3.0, 9.0], [False, True, True, False], 3) == 3.0

    def test_sum_of_window_maxima(self):
        values = [1.0, 3.0, 2.0, 5.0, 4.0]
        # 窓 k=2: max(1,3)+max(3,2)+max(2,5)+max(5,4) = 3+3+5+5
        assert pool_row(values, [True] * 5, 2) == 16.0

    def test_invalid_kernel(self):
        with pytest.raises(MergeConfigError):
            pool_row([1.0], [True], 0)

    def test_k1_equals_direct_sum_on_random_rows(self):
        """k=1 は可視な未来スコアの単純和（50行）"""
        rng = np.random.default_rng(50)
        for _ in range(50):
            length = int(rng.integers(1, 40))
            row = rng.standard_normal(length)
            indicator = rng.random(length) < 0.6
            assert pool_row(row, indicator, 1) == direct_sum_pool(row[indicator].tolist())

    @pytest.mark.property
    @hypothesis_settings(max_examples=200, deadline=None)
    @given(values=st.lists(finite_floats, max_size=30), k=st.integers(min_value=1, max_value=6))
    def test_matches_direct_window_pool(self, values, k):
        indicator = [True] * len(values)
        assert pool_row(values, indicator, k) == direct_window_pool(values, k)


class TestWindowMaxPooler:
    """ストリーミング版プーリングのテスト"""

    @pytest.mark.property
    @hypothesis_settings(max_examples=200, deadline=None)
    @given(values=st.lists(finite_floats, max_size=40), k=st.integers(min_value=1, max_value=8))
    def test_bitwise_equal_to_pool_row(self, values, k):
        pooler = WindowMaxPooler(k)
        pooler.extend(values)
        assert pooler.count == len(values)
        assert pooler.result() == pool_row(values, [True] * len(values), k)

    def test_invalid_kernel(self):
        with pytest.raises(MergeConfigError):
            WindowMaxPooler(0)


class TestMergeConfig:
    """MergeConfigのテスト"""

    def test_defaults(self):
        cfg = MergeConfig()
        assert cfg.kernel_size == 1
        assert cfg.prefix_size == 1
        assert cfg.merge_scale == 1.0
        assert cfg.distribute is Distribute.REPLICATE

    def test_validation(self):
        with pytest.raises(ValidationError):
            MergeConfig(kernel_size=0)
        with pytest.raises(ValidationError):
            MergeConfig(prefix_size=0)

    def test_prefix_larger_than_sequence(self, base_inputs):
        with pytest.raises(MergeConfigError):
            light_forward(base_inputs, MaskKind.FULL, MergeConfig(prefix_size=11))

    def test_prefix_ratio(self):
        assert MergeConfig(prefix_size=2).prefix_ratio(10) == 0.2


class TestMergeScores:
    """統合ロジットのテスト"""

    def test_future_indicator(self, small_layout):
        indicator = future_indicator(small_layout, MaskKind.FULL)
        assert indicator.sum() == 3 * 5 - 6
        assert not indicator[3:].any()

    def test_merge_summary_counts(self, base_inputs):
        summary = merge_summary(scores(base_inputs), base_inputs.layout, MaskKind.V2T, 1)
        np.testing.assert_array_equal(summary.valid_future_counts, [4, 4, 4, 4, 4, 4, 0, 0, 0, 0])
        assert np.all(summary.pooled[0, 6:] == 0.0)

    def test_prefix_widths(self):
        np.testing.assert_array_equal(prefix_widths(5, 3), [1, 2, 3, 3, 3])

    @pytest.mark.parametrize("distribute", list(Distribute))
    def test_prefix_columns_receive_pooled(self, base_inputs, distribute):
        layout = base_inputs.layout
        s = scores(base_inputs)[0]
        cfg = MergeConfig(kernel_size=2, prefix_size=3, merge_scale=1.5, distribute=distribute)
        logits = merge_scores(s, layout, MaskKind.FULL, cfg)
        pooled = merge_summary(s, layout, MaskKind.FULL, 2).pooled[0]
        widths = prefix_widths(layout.total, 3)

        for i in range(layout.total):
            add = 1.5 * pooled[i]
            if distribute is Distribute.DIVIDE:
                add = add / widths[i]
            for j in range(layout.total):
                if j > i:
                    assert logits[i, j] == -np.inf
                elif j < widths[i]:
                    assert logits[i, j] == s[i, j] + add
                else:
                    assert logits[i, j] == s[i, j]


class TestLightForward:
    """統合付き順伝播のテスト"""

    @pytest.mark.parametrize("kind", list(MaskKind))
    def test_strictly_causal(self, multi_head_inputs, kind):
        cfg = MergeConfig(kernel_size=3, prefix_size=2, merge_scale=2.0)
        result = light_forward(multi_head_inputs, kind, cfg, retain_probs=True)
        upper = np.triu_indices(multi_head_inputs.layout.total, k=1)
        for h in range(multi_head_inputs.num_heads):
            assert np.all(result.probs[h][upper] == 0.0)
            np.testing.assert_allclose(result.probs[h].sum(axis=-1), 1.0, atol=1e-12)

    def test_causal_kind_is_plain_causal(self, base_inputs):
        """因果マスクでは未来が無いので統合しても因果と同一"""
        layout = base_inputs.layout
        merged = light_forward(base_inputs, MaskKind.CAUSAL, MergeConfig(prefix_size=3), retain_probs=True)
        causal = masked_forward(base_inputs, build_mask(layout, MaskKind.CAUSAL), retain_probs=True)
        np.testing.assert_array_equal(merged.output, causal.output)

    @pytest.mark.parametrize("distribute", list(Distribute))
    def test_zero_scale_reproduces_causal_bitwise(self, multi_head_inputs, distribute):
        layout = multi_head_inputs.layout
        cfg = MergeConfig(kernel_size=2, prefix_size=4, merge_scale=0.0, distribute=distribute)
        merged = light_forward(multi_head_inputs, MaskKind.FULL, cfg, retain_probs=True)
        causal = masked_forward(multi_head_inputs, build_mask(layout, MaskKind.CAUSAL), retain_probs=True)
        np.testing.assert_array_equal(merged.probs, causal.probs)
        np.testing.assert_array_equal(merged.output, causal.output)
        np.testing.assert_array_equal(merged.logsumexp, causal.logsumexp)

    def test_merged_text_rows_match_causal(self, base_inputs):
        layout = base_inputs.layout
        merged = light_forward(base_inputs, MaskKind.FULL, MergeConfig(prefix_size=2), retain_probs=True)
        causal = masked_forward(base_inputs, build_mask(layout, MaskKind.CAUSAL), retain_probs=True)
        m = layout.num_visual
        np.testing.assert_array_equal(merged.probs[0, m:], causal.probs[0, m:])

    @pytest.mark.parametrize("kind", [MaskKind.FULL, MaskKind.V2V, MaskKind.V2T])
    @pytest.mark.parametrize("distribute", list(Distribute))
    def test_sink_monotonicity_across_scales(self, kind, distribute):
        """プール値が正の行ではプレフィックス質量が倍率とともに増える"""
        layout = SequenceLayout(6, 4)
        cfg = MergeConfig(kernel_size=2, prefix_size=2, distribute=distribute)
        scales = [0.5, 1.0, 1.5, 2.0]
        checked = 0
        for seed in range(10):
            inputs = synth_inputs(layout, 8, 1, seed=seed)
            pooled = merge_summary(scores(inputs), layout, kind, cfg.kernel_size).pooled[0]
            masses = np.array([
                prefix_mass(
                    light_forward(inputs, kind, cfg.model_copy(update={"merge_scale": s}), retain_probs=True).probs,
                    cfg.prefix_size,
                )[0]
                for s in scales
            ])
            for i in range(layout.total):
                # 非プレフィックスの可視列がある行のみ（i > p、0始まりで i >= p）
                if pooled[i] <= 0.0 or i < cfg.prefix_size:
                    continue
                column = masses[:, i]
                unsaturated = column[:-1] < 1.0 - 1e-12
                assert np.all(np.diff(column) >= 0.0)
                assert np.all(np.diff(column)[unsaturated] > 0.0)
                checked += 1
        assert checked > 0


class TestPrefixRatioSweep:
    """プレフィックス比スイープのテスト"""

    def test_rows(self, base_inputs):
        rows = prefix_ratio_sweep(base_inputs, MaskKind.FULL, MergeConfig(), [1, 2, 5])
        assert [r.prefix_size for r in rows] == [1, 2, 5]
        assert [r.prefix_ratio for r in rows] == [0.1, 0.2, 0.5]
        for row in rows:
            assert 0.0 < row.visual_prefix_mass <= 1.0 + 1e-12
            assert row.visual_future_mass_unmerged == rows[0].visual_future_mass_unmerged

    @pytest.mark.parametrize("kind", [MaskKind.FULL, MaskKind.V2V, MaskKind.V2T])
    def test_prefix_mass_non_decreasing_in_prefix_size(self, kind):
        """Replicate では行ごとのプレフィックス質量が p について減らない"""
        sizes = [1, 2, 4, 8]
        for seed in range(8):
            layout = SequenceLayout(6, 6)
            inputs = synth_inputs(layout, head_dim=8, num_heads=2, seed=seed)
            masses = []
            for p in sizes:
                cfg = MergeConfig(kernel_size=2, prefix_size=p, distribute=Distribute.REPLICATE)
                probs = light_forward(inputs, kind, cfg, retain_probs=True).probs
                masses.append(prefix_mass(probs, p))
            for smaller, larger in zip(masses, masses[1:]):
                assert np.all(larger >= smaller - 1e-12), (seed, kind)

    def test_sweep_visual_mass_non_decreasing(self, base_inputs):
        rows = prefix_ratio_sweep(base_inputs, MaskKind.FULL, MergeConfig(), [1, 2, 4, 8])
        masses = [r.visual_prefix_mass for r in rows]
        assert all(b >= a - 1e-12 for a, b in zip(masses, masses[1:]))

    def test_without_visual_tokens(self):
        inputs = synth_inputs(SequenceLayout(0, 5), 4, 1, seed=1)
        rows = prefix_ratio_sweep(inputs, MaskKind.FULL, MergeConfig(), [1, 2])
        assert all(r.visual_prefix_mass is None for r in rows)
