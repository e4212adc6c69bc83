"""
レイアウト・シード・合成入力のユニットテスト
"""

import numpy as np
import pytest

from app.core.layout import (
    AttentionInputs,
    EmptySequenceError,
    LayoutError,
    Precision,
    SequenceLayout,
    Seed,
    build_inputs,
    synth_inputs,
)
from tests.fixtures.oracles import philox4x64_block, philox_words, reference_qkv
from tests.fixtures.transcripts import PHILOX_ZERO_BLOCK, SEED7_FIRST_WORDS, SEED7_QKV


class TestSequenceLayout:
    """SequenceLayoutのテスト"""

    def test_index_sets(self):
        """視覚・テキストのインデックス集合"""
        layout = SequenceLayout(3, 2)
        assert layout.total == 5
        assert list(layout.visual_indices) == [1, 2, 3]
        assert list(layout.text_indices) == [4, 5]
        assert layout.is_visual(3) and not layout.is_visual(4)
        assert layout.is_text(5) and not layout.is_text(3)

    def test_empty_sequence_rejected(self):
        with pytest.raises(EmptySequenceError):
            SequenceLayout(0, 0)

    def test_negative_counts_rejected(self):
        with pytest.raises(LayoutError):
            SequenceLayout(-1, 3)

    def test_degenerate_splits(self):
        """片方が0トークンのレイアウト"""
        text_only = SequenceLayout(0, 4)
        assert list(text_only.visual_indices) == []
        visual_only = SequenceLayout(4, 0)
        assert list(visual_only.text_indices) == []

    def test_grow_text(self):
        layout = SequenceLayout(2, 1).grow_text(3)
        assert layout == SequenceLayout(2, 4)


class TestSeed:
    """Seedのテスト"""

    def test_range_checked(self):
        Seed(0)
        Seed(2**64 - 1)
        with pytest.raises(LayoutError):
            Seed(-1)
        with pytest.raises(LayoutError):
            Seed(2**64)

    def test_same_stream_reproducible(self):
        a = Seed(123).generator(stream=1).standard_normal(16)
        b = Seed(123).generator(stream=1).standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_streams_independent(self):
        a = Seed(123).generator(stream=0).standard_normal(16)
        b = Seed(123).generator(stream=1).standard_normal(16)
        assert not np.array_equal(a, b)


class TestSynthInputs:
    """合成入力生成のテスト"""

    def test_oracle_reproduces_known_answer(self):
        """参照 Philox 実装はカウンタ0・キー0の既知解を再現する"""
        assert philox4x64_block([0, 0, 0, 0], [0, 0]) == PHILOX_ZERO_BLOCK

    def test_raw_stream_matches_transcript(self):
        words = Seed(7).generator(stream=0).bit_generator.random_raw(4)
        assert [int(w) for w in words] == SEED7_FIRST_WORDS
        assert philox_words(7, 0, 4) == SEED7_FIRST_WORDS

    def test_matches_checked_in_transcript(self):
        """L=4, d=2, H=2, seed=7 の固定値"""
        inputs = synth_inputs(SequenceLayout(2, 2), head_dim=2, num_heads=2, seed=7)
        expected = np.array(SEED7_QKV)

        np.testing.assert_allclose(inputs.queries, expected[:, 0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(inputs.keys, expected[:, 1], rtol=0, atol=1e-12)
        np.testing.assert_allclose(inputs.values, expected[:, 2], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed, shape", [(99, (2, 5, 4)), (0, (1, 3, 3)), (2**64 - 1, (3, 2, 1))])
    def test_matches_reference_draw_order(self, seed, shape):
        """ヘッド優先・Q/K/V順・行優先の生成順序（奇数個の引きも含む）"""
        num_heads, total, head_dim = shape
        inputs = synth_inputs(SequenceLayout(total, 0), head_dim=head_dim, num_heads=num_heads, seed=seed)
        expected = reference_qkv(seed, num_heads=num_heads, total=total, head_dim=head_dim)

        np.testing.assert_allclose(inputs.queries, expected[:, 0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(inputs.keys, expected[:, 1], rtol=0, atol=1e-12)
        np.testing.assert_allclose(inputs.values, expected[:, 2], rtol=0, atol=1e-12)

    def test_f32_is_rounded_f64(self):
        layout = SequenceLayout(2, 2)
        f64 = synth_inputs(layout, 3, 1, seed=5)
        f32 = synth_inputs(layout, 3, 1, seed=5, precision=Precision.F32)
        assert f32.dtype == np.float32
        assert f32.precision is Precision.F32
        np.testing.assert_array_equal(f32.queries, f64.queries.astype(np.float32))

    def test_inputs_are_read_only(self):
        inputs = synth_inputs(SequenceLayout(1, 1), 2, 1, seed=0)
        with pytest.raises(ValueError):
            inputs.queries[0, 0, 0] = 1.0

    def test_invalid_dimensions(self):
        with pytest.raises(LayoutError):
            synth_inputs(SequenceLayout(1, 1), 0, 1, seed=0)


class TestBuildInputs:
    """build_inputsのテスト"""

    def test_two_dimensional_is_single_head(self):
        layout = SequenceLayout(1, 2)
        q = np.ones((3, 4))
        inputs = build_inputs(layout, q, q, q)
        assert inputs.num_heads == 1
        assert inputs.head_dim == 4
        assert inputs.queries.shape == (1, 3, 4)

    def test_shape_mismatch(self):
        layout = SequenceLayout(1, 2)
        with pytest.raises(LayoutError):
            build_inputs(layout, np.ones((4, 2)), np.ones((4, 2)), np.ones((4, 2)))

    def test_non_finite_rejected(self):
        layout = SequenceLayout(1, 0)
        bad = np.array([[np.nan]])
        with pytest.raises(LayoutError):
            AttentionInputs(layout, 1, 1, bad[np.newaxis], np.ones((1, 1, 1)), np.ones((1, 1, 1)))
