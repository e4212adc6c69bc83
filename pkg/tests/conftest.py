"""
pytest設定とフィクスチャ
"""

import os

import pytest
from click.testing import CliRunner

# テスト環境の設定
os.environ["ENVIRONMENT"] = "test"
os.environ["LOG_LEVEL"] = "WARNING"
os.environ["TRACE_TIMINGS"] = "False"

from app.core.layout import Precision, SequenceLayout, synth_inputs  # noqa: E402
from app.services.simulator_service import ToyModel  # noqa: E402


@pytest.fixture
def base_layout():
    """m=6, n=4（L=10）のレイアウト"""
    return SequenceLayout(6, 4)


@pytest.fixture
def small_layout():
    """m=3, n=2 のレイアウト"""
    return SequenceLayout(3, 2)


@pytest.fixture
def base_inputs(base_layout):
    """L=10 の合成 Q/K/V（1ヘッド、d=8）"""
    return synth_inputs(base_layout, head_dim=8, num_heads=1, seed=7)


@pytest.fixture
def multi_head_inputs():
    """L=23 の合成 Q/K/V（2ヘッド、d=5）"""
    return synth_inputs(SequenceLayout(9, 14), head_dim=5, num_heads=2, seed=11)


@pytest.fixture
def f32_inputs(base_layout):
    return synth_inputs(base_layout, head_dim=8, num_heads=1, seed=7, precision=Precision.F32)


@pytest.fixture
def single_head_model():
    """1層1ヘッドのトイモデル"""
    return ToyModel.create(vocab_size=32, embed_dim=8, num_layers=1, num_heads=1, seed=3)


@pytest.fixture
def toy_model():
    """2層2ヘッドのトイモデル"""
    return ToyModel.create(vocab_size=64, embed_dim=16, num_layers=2, num_heads=2, seed=5)


@pytest.fixture
def cli_runner():
    """click テストランナー"""
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    """設定ファイル作成ヘルパー"""
    import json

    def _write(data, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return _write


@pytest.fixture(autouse=True)
def configure_logging():
    """テストごとに現在の標準エラーへログ出力を張り直す"""
    from app.core.logging import setup_logging

    setup_logging("WARNING")
    yield
