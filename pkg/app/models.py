"""
CLI実行設定モデル定義
"""

import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
import structlog

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.core.layout import AttentionInputs, Precision, SequenceLayout, make_layout, synth_inputs
from app.services.flash_attention import BlockSpec
from app.services.mask_service import MaskKind
from app.services.merge_service import Distribute, MergeConfig
from app.services.simulator_service import RefreshPolicy, ToyModel


logger = structlog.get_logger(__name__)


class OutputFormat(str, Enum):
    """出力形式列挙"""
    CSV = "csv"
    JSON = "json"


class Kernel(str, Enum):
    """attn の計算経路"""
    REFERENCE = "reference"
    FLASH = "flash"


class RunConfig(BaseModel):
    """実行設定（フラット JSON 設定ファイルと CLI フラグの共通スキーマ）"""

    # レイアウト
    num_visual: int = Field(default=6, ge=0, description="視覚トークン数 m")
    num_text: int = Field(default=4, ge=0, description="テキストトークン数 n")
    mask: MaskKind = Field(default=MaskKind.FULL, description="causal | f | v2v | v2t")

    # 統合設定
    merge: bool = Field(default=False, description="未来スコアをプレフィックスへ統合するか")
    kernel_size: int = Field(default=1, ge=1)
    prefix_size: int = Field(default=1, ge=1)
    merge_scale: float = Field(default=1.0)
    distribute: Distribute = Field(default=Distribute.REPLICATE)

    # モデル設定
    head_dim: int = Field(default=8, ge=1)
    heads: int = Field(default=1, ge=1)
    layers: int = Field(default=2, ge=1)
    vocab: int = Field(default=64, ge=1)
    seed: int = Field(default=42, ge=0, le=2**64 - 1)

    # ブロック化カーネル（未指定なら equiv は試行ごとに変え、他は 16）
    kernel: Kernel = Field(default=Kernel.REFERENCE)
    block_rows: Optional[int] = Field(default=None, ge=1)
    block_cols: Optional[int] = Field(default=None, ge=1)
    precision: Precision = Field(default=Precision.F64)

    # 生成・ベンチマーク・等価性検査
    new_tokens: int = Field(default=5, ge=0)
    trials: int = Field(default_factory=lambda: settings.EQUIV_DEFAULT_TRIALS, ge=1)
    refresh: RefreshPolicy = Field(default=RefreshPolicy.DENSE)
    timings: bool = Field(default_factory=lambda: settings.TRACE_TIMINGS, description="壁時計時間をトレースに書き出す")
    retain_probs: Optional[bool] = Field(default=None)

    # 出力
    out: Optional[str] = Field(default=None, description="出力パス（未指定なら標準出力）")
    format: OutputFormat = Field(default=OutputFormat.CSV)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def check_layout(self) -> "RunConfig":
        if self.num_visual + self.num_text < 1:
            raise ValueError("num_visual + num_text must be >= 1")
        return self

    @property
    def layout(self) -> SequenceLayout:
        return make_layout(self.num_visual, self.num_text)

    @property
    def merge_config(self) -> MergeConfig:
        return MergeConfig(
            kernel_size=self.kernel_size,
            prefix_size=self.prefix_size,
            merge_scale=self.merge_scale,
            distribute=self.distribute,
        )

    @property
    def active_merge(self) -> Optional[MergeConfig]:
        return self.merge_config if self.merge else None

    @property
    def block_spec(self) -> BlockSpec:
        default = BlockSpec()
        return BlockSpec(self.block_rows or default.block_rows, self.block_cols or default.block_cols)

    @property
    def fixed_block_spec(self) -> Optional[BlockSpec]:
        """ブロックサイズが明示されたときのみ BlockSpec"""
        if self.block_rows is None and self.block_cols is None:
            return None
        return self.block_spec

    @property
    def embed_dim(self) -> int:
        return self.head_dim * self.heads

    def inputs(self) -> AttentionInputs:
        return synth_inputs(self.layout, self.head_dim, self.heads, self.seed, self.precision)

    def toy_model(self) -> ToyModel:
        return ToyModel.create(
            vocab_size=self.vocab,
            embed_dim=self.embed_dim,
            num_layers=self.layers,
            num_heads=self.heads,
            seed=self.seed,
        )

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def dump(self, path: Path) -> None:
        """実効設定を書き出す（再読込で同一の設定になる）"""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """設定ファイルを読み込み、フラグ値で上書きする（フラグ優先）"""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"設定ファイルを読み込めません: {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"設定ファイルはフラットな JSON オブジェクトである必要があります: {path}")
        data.update(loaded)

    data.update({k: v for k, v in (overrides or {}).items() if v is not None})

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"無効な設定です: {e}") from e

    logger.debug("Run config loaded", source=str(path) if path else None, overrides=sorted(overrides or {}))
    return config
