"""
アプリケーション設定管理
"""

from typing import Literal

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """プロセス全体の設定クラス"""

    # 基本設定
    APP_NAME: str = "future-aware-mask"
    APP_VERSION: str = "1.0.0"

    # 環境設定
    ENVIRONMENT: str = "development"
    DEBUG: bool = False

    # ログ設定
    LOG_LEVEL: str = "WARNING"
    LOG_FORMAT: Literal["console", "json"] = "console"

    # メモリ設定（Lがこの値を超える場合、確率行列は既定で保持しない）
    PROBS_RETENTION_LIMIT: int = 4096

    # 許容誤差設定（ブロック化カーネル vs 素朴実装、最大絶対誤差）
    EQUIV_TOLERANCE_F64: float = 1e-10
    EQUIV_TOLERANCE_F32: float = 1e-5
    EQUIV_DEFAULT_TRIALS: int = 100

    # トレース設定（壁時計時間はファイル出力の決定性を崩すため既定で出力しない）
    TRACE_TIMINGS: bool = False

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore",  # 不明な環境変数を無視
    )

    @field_validator("ENVIRONMENT")
    @classmethod
    def validate_environment(cls, v: str) -> str:
        allowed = ["development", "test", "production"]
        if v not in allowed:
            raise ValueError(f"Environment must be one of {allowed}")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        return v.upper()

    @field_validator("PROBS_RETENTION_LIMIT")
    @classmethod
    def validate_retention_limit(cls, v: int) -> int:
        if v < 1:
            raise ValueError("PROBS_RETENTION_LIMIT must be positive")
        return v

    @property
    def is_development(self) -> bool:
        return self.ENVIRONMENT == "development"

    @property
    def is_production(self) -> bool:
        return self.ENVIRONMENT == "production"

    @property
    def is_test(self) -> bool:
        return self.ENVIRONMENT == "test"

    def tolerance_for(self, precision: str) -> float:
        """精度別の許容誤差取得"""
        return self.EQUIV_TOLERANCE_F32 if precision == "f32" else self.EQUIV_TOLERANCE_F64


# グローバル設定インスタンス
settings = Settings()


def get_settings() -> Settings:
    """設定取得"""
    return settings
