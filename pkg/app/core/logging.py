"""
ログ設定管理
"""

import logging
import sys
from typing import Any, Dict, Optional

import structlog

from app.core.config import settings


def setup_logging(level: Optional[str] = None) -> None:
    """ログ設定初期化（出力先は標準エラー）"""

    log_level = (level or settings.LOG_LEVEL).upper()

    # 標準出力はCSV/JSONのペイロード専用なので、ログは常にstderrへ
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, log_level, logging.WARNING),
        force=True,
    )

    if settings.LOG_FORMAT == "console" and not settings.is_production:
        renderer: Any = structlog.dev.ConsoleRenderer(colors=sys.stderr.isatty())
    else:
        renderer = structlog.processors.JSONRenderer(sort_keys=True)

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="ISO"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def get_logger(name: Optional[str] = None) -> Any:
    """ロガー取得"""
    return structlog.get_logger(name)


def log_run_event(command: str, event: str, details: Optional[Dict[str, Any]] = None) -> None:
    """CLI実行イベントログ出力"""
    logger = get_logger("run")
    logger.info(
        "Run event",
        command=command,
        stage=event,
        **(details or {}),
    )


def log_error(error: Exception, context: Optional[Dict[str, Any]] = None) -> None:
    """エラーログ出力"""
    logger = get_logger("error")
    logger.error(
        "Application error",
        error=str(error),
        error_type=type(error).__name__,
        **(context or {}),
    )
