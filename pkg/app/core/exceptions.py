"""
例外基底クラス定義
"""


class FutureMaskError(Exception):
    """本パッケージの全エラーの基底クラス"""
    pass


class PropertyViolation(FutureMaskError):
    """性質検査・許容誤差検査の違反（CLI終了コード2）"""
    pass


class ConfigError(FutureMaskError):
    """設定ファイル・実行設定エラー"""
    pass
