"""
フューチャーアウェアマスク - メインパッケージ

視覚言語トークン列に対する因果マスク・フューチャーアウェアマスク、
未来スコアのカーネルプーリング統合、ブロック化アテンション、
プリフィル/デコードのコストシミュレーターを提供する
"""

__version__ = "1.0.0"
__author__ = "Future-Aware Mask Team"
__license__ = "MIT"
