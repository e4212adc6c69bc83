"""コア機能モジュール"""