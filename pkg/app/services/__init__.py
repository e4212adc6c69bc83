"""サービス層"""