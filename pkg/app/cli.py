"""
コマンドラインインターフェース

サブコマンド: mask, attn, equiv, bench, generate, sweep
終了コード: 0 成功、1 使用法・入力エラー、2 性質・許容誤差の検査失敗
"""

from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import click
from click.core import ParameterSource
import numpy as np

from app import __version__
from app.core.exceptions import FutureMaskError, PropertyViolation
from app.core.logging import get_logger, log_error, log_run_event, setup_logging
from app.core.layout import AttentionInputs, Precision
from app.models import Kernel, OutputFormat, RunConfig, load_run_config
from app.services import export_service
from app.services.attention_service import (
    AttentionOutput,
    attention_entropy,
    distribution_gap,
    future_attention_mass,
    masked_forward,
)
from app.services.benchmark_service import run_benchmark
from app.services.equivalence_service import run_equivalence_sweep
from app.services.flash_attention import WorkspaceTracker, flash_forward, flash_merged_forward
from app.services.mask_service import MaskKind, build_mask
from app.services.merge_service import Distribute, light_forward, prefix_ratio_sweep
from app.services.simulator_service import RefreshPolicy, run_generation


logger = get_logger(__name__)

# RunConfig のフィールドに対応する CLI パラメータ名
CONFIG_FIELDS = tuple(RunConfig.model_fields)


class FutureMaskGroup(click.Group):
    """click の使用法エラーを終了コード1に揃えるグループ"""

    def make_context(self, *args: Any, **kwargs: Any) -> click.Context:
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = 1
            raise

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = 1
            raise


def _choice(enum_cls: Any) -> click.Choice:
    return click.Choice([member.value for member in enum_cls])


def run_options(func: Callable) -> Callable:
    """全サブコマンド共通の RunConfig フラグ"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
                     help="フラットな JSON 設定ファイル"),
        click.option("--save-config", type=click.Path(dir_okay=False, path_type=Path),
                     help="実効設定を書き出すパス"),
        click.option("--num-visual", type=int, help="視覚トークン数 m（既定 6）"),
        click.option("--num-text", type=int, help="テキストトークン数 n（既定 4）"),
        click.option("--mask", type=_choice(MaskKind), help="マスク種別（既定 f）"),
        click.option("--merge/--no-merge", default=None, help="未来スコアをプレフィックスへ統合"),
        click.option("--kernel-size", type=int, help="プーリング窓サイズ k（既定 1）"),
        click.option("--prefix-size", type=int, help="統合先の先頭列数 p（既定 1）"),
        click.option("--merge-scale", type=float, help="プール値の倍率（既定 1.0）"),
        click.option("--distribute", type=_choice(Distribute), help="配分方法（既定 replicate）"),
        click.option("--head-dim", type=int, help="ヘッド次元 d（既定 8）"),
        click.option("--heads", type=int, help="ヘッド数 H（既定 1）"),
        click.option("--layers", type=int, help="層数（既定 2）"),
        click.option("--vocab", type=int, help="語彙サイズ（既定 64）"),
        click.option("--seed", type=int, help="乱数シード（既定 42）"),
        click.option("--kernel", type=_choice(Kernel), help="attn の計算経路（既定 reference）"),
        click.option("--block-rows", type=int, help="行ブロックサイズ B_r（既定 16、equiv では未指定なら試行ごと）"),
        click.option("--block-cols", type=int, help="列ブロックサイズ B_c（既定 16、equiv では未指定なら試行ごと）"),
        click.option("--precision", type=_choice(Precision), help="数値精度（既定 f64）"),
        click.option("--new-tokens", type=int, help="生成トークン数（既定 5）"),
        click.option("--trials", type=int, help="等価性スイープの試行数（既定 100）"),
        click.option("--refresh", type=_choice(RefreshPolicy), help="デコード時の再スコア計数（既定 dense）"),
        click.option("--timings/--no-timings", default=None, help="トレースに壁時計時間を含める"),
        click.option("--retain-probs/--no-retain-probs", default=None, help="確率行列を保持する"),
        click.option("--out", type=str, help="出力パス（未指定なら標準出力）"),
        click.option("--format", "format", type=_choice(OutputFormat), help="出力形式（既定 csv）"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _command_line_overrides(ctx: click.Context, params: Dict[str, Any]) -> Dict[str, Any]:
    """コマンドラインで明示されたフラグのみを上書き値とする"""
    overrides: Dict[str, Any] = {}
    for name in CONFIG_FIELDS:
        if name in params and ctx.get_parameter_source(name) is ParameterSource.COMMANDLINE:
            overrides[name] = params[name]
    return overrides


def handle_errors(command: str) -> Callable:
    """ドメイン例外を終了コードへ対応付けるデコレーター"""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            ctx = click.get_current_context()
            try:
                return func(*args, **kwargs)
            except PropertyViolation as e:
                log_error(e, {"command": command})
                click.echo(f"Error: {e}", err=True)
                ctx.exit(2)
            except (FutureMaskError, OSError) as e:
                log_error(e, {"command": command})
                raise click.ClickException(str(e)) from e
        return wrapper
    return decorator


def resolve_config(ctx: click.Context, params: Dict[str, Any]) -> RunConfig:
    """設定ファイルとフラグから実効設定を作り、必要なら書き出す"""
    config = load_run_config(params.get("config_path"), _command_line_overrides(ctx, params))
    save_path: Optional[Path] = params.get("save_config")
    if save_path is not None:
        config.dump(save_path)
    log_run_event(ctx.command.name or "", "config_resolved", config.model_dump(mode="json"))
    return config


@click.group(cls=FutureMaskGroup)
@click.version_option(__version__, prog_name="future-mask")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default=None, help="ログレベル（既定は設定値）")
def cli(log_level: Optional[str]) -> None:
    """フューチャーアウェア・アテンションマスクのツール群"""
    setup_logging(log_level)


@cli.command("mask")
@run_options
@click.pass_context
@handle_errors("mask")
def mask_command(ctx: click.Context, **params: Any) -> None:
    """マスク行列を "0"/"-inf" の CSV で出力"""
    config = resolve_config(ctx, params)
    mask = build_mask(config.layout, config.mask)
    count_line = f"valid_attention_count,{mask.valid_count}\n"

    export_service.write_csv(mask.to_csv_rows(), config.out)
    if config.out is not None:
        export_service.write_text(count_line, f"{config.out}.count")
    click.echo(count_line, err=True, nl=False)


def _head_payload(result: AttentionOutput, head: int) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "output": result.output[head].astype(np.float64).tolist(),
        "logsumexp": result.logsumexp[head].astype(np.float64).tolist(),
    }
    if result.probs is not None:
        payload["probs"] = result.probs[head].astype(np.float64).tolist()
    return payload


def _diagnostics(config: RunConfig, result: AttentionOutput, reference: AttentionOutput) -> Dict[str, Any]:
    """因果マスクとの分布ギャップ・未来質量・エントロピー（ヘッド平均）"""
    if result.probs is None or reference.probs is None:
        return {}
    m = config.num_visual
    gaps = [distribution_gap(result.probs[h], reference.probs[h], config.layout) for h in range(result.num_heads)]
    future = future_attention_mass(result.probs)
    entropy = attention_entropy(result.probs)

    def mean_or_none(values: List[Optional[float]]) -> Optional[float]:
        present = [v for v in values if v is not None]
        return float(np.mean(present)) if present else None

    return {
        "gap_to_causal": {
            "mean": mean_or_none([g.mean for g in gaps]),
            "visual_mean": mean_or_none([g.visual_mean for g in gaps]),
            "text_mean": mean_or_none([g.text_mean for g in gaps]),
        },
        "visual_future_mass": float(future[:, :m].mean()) if m else None,
        "visual_entropy": float(entropy[:, :m].mean()) if m else None,
        "text_entropy": float(entropy[:, m:].mean()) if config.num_text else None,
    }


def _flash_attention(
    config: RunConfig, inputs: AttentionInputs, dense: AttentionOutput
) -> Tuple[AttentionOutput, Dict[str, Any]]:
    """ブロック化カーネルの出力・logsumexp に差し替える（ヒートマップは全行列側の確率）"""
    spec = config.block_spec
    tracker = WorkspaceTracker()
    if config.merge:
        blocked = flash_merged_forward(inputs, config.layout, config.mask, config.merge_config, spec, tracker)
    else:
        blocked = flash_forward(inputs, config.layout, config.mask, spec, tracker)

    error = max(
        float(np.max(np.abs(blocked.output.astype(np.float64) - dense.output.astype(np.float64)))),
        float(np.max(np.abs(blocked.logsumexp.astype(np.float64) - dense.logsumexp.astype(np.float64)))),
    )
    summary = {
        "name": Kernel.FLASH.value,
        "block_rows": spec.block_rows,
        "block_cols": spec.block_cols,
        "tiles": tracker.tiles,
        "skipped_tiles": tracker.skipped_tiles,
        "peak_workspace": tracker.peak,
        "max_error_vs_dense": error,
    }
    return AttentionOutput(output=blocked.output, logsumexp=blocked.logsumexp, probs=dense.probs), summary


@cli.command("attn")
@run_options
@click.pass_context
@handle_errors("attn")
def attn_command(ctx: click.Context, **params: Any) -> None:
    """シード付き合成入力で順伝播し、確率ヒートマップ・出力・logsumexp を書き出す

    csv 形式では --out をディレクトリとして heatmap_h{h}.csv, output_h{h}.csv,
    logsumexp.csv, diagnostics.json を作る。json 形式では1ファイル（または標準出力）。
    --kernel flash では出力と logsumexp を --block-rows/--block-cols のブロック化カーネルで計算する。
    """
    config = resolve_config(ctx, params)
    inputs = config.inputs()
    retain = True if config.retain_probs is None else config.retain_probs

    if config.merge:
        result = light_forward(inputs, config.mask, config.merge_config, retain_probs=retain)
    else:
        result = masked_forward(inputs, build_mask(config.layout, config.mask), retain_probs=retain)
    reference = masked_forward(inputs, build_mask(config.layout, MaskKind.CAUSAL), retain_probs=retain)
    diagnostics = _diagnostics(config, result, reference)
    if config.kernel is Kernel.FLASH:
        result, diagnostics["kernel"] = _flash_attention(config, inputs, result)

    if config.format is OutputFormat.JSON:
        payload = {
            "config": config.model_dump(mode="json"),
            "heads": [_head_payload(result, h) for h in range(result.num_heads)],
            "diagnostics": diagnostics,
        }
        export_service.write_json(payload, config.out)
        return

    if config.out is None:
        raise click.UsageError("attn --format csv requires --out <directory>")
    out_dir = Path(config.out)
    for h in range(result.num_heads):
        if result.probs is not None:
            export_service.write_matrix(result.probs[h], out_dir / f"heatmap_h{h}.csv")
        export_service.write_matrix(result.output[h], out_dir / f"output_h{h}.csv")
    export_service.write_matrix(result.logsumexp, out_dir / "logsumexp.csv")
    export_service.write_json(diagnostics, out_dir / "diagnostics.json")
    log_run_event("attn", "written", {"out": str(out_dir), "heads": result.num_heads})


@cli.command("equiv")
@run_options
@click.option("--fault", is_flag=True, default=False, help="マスクの1ビットを反転させる負の対照")
@click.option("--max-length", type=int, default=64, show_default=True, help="試行の最大系列長")
@click.option("--max-head-dim", type=int, default=16, show_default=True, help="試行の最大ヘッド次元")
@click.pass_context
@handle_errors("equiv")
def equiv_command(ctx: click.Context, fault: bool, max_length: int, max_head_dim: int, **params: Any) -> None:
    """ブロック化カーネルと参照実装の等価性スイープ（許容誤差超過で終了コード2）"""
    config = resolve_config(ctx, params)
    report = run_equivalence_sweep(
        trials=config.trials,
        seed=config.seed,
        precision=config.precision,
        max_length=max_length,
        max_head_dim=max_head_dim,
        max_heads=config.heads,
        fault=fault,
        block_spec=config.fixed_block_spec,
    )
    export_service.write_json(report.model_dump(mode="json"), config.out)
    if not report.passed:
        raise PropertyViolation(
            f"max error {report.worst.max_error if report.worst else float('nan')!r} "
            f"exceeds tolerance {report.tolerance!r}"
        )


@cli.command("bench")
@run_options
@click.pass_context
@handle_errors("bench")
def bench_command(ctx: click.Context, **params: Any) -> None:
    """4種のマスク × {非統合, 統合} の内積回数と判定（判定失敗で終了コード2）"""
    config = resolve_config(ctx, params)
    report = run_benchmark(
        config.toy_model(),
        config.layout,
        config.merge_config,
        config.new_tokens,
        config.refresh,
        include_timings=config.timings,
    )
    if config.format is OutputFormat.JSON:
        export_service.write_json(report.to_report(), config.out)
    else:
        export_service.write_csv(report.to_csv_rows(), config.out)
    if not report.verdict.passed:
        raise PropertyViolation(f"count checks failed: {', '.join(report.verdict.failed())}")


@cli.command("generate")
@run_options
@click.pass_context
@handle_errors("generate")
def generate_command(ctx: click.Context, **params: Any) -> None:
    """貪欲生成を行い {config, tokens, trace} を書き出す"""
    config = resolve_config(ctx, params)
    result = run_generation(
        config.toy_model(),
        config.layout,
        config.mask,
        config.active_merge,
        config.new_tokens,
        config.refresh,
    )
    if config.format is OutputFormat.CSV:
        export_service.write_csv(result.trace.to_csv_rows(config.timings), config.out)
        return
    payload = {
        "config": config.model_dump(mode="json"),
        "tokens": result.tokens,
        "trace": result.trace.to_report(config.timings),
    }
    export_service.write_json(payload, config.out)


def _parse_sizes(ctx: click.Context, param: click.Parameter, value: str) -> List[int]:
    try:
        sizes = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"comma-separated integers expected: {value}")
    if not sizes or any(size < 1 for size in sizes):
        raise click.BadParameter(f"prefix sizes must be positive integers: {value}")
    return sizes


@cli.command("sweep")
@run_options
@click.option("--prefix-sizes", default="1,2,4,8", show_default=True, callback=_parse_sizes,
              help="カンマ区切りのプレフィックスサイズ")
@click.pass_context
@handle_errors("sweep")
def sweep_command(ctx: click.Context, prefix_sizes: List[int], **params: Any) -> None:
    """プレフィックス比ごとの視覚行のプレフィックス質量"""
    config = resolve_config(ctx, params)
    sizes = [p for p in prefix_sizes if p <= config.layout.total]
    if not sizes:
        raise click.UsageError(f"no prefix size fits sequence length {config.layout.total}")
    rows = prefix_ratio_sweep(config.inputs(), config.mask, config.merge_config, sizes)

    if config.format is OutputFormat.JSON:
        export_service.write_json([row.model_dump(mode="json") for row in rows], config.out)
        return
    header = ["prefix_size", "prefix_ratio", "visual_prefix_mass", "visual_future_mass_unmerged"]
    body = [
        [
            str(row.prefix_size),
            export_service.format_float(row.prefix_ratio),
            "" if row.visual_prefix_mass is None else export_service.format_float(row.visual_prefix_mass),
            "" if row.visual_future_mass_unmerged is None
            else export_service.format_float(row.visual_future_mass_unmerged),
        ]
        for row in rows
    ]
    export_service.write_csv([header, *body], config.out)


def main() -> None:
    """コンソールスクリプトのエントリーポイント"""
    cli(prog_name="future-mask")


if __name__ == "__main__":
    main()
