"""Command-line entry point: ``vidadapt gen|train|eval|ablate|plot``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Sequence

from rich.console import Console
from rich.markup import escape

from .errors import ConfigError, VidAdaptError
from .evalkit import evaluate_clips
from .flowwarp import make_flow_source
from .logs import configure_logging, get_logger
from .options import MODES, RunConfig, load_config_file, merge_options, parse_set_flags, write_config_echo
from .report import (
    export_label_colors,
    plot_metrics,
    render_ablation_table,
    render_eval_table,
    write_eval_report,
)
from .segnet import load_checkpoint, predict_clip
from .synthdata import SOURCE_SHIFT, TARGET_SHIFT, generate_dataset, load_dataset, write_dataset
from .trainer import FINAL_CHECKPOINT, METRICS_FILENAME, run_training

log = get_logger(__name__)

EXIT_OK = 0


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors become ConfigError (exit code 1)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(f"{self.prog}: {message}")


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable; wins over --config)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidadapt", description=__doc__)
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen", help="generate the source, target and held-out datasets")
    _add_config_args(gen)

    train = commands.add_parser("train", help="train one mode")
    _add_config_args(train)
    train.add_argument("--no-progress", action="store_true", help="hide the progress bar")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint on a labelled dataset")
    _add_config_args(evaluate)
    evaluate.add_argument("--checkpoint", type=Path, help="default: <output_dir>/final.vdck")
    evaluate.add_argument("--dataset", type=Path, help="default: eval_dataset")
    evaluate.add_argument("--report-dir", type=Path, help="default: <output_dir>/eval")
    evaluate.add_argument(
        "--export-labels",
        type=int,
        default=0,
        metavar="N",
        help="write colour label maps for the first N clips",
    )

    ablate = commands.add_parser("ablate", help="train and compare several modes")
    _add_config_args(ablate)
    ablate.add_argument(
        "--modes",
        default=",".join(MODES),
        help=f"comma-separated modes (default: {','.join(MODES)})",
    )
    ablate.add_argument("--jobs", type=int, default=1, help="parallel processes (default: 1)")

    plot = commands.add_parser("plot", help="plot loss and mIoU curves from a metrics log")
    _add_config_args(plot)
    plot.add_argument("--metrics", type=Path, help="default: <output_dir>/metrics.jsonl")
    plot.add_argument("--out", type=Path, help="default: <output_dir>")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then ``--set`` flags."""
    from_file = load_config_file(args.config) if args.config else {}
    return merge_options(from_file, parse_set_flags(args.overrides))


def cmd_generate(config: RunConfig, console: Console) -> list[Path]:
    """Write the three datasets named by the config."""
    common = dict(
        height=config.height,
        width=config.width,
        num_frames=config.num_frames,
        num_classes=config.num_classes,
        num_objects=config.num_objects,
        max_speed=config.max_speed,
    )
    jobs = [
        ("source", config.source_dataset, config.num_source_clips, config.source_seed, SOURCE_SHIFT),
        ("target", config.target_dataset, config.num_target_clips, config.target_seed, TARGET_SHIFT),
        ("target", config.eval_dataset, config.num_eval_clips, config.eval_seed, TARGET_SHIFT),
    ]
    written = []
    for domain, path, count, seed, shift in jobs:
        with console.status(f"generating {count} {domain} clips into {path}"):
            clips = generate_dataset(domain, count, seed, shift=shift, **common)
            generation = dict(common, domain=domain, count=count, first_seed=seed)
            write_dataset(clips, path, workers=config.threads, generation=generation)
        write_config_echo(config, path)
        console.print(f"wrote {count} {domain} clips to {path}")
        written.append(Path(path))
    return written


def cmd_train(config: RunConfig, console: Console, *, show_progress: bool = True) -> Path:
    result = run_training(config, console=console, show_progress=show_progress)
    if result.last_eval is not None:
        render_eval_table(result.last_eval, console, title=f"{config.mode} after {config.total_steps} steps")
    console.print(f"checkpoint: {result.final_checkpoint}")
    console.print(f"metrics: {result.metrics_path}")
    return result.final_checkpoint


def cmd_eval(
    config: RunConfig,
    console: Console,
    *,
    checkpoint: Path | None = None,
    dataset: Path | None = None,
    report_dir: Path | None = None,
    export_labels: int = 0,
) -> Path:
    checkpoint = checkpoint or Path(config.output_dir) / FINAL_CHECKPOINT
    dataset = dataset or Path(config.eval_dataset)
    report_dir = report_dir or Path(config.output_dir) / "eval"
    model, _ = load_checkpoint(checkpoint)
    clips = load_dataset(dataset, limit=config.eval_clips or None)
    flow_source = make_flow_source(
        config.flow_source,
        patch_size=config.block_patch,
        search_radius=config.block_radius,
        threshold=config.occlusion_threshold,
    )
    result = evaluate_clips(
        model, clips, flow_source, gap=config.frame_gap, feature_stride=config.feature_stride
    )
    write_config_echo(config, report_dir)
    render_eval_table(result, console, title=f"Evaluation of {checkpoint.name}")
    report = write_eval_report(
        result,
        report_dir / "eval_report.json",
        {"checkpoint": str(checkpoint), "dataset": str(dataset)},
    )
    for clip in clips[:export_labels]:
        probs, _ = predict_clip(model, clip, flow_source, gap=config.frame_gap)
        prediction = probs.argmax(dim=1).numpy()
        for k in range(clip.num_frames):
            export_label_colors(clip.labels[k], report_dir / "labels" / f"{clip.name}_{k:02d}_gt.png", model.num_classes)
            export_label_colors(prediction[k], report_dir / "labels" / f"{clip.name}_{k:02d}_pred.png", model.num_classes)
    console.print(f"report: {report}")
    return report


def _parse_modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ConfigError(f"unknown mode(s) {', '.join(unknown) or '(none)'}; choose from {', '.join(MODES)}")
    return modes


def _ablation_row(config: RunConfig, result_eval: Any) -> dict[str, Any]:
    return {
        "mode": config.mode,
        "output_dir": config.output_dir,
        "miou": result_eval.miou if result_eval else float("nan"),
        "temporal_consistency": result_eval.temporal_consistency if result_eval else None,
        "sigma2_inter": result_eval.sigma2_inter if result_eval else None,
        "sigma2_intra": result_eval.sigma2_intra if result_eval else None,
    }


def _run_mode(options: dict[str, Any]) -> dict[str, Any]:
    config = merge_options(options)
    result = run_training(config, show_progress=False)
    return _ablation_row(config, result.last_eval)


def cmd_ablate(
    config: RunConfig, modes: Sequence[str], console: Console, *, jobs: int = 1
) -> list[dict[str, Any]]:
    """Train every mode into ``<output_dir>/<mode>`` and tabulate the final evaluations."""
    root = Path(config.output_dir)
    write_config_echo(config, root)
    configs = [replace(config, mode=mode, output_dir=str(root / mode)) for mode in modes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_mode, [asdict(c) for c in configs]))
    else:
        source = load_dataset(config.source_dataset)
        target = load_dataset(config.target_dataset)
        held_out = load_dataset(config.eval_dataset, limit=config.eval_clips or None)
        rows = []
        for mode_config in configs:
            console.print(f"training mode [bold]{mode_config.mode}[/]")
            result = run_training(
                mode_config, source=source, target=target, eval_clips=held_out, console=console
            )
            rows.append(_ablation_row(mode_config, result.last_eval))
    render_ablation_table(rows, console)
    (root / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    return rows


def cmd_plot(
    config: RunConfig, console: Console, *, metrics: Path | None = None, out: Path | None = None
) -> list[Path]:
    metrics = metrics or Path(config.output_dir) / METRICS_FILENAME
    written = plot_metrics(metrics, out or Path(config.output_dir))
    for path in written:
        console.print(f"wrote {path}")
    return written


def run(args: argparse.Namespace, console: Console) -> int:
    config = resolve_config(args)
    if args.command == "gen":
        cmd_generate(config, console)
    elif args.command == "train":
        cmd_train(config, console, show_progress=not args.no_progress)
    elif args.command == "eval":
        cmd_eval(
            config,
            console,
            checkpoint=args.checkpoint,
            dataset=args.dataset,
            report_dir=args.report_dir,
            export_labels=args.export_labels,
        )
    elif args.command == "ablate":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cmd_ablate(config, _parse_modes(args.modes), console, jobs=args.jobs)
    elif args.command == "plot":
        cmd_plot(config, console, metrics=args.metrics, out=args.out)
    return EXIT_OK


def main(argv: Sequence[str] | None = None, console: Console | None = None) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    console = console or Console()
    try:
        args = build_parser().parse_args(argv)
        level = args.log_level.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ConfigError(f"unknown log level {args.log_level!r}")
        configure_logging(level, console)
        return run(args, console)
    except VidAdaptError as exc:
        console.print(f"[bold red]error:[/] {escape(str(exc))}", highlight=False)
        return exc.exit_code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
