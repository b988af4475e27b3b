"""Evaluation reports, ablation tables, metric plots and label-map colour exports."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.table import Table  # noqa: E402

from .errors import DatasetError, ShapeError  # noqa: E402
from .evalkit import EvalResult  # noqa: E402
from .logs import get_logger  # noqa: E402
from .synthdata import CLASS_COLORS  # noqa: E402

log = get_logger(__name__)

BACKGROUND_COLOR = (0.12, 0.12, 0.12)
REPORT_FORMAT = 1


def class_names(num_classes: int) -> list[str]:
    return ["background"] + [f"class_{c}" for c in range(1, num_classes)]


def _percent(value: float | None) -> str:
    return "-" if value is None or np.isnan(value) else f"{100 * value:.1f}"


def render_eval_table(
    result: EvalResult, console: Console | None = None, *, title: str = "Target evaluation"
) -> Table:
    """Per-class IoU row followed by mIoU, in percent; printed when a console is given."""
    names = class_names(result.confusion.num_classes)
    table = Table(title=title, header_style="bold")
    for name in names:
        table.add_column(name, justify="right")
    table.add_column("mIoU", justify="right", style="bold")
    table.add_row(*[_percent(v) for v in result.per_class_iou], _percent(result.miou))
    if console is not None:
        console.print(table)
        extras = [f"pixel accuracy {_percent(result.pixel_accuracy)}"]
        if result.temporal_consistency is not None:
            extras.append(f"temporal consistency {_percent(result.temporal_consistency)}")
        if result.sigma2_intra is not None:
            extras.append(
                f"feature variance inter {result.sigma2_inter:.3f} / intra {result.sigma2_intra:.3f}"
            )
        console.print(", ".join(extras))
    return table


def write_eval_report(
    result: EvalResult, path: str | Path, extra: dict[str, Any] | None = None
) -> Path:
    """Write the evaluation as JSON, confusion matrix included."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "format": REPORT_FORMAT,
        "class_names": class_names(result.confusion.num_classes),
        **result.to_record(),
        "confusion_matrix": result.confusion.counts.tolist(),
        **(extra or {}),
    }
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def render_ablation_table(
    rows: Sequence[dict[str, Any]], console: Console | None = None
) -> Table:
    """One row per mode with mIoU, temporal consistency and the delta to source_only."""
    baseline = next((r["miou"] for r in rows if r["mode"] == "source_only"), None)
    table = Table(title="Ablation", header_style="bold")
    table.add_column("mode")
    table.add_column("mIoU", justify="right")
    table.add_column("gain", justify="right")
    table.add_column("temporal consistency", justify="right")
    for row in rows:
        gain = "-" if baseline is None else f"{100 * (row['miou'] - baseline):+.1f}"
        table.add_row(
            row["mode"], _percent(row["miou"]), gain, _percent(row.get("temporal_consistency"))
        )
    if console is not None:
        console.print(table)
    return table


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"metrics log not found: {path}")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError as exc:
            raise DatasetError(f"{path}:{number}: unreadable metrics record") from exc
    return records


def _series(records: Iterable[dict[str, Any]], kind: str, key: str) -> tuple[list[int], list[float]]:
    steps, values = [], []
    for record in records:
        if record.get("kind") == kind and record.get(key) is not None:
            steps.append(record["step"])
            values.append(record[key])
    return steps, values


LOSS_KEYS = ("ssl", "sa", "sta", "wd", "itcr", "total", "disc")


def plot_metrics(metrics_path: str | Path, output_dir: str | Path) -> list[Path]:
    """Write ``losses.png`` and ``miou.png`` from a metrics log; returns written files."""
    records = read_metrics(metrics_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for key in LOSS_KEYS:
        steps, values = _series(records, "step", key)
        if steps:
            ax.plot(steps, values, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if ax.lines:
        ax.legend(loc="upper right", fontsize="small")
    fig.tight_layout()
    written.append(output_dir / "losses.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in (("miou_target", "target mIoU"), ("temporal_consistency", "temporal consistency")):
        steps, values = _series(records, "eval", key)
        if steps:
            ax.plot(steps, values, marker="o", label=label)
    ax.set_xlabel("step")
    ax.set_ylim(0.0, 1.0)
    if ax.lines:
        ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    written.append(output_dir / "miou.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)
    log.info("wrote %s", ", ".join(str(p) for p in written))
    return written


def label_colormap(num_classes: int) -> ListedColormap:
    colors = [BACKGROUND_COLOR] + [CLASS_COLORS[(c - 1) % len(CLASS_COLORS)] for c in range(1, num_classes)]
    return ListedColormap(colors, name="vidadapt_labels")


def colorize_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``(H, W)`` labels to an ``(H, W, 3)`` float RGB image."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"label map must be (H, W), got {labels.shape}")
    cmap = label_colormap(num_classes)
    return cmap(np.clip(labels, 0, num_classes - 1).astype(np.int64))[..., :3]


def export_label_colors(labels: np.ndarray, path: str | Path, num_classes: int) -> Path:
    """Save a colour-coded label map as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, colorize_labels(labels, num_classes))
    return path
