"""Report rendering: delimited tables plus matplotlib figures.

Every CLI command that emits a table also renders a PNG next to it, so a
run directory is self-describing without further tooling.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    return rows[0], rows[1:]


def format_table(header: list[str], rows: list[list]) -> str:
    """Fixed-width text rendering for stdout."""
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _load_log(log_path: Path) -> tuple[list[dict], list[dict]]:
    steps, evals = [], []
    with open(log_path) as f:
        for line in f:
            record = json.loads(line)
            if record.get("type") == "step":
                steps.append(record)
            elif record.get("type") == "eval":
                evals.append(record)
    return steps, evals


def render_training_curves(log_path: Path, fig_path: Path) -> None:
    """Loss components, learning rate, gate means and eval mIoU from the run log."""
    steps, evals = _load_log(log_path)
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    if steps:
        xs = [r["step"] for r in steps]
        axes[0, 0].plot(xs, [r["loss_total"] for r in steps], label="total")
        axes[0, 0].plot(xs, [r["loss_main"] for r in steps], label="main")
        axes[0, 0].plot(
            xs, [r["loss_aux_rgb"] + r["loss_aux_aux"] for r in steps], label="aux"
        )
        axes[0, 0].set_title("loss")
        axes[0, 0].set_xlabel("step")
        axes[0, 0].legend()
        axes[0, 1].plot(xs, [r["lr"] for r in steps])
        axes[0, 1].set_title("learning rate")
        axes[0, 1].set_xlabel("step")
        gate_series = list(zip(*[r["gate_means"] for r in steps]))
        for s, series in enumerate(gate_series):
            axes[1, 0].plot(xs, series, label=f"stage {s + 1}")
        axes[1, 0].set_ylim(0, 1)
        axes[1, 0].set_title("mean gate (optical share)")
        axes[1, 0].set_xlabel("step")
        if gate_series:
            axes[1, 0].legend()
    if evals:
        epochs = [r["epoch"] for r in evals]
        axes[1, 1].plot(epochs, [r["miou"] for r in evals], marker="o", label="mIoU")
        axes[1, 1].plot(epochs, [r["mf1"] for r in evals], marker="s", label="mF1")
        axes[1, 1].plot(epochs, [r["oa"] for r in evals], marker="^", label="OA")
        axes[1, 1].set_title("test metrics")
        axes[1, 1].set_xlabel("epoch")
        axes[1, 1].legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def render_ablation_figure(rows: list[list], fig_path: Path) -> None:
    """rows: [variant, params_m, oa, mf1, miou]."""
    variants = [r[0] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(variants, [float(r[1]) for r in rows], color="tab:gray")
    ax1.set_title("trainable parameters (M)")
    ax1.tick_params(axis="x", rotation=20)
    width = 0.25
    xs = range(len(variants))
    for off, (col, name) in enumerate([(2, "OA"), (3, "mF1"), (4, "mIoU")]):
        ax2.bar([x + (off - 1) * width for x in xs], [float(r[col]) for r in rows], width, label=name)
    ax2.set_xticks(list(xs))
    ax2.set_xticklabels(variants, rotation=20)
    ax2.set_title("test metrics")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)


def render_robustness_figure(rows: list[list], fig_path: Path) -> None:
    """rows: [model, seed, mode, oa, mf1, miou] with mode in full/rgb_only/drop."""
    fig, ax = plt.subplots(figsize=(8, 4))
    labels, values = [], []
    for row in rows:
        if row[2] == "drop":
            labels.append(f"{row[0]}/s{row[1]}")
            values.append(float(row[5]))
    ax.bar(labels, values, color=["tab:blue" if l.startswith("masked") else "tab:red" for l in labels])
    ax.set_ylabel("mIoU drop (full - rgb_only)")
    ax.set_title("degradation when the auxiliary modality is zeroed")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
