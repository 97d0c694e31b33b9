"""Experiment records, metrics CSV emission, and figure rendering.

The metrics CSV is the canonical, diffable record of a run: a fixed
header, floats at 6 significant digits, strictly increasing step indices.
Figures are rendered next to each delimited output (training curves next
to the metrics CSV, a ranked bar chart next to the comparison table);
they are a convenience view and carry no data of their own.
"""

from dataclasses import dataclass, field
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

METRIC_COLUMNS = (
    "step", "lr", "loss_s", "loss_u1", "loss_u2", "util_b1", "util_b2",
    "cbi_mask_rate", "naive_ratio", "acc", "ema_acc", "wall_ms",
)
HEADER = ",".join(METRIC_COLUMNS)


@dataclass
class ExperimentRecord:
    config: dict = field(default_factory=dict)
    rows: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, row: dict):
        missing = [c for c in METRIC_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"metrics row missing columns {missing}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError(
                f"step {row['step']} not greater than previous {self.rows[-1]['step']}"
            )
        self.rows.append(row)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int,)):
        return str(value)
    return f"{value:.6g}"


def emit_metrics(record: ExperimentRecord, path: str):
    """Write the metrics CSV: exact header, 6 significant digits."""
    lines = [HEADER]
    last_step = None
    for row in record.rows:
        if last_step is not None and row["step"] <= last_step:
            raise ValueError("metrics rows must be strictly increasing in step")
        last_step = row["step"]
        lines.append(",".join(_fmt(row[c]) for c in METRIC_COLUMNS))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def render_training_figure(record: ExperimentRecord, path: str):
    """Loss/utilization/identification/accuracy curves for one run."""
    steps = [r["step"] for r in record.rows]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    ax = axes[0, 0]
    for key in ("loss_s", "loss_u1", "loss_u2"):
        ax.plot(steps, [r[key] for r in record.rows], label=key)
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax = axes[0, 1]
    for key in ("util_b1", "util_b2"):
        ax.plot(steps, [r[key] for r in record.rows], label=key)
    ax.set_ylabel("utilization")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    ax = axes[1, 0]
    for key in ("cbi_mask_rate", "naive_ratio"):
        ax.plot(steps, [r[key] for r in record.rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("identification")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    ax = axes[1, 1]
    for key in ("acc", "ema_acc"):
        ax.plot(steps, [r[key] for r in record.rows], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_compare_figure(table: List[dict], path: str):
    """Ranked bar chart of mean final EMA accuracy with sd whiskers."""
    labels = [row["cell"] for row in table]
    means = [row["mean_ema_acc"] for row in table]
    sds = [row["sd_ema_acc"] for row in table]
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(labels)), 4))
    xs = range(len(labels))
    ax.bar(xs, means, yerr=sds, capsize=4, color="#4878a8")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("final EMA accuracy (mean over seeds)")
    ax.set_ylim(0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_perturb_figure(before, after, path: str):
    """Side-by-side heatmaps of one feature plane, before and after."""
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
    for ax, (arr, title) in zip(axes, ((before, "before"), (after, "after"))):
        im = ax.imshow(arr, cmap="viridis")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
