"""Report emission: metrics JSON, delimited tables, and rendered figures.

Every artifact the CLI writes comes through here so train / eval / bench /
ablate share one output convention: `metrics.json` plus CSVs next to it,
and PNG figures under `figures/` unless disabled.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files only

import matplotlib.pyplot as plt

from .hashing import BenchmarkRow
from .training import AblationRow, MetricsReport


def write_metrics_json(path: str | Path, report: MetricsReport) -> Path:
    path = Path(path)
    path.write_text(report.to_json())
    return path


def write_epoch_csv(path: str | Path, report: MetricsReport) -> Path:
    """Per-epoch loss/utilization table suitable for external plotting."""
    path = Path(path)
    num_experts = len(report.epochs[0].expert_fractions) if report.epochs else 0
    header = ["epoch", "l_fusion", "l_switch", "l_var", "l_hash", "total"]
    header += [f"util_{i}" for i in range(num_experts)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for stats in report.epochs:
            row = [stats.epoch, stats.losses.l_fusion, stats.losses.l_switch,
                   stats.losses.l_var, stats.losses.l_hash, stats.losses.total]
            row += stats.expert_fractions
            writer.writerow(row)
    return path


def write_ablation_csv(path: str | Path, rows: list[AblationRow],
                       code_bits: list[int]) -> Path:
    """Comparison table: one row per variant, I2T/T2I/Mean per bit length."""
    path = Path(path)
    header = ["variant"]
    for bits in code_bits:
        header += [f"i2t_{bits}", f"t2i_{bits}", f"mean_{bits}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            out = [row.name]
            for bits in code_bits:
                cell = row.per_bits.get(str(bits), {})
                out += [cell.get("i2t", ""), cell.get("t2i", ""), cell.get("mean", "")]
            writer.writerow(out)
    return path


def write_benchmark(csv_path: str | Path, json_path: str | Path,
                    rows: list[BenchmarkRow]) -> tuple[Path, Path]:
    csv_path, json_path = Path(csv_path), Path(json_path)
    header = ["corpus_size", "code_bits", "median_us_hash", "median_us_float",
              "ratio", "bytes_hash", "bytes_float"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            d = row.as_dict()
            writer.writerow([d[k] for k in header])
    json_path.write_text(json.dumps([r.as_dict() for r in rows], indent=2))
    return csv_path, json_path


# ----------------------------------------------------------------------
# figures
# ----------------------------------------------------------------------
def _figures_dir(out_dir: str | Path) -> Path:
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    return fig_dir


def plot_loss_curves(out_dir: str | Path, report: MetricsReport) -> Path | None:
    if not report.epochs:
        return None
    fig_dir = _figures_dir(out_dir)
    epochs = [e.epoch for e in report.epochs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in [("l_fusion", "fusion"), ("l_switch", "switch"),
                       ("l_var", "variance"), ("l_hash", "hash"), ("total", "total")]:
        ax.plot(epochs, [e.losses.as_dict()[key] for e in report.epochs], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("Training loss breakdown")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = fig_dir / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_expert_utilization(out_dir: str | Path, report: MetricsReport) -> Path | None:
    if not report.epochs or not report.epochs[0].expert_fractions:
        return None
    fig_dir = _figures_dir(out_dir)
    epochs = [e.epoch for e in report.epochs]
    fractions = list(zip(*[e.expert_fractions for e in report.epochs]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.stackplot(epochs, fractions,
                 labels=[f"expert {i}" for i in range(len(fractions))], alpha=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("traffic fraction")
    ax.set_ylim(0, 1)
    ax.set_title("Per-expert routed traffic")
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    path = fig_dir / "expert_utilization.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_map_bars(out_dir: str | Path, rows: list[AblationRow],
                  code_bits: list[int]) -> Path | None:
    if not rows:
        return None
    fig_dir = _figures_dir(out_dir)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    names = [r.name for r in rows]
    x = range(len(names))
    width = 0.8 / max(len(code_bits), 1)
    for j, bits in enumerate(code_bits):
        values = [r.per_bits.get(str(bits), {}).get("mean", 0.0) for r in rows]
        ax.bar([i + j * width for i in x], values, width=width, label=f"{bits}-bit")
    ax.set_xticks([i + 0.4 - width / 2 for i in x])
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean mAP")
    ax.set_title("Ablation comparison")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = fig_dir / "ablation_map.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_benchmark(out_dir: str | Path, rows: list[BenchmarkRow]) -> Path | None:
    if not rows:
        return None
    fig_dir = _figures_dir(out_dir)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    labels = [f"{r.corpus_size:,} x {r.code_bits}b" for r in rows]
    x = range(len(rows))
    ax.bar([i - 0.2 for i in x], [r.median_us_hash for r in rows], width=0.4,
           label="packed Hamming")
    ax.bar([i + 0.2 for i in x], [r.median_us_float for r in rows], width=0.4,
           label="float inner product")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("median per-query latency (us)")
    ax.set_title("Retrieval latency: hash vs real-valued")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = fig_dir / "benchmark_latency.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
