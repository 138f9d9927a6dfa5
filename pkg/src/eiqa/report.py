"""Delimited result tables and report figures.

Tables are tab-separated with a header row; the drop table mirrors the
Standard / Unseen / Drop column layout per metric. Figures are written as
SVG with a fixed hash salt and no date metadata so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import EvalReport

_SVG_KWARGS = {"format": "svg", "metadata": {"Date": None}}


def _new_figure(width: float = 5.0, height: float = 4.0):
    plt.rcParams["svg.hashsalt"] = "eiqa"
    return plt.subplots(figsize=(width, height))


def write_eval_report(report: EvalReport, path: str | Path) -> None:
    lines = ["srcc\tplcc\tkrcc\tn", f"{report.srcc:.6f}\t{report.plcc:.6f}\t{report.krcc:.6f}\t{report.n}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_report(path: str | Path) -> EvalReport:
    lines = Path(path).read_text().splitlines()
    vals = lines[1].split("\t")
    return EvalReport(srcc=float(vals[0]), plcc=float(vals[1]), krcc=float(vals[2]), n=int(vals[3]))


def write_predictions(records, predictions: np.ndarray, indices, path: str | Path) -> None:
    """Per-record predictions table used by the figure rendering."""
    lines = ["index\tscene_id\talgo_id\tmos\tprediction"]
    for idx, pred in zip(indices, predictions):
        r = records[idx]
        lines.append(f"{idx}\t{r.scene_id}\t{r.algo_id}\t{r.mos:.4f}\t{pred:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path: str | Path) -> dict[str, np.ndarray]:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines()[1:] if line.strip()]
    return {
        "index": np.array([int(r[0]) for r in rows]),
        "scene_id": np.array([int(r[1]) for r in rows]),
        "algo_id": np.array([int(r[2]) for r in rows]),
        "mos": np.array([float(r[3]) for r in rows]),
        "prediction": np.array([float(r[4]) for r in rows]),
    }


def write_variant_table(rows: dict[str, EvalReport], path: str | Path, title: str) -> None:
    """Ablation-style table: one row per variant, SRCC/PLCC/KRCC columns."""
    lines = [f"# {title}", "method\tsrcc\tplcc\tkrcc"]
    for name, rep in rows.items():
        lines.append(f"{name}\t{rep.srcc:.4f}\t{rep.plcc:.4f}\t{rep.krcc:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_drop_table(rows: dict[str, tuple[EvalReport, EvalReport]], path: str | Path) -> None:
    """Cross-algorithm generalization table: Standard, Unseen and Drop per metric."""
    header = (
        "method\tsrcc_standard\tsrcc_unseen\tsrcc_drop"
        "\tplcc_standard\tplcc_unseen\tplcc_drop"
        "\tkrcc_standard\tkrcc_unseen\tkrcc_drop"
    )
    lines = [header]
    for name, (std, unseen) in rows.items():
        lines.append(
            f"{name}"
            f"\t{std.srcc:.4f}\t{unseen.srcc:.4f}\t{std.srcc - unseen.srcc:.4f}"
            f"\t{std.plcc:.4f}\t{unseen.plcc:.4f}\t{std.plcc - unseen.plcc:.4f}"
            f"\t{std.krcc:.4f}\t{unseen.krcc:.4f}\t{std.krcc - unseen.krcc:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def render_scatter(mos: np.ndarray, predictions: np.ndarray, path: str | Path) -> None:
    """Predicted score vs ground-truth scatter with the identity line."""
    fig, ax = _new_figure()
    ax.scatter(mos, predictions, s=12, alpha=0.7, edgecolors="none")
    lo = float(min(mos.min(), predictions.min()))
    hi = float(max(mos.max(), predictions.max()))
    ax.plot([lo, hi], [lo, hi], color="gray", linewidth=1, linestyle="--")
    ax.set_xlabel("ground-truth score")
    ax.set_ylabel("predicted score")
    fig.tight_layout()
    fig.savefig(path, **_SVG_KWARGS)
    plt.close(fig)


def render_algo_errors(algo_ids: np.ndarray, mos: np.ndarray, predictions: np.ndarray, path: str | Path) -> None:
    """Mean absolute prediction error per enhancement algorithm with std whiskers."""
    algos = sorted(set(int(a) for a in algo_ids))
    errors = np.abs(predictions - mos)
    means = [float(errors[algo_ids == a].mean()) for a in algos]
    stds = [float(errors[algo_ids == a].std()) for a in algos]
    fig, ax = _new_figure(width=6.0)
    ax.bar([str(a) for a in algos], means, yerr=stds, capsize=3, color="#4878b0")
    ax.set_xlabel("enhancement algorithm")
    ax.set_ylabel("mean |prediction - score|")
    fig.tight_layout()
    fig.savefig(path, **_SVG_KWARGS)
    plt.close(fig)
