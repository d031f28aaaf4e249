"""Figures from the CSV reports."""

from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from lakf.errors import FormatError  # noqa: E402
from lakf.evaluation import THRESHOLDS, EvalReport  # noqa: E402
from lakf.logger import get_logger  # noqa: E402

logger = get_logger(__name__)

PathLike = Union[str, Path]


def _read_csv(path: PathLike, required) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise FormatError(f"{path} lacks columns {missing}", field=missing[0])
    return frame


def _save(fig, out_path: PathLike) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    logger.info(f"Figure saved to {out_path}")
    return out_path


def plot_recall_curves(report_csv: PathLike, out_path: PathLike) -> Path:
    """Recall against IoU threshold, one line per (model, mode, view, category)."""
    frame = _read_csv(report_csv, EvalReport.KEYS + ["re_50"])
    curves = EvalReport(frame).curves()
    fig, ax = plt.subplots(figsize=(7, 5))
    for key, group in curves.groupby(["model", "mode", "view", "category"], sort=True):
        model, mode, view, category = key
        group = group.groupby("threshold", sort=True)["recall"].mean()
        ax.plot(group.index, group.values, marker="o", label=f"{model} {mode} {view} / {category}")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("Recall")
    ax.set_xticks(list(THRESHOLDS))
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, out_path)


def plot_mismatch_grid(grid_csv: PathLike, out_path: PathLike) -> Path:
    """Test noise level on the x-axis, mAR on the y-axis, one line per model."""
    frame = pd.read_csv(grid_csv, index_col=0)
    if frame.empty:
        raise FormatError(f"{grid_csv} holds no grid cells")
    alphas = [float(c) for c in frame.columns]
    fig, ax = plt.subplots(figsize=(7, 5))
    for label, row in frame.iterrows():
        ax.plot(alphas, row.values.astype(float), marker="o", label=str(label))
    ax.set_xlabel("test alpha_p")
    ax.set_ylabel("mAR")
    ax.set_xticks(alphas)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, out_path)


def plot_aiou(aiou_csv: PathLike, out_path: PathLike) -> Path:
    """Bar chart of adjacent-frame AIoU per (dataset, category)."""
    frame = _read_csv(aiou_csv, ["dataset", "category", "aiou"])
    labels = [f"{d}\n{c}" for d, c in zip(frame["dataset"], frame["category"])]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), frame["aiou"].values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize="small")
    ax.set_ylabel("AIoU")
    ax.set_ylim(0.0, 1.0)
    return _save(fig, out_path)
