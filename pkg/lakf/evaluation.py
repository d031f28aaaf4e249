"""Recall at IoU thresholds, average recall, per-category reports and the mismatch grid."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field

from lakf.dataio import SemiSimTrajectory
from lakf.errors import DomainError, ModeMismatchError
from lakf.geometry import StateMode, as_mode, boxes_from_array, boxes_to_array, paired_iou
from lakf.kalman_core import run_filter
from lakf.learned_filters import GainNetwork, Variant, collate, filter_batch
from lakf.linear_models import LinearModelConfig
from lakf.logger import get_logger

logger = get_logger(__name__)

THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))

View = Literal["posterior", "prior"]


def _threshold_label(beta: float) -> str:
    return f"{int(round(beta * 100)):02d}"


def recall_at(ious: Sequence[float], beta: float) -> float:
    """
    Fraction of IoUs at or above the threshold.

    Raises:
        DomainError: If ious is empty or holds values outside [0, 1]
    """
    values = np.asarray(ious, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DomainError("recall needs at least one IoU")
    if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
        raise DomainError("IoU values must lie in [0, 1]")
    return float(np.count_nonzero(values >= beta) / values.size)


def average_recall(ious: Sequence[float]) -> float:
    """Mean of recall_at over the ten thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([recall_at(ious, beta) for beta in THRESHOLDS]))


class EvalConfig(BaseModel):
    """Options of evaluate."""

    model_config = ConfigDict(extra="forbid")

    views: List[View] = Field(default_factory=lambda: ["posterior", "prior"],
                              description="Which box estimates to score")
    batch_size: int = Field(default=64, ge=1, description="Trajectories per network forward pass")
    allow_mode_mismatch: bool = Field(default=False, description="Skip the model/data mode check")


@dataclass(eq=False)
class FilterModel:
    """Something evaluate can run: the KF, a gain network, or raw measurements."""

    label: str
    variant: Optional[Variant]
    mode: StateMode
    linear: Optional[LinearModelConfig] = None
    net: Optional[GainNetwork] = None

    @property
    def is_observation(self) -> bool:
        return self.variant is None


def kf_model(alpha_p: float = 0.05, alpha_v: float = 0.00625, mode=StateMode.XYAH,
             label: Optional[str] = None) -> FilterModel:
    cfg = LinearModelConfig(mode=mode, alpha_p=alpha_p, alpha_v=alpha_v)
    return FilterModel(label=label or f"KF(alpha_p={alpha_p:g})", variant=Variant.KF, mode=cfg.mode, linear=cfg)


def network_model(net: GainNetwork, label: Optional[str] = None) -> FilterModel:
    return FilterModel(label=label or net.variant.value, variant=net.variant, mode=net.config.mode,
                       linear=net.config.linear_config(), net=net)


def observation_model(mode=StateMode.XYAH) -> FilterModel:
    return FilterModel(label="Observation", variant=None, mode=as_mode(mode))


@dataclass
class TrajectoryIoUs:
    """Per-frame IoUs of one trajectory, initialization frame excluded."""

    dataset: str
    category: str
    alpha_p: float
    posterior: np.ndarray
    prior: Optional[np.ndarray] = None


def _kf_ious(model: FilterModel, traj: SemiSimTrajectory) -> Tuple[np.ndarray, np.ndarray]:
    gt, meas = traj.arrays(model.mode)
    steps = run_filter(boxes_from_array(meas, model.mode), model.linear)
    updated = boxes_to_array([step.updated for step in steps[1:]])
    predicted = boxes_to_array([step.predicted for step in steps[1:]])
    return paired_iou(updated, gt[1:], model.mode), paired_iou(predicted, gt[1:], model.mode)


def collect_ious(model: FilterModel, trajs: Sequence[SemiSimTrajectory],
                 batch_size: int = 64) -> List[TrajectoryIoUs]:
    """Runs the model over every trajectory and scores each frame after the first."""
    results: List[TrajectoryIoUs] = []
    if model.is_observation:
        for traj in trajs:
            gt, meas = traj.arrays(model.mode)
            results.append(TrajectoryIoUs(traj.base.dataset, traj.base.category, traj.alpha_p,
                                          paired_iou(meas[1:], gt[1:], model.mode)))
        return results

    if model.variant is Variant.KF:
        for traj in trajs:
            post, prior = _kf_ious(model, traj)
            results.append(TrajectoryIoUs(traj.base.dataset, traj.base.category, traj.alpha_p, post, prior))
        return results

    net = model.net
    net.eval()
    with torch.no_grad():
        for start in range(0, len(trajs), batch_size):
            chunk = trajs[start:start + batch_size]
            batch = collate(chunk, model.mode, normalize=net.config.normalize_inputs)
            out = filter_batch(net, batch.meas, batch.lengths, scale=batch.scale)
            post = out.posterior.numpy()
            prior = out.prior.numpy()
            gt = batch.gt.numpy()
            for i, traj in enumerate(chunk):
                n = batch.lengths[i]
                results.append(TrajectoryIoUs(
                    traj.base.dataset, traj.base.category, traj.alpha_p,
                    paired_iou(post[i, 1:n], gt[i, 1:n], model.mode),
                    paired_iou(prior[i, 1:n], gt[i, 1:n], model.mode),
                ))
    return results


def _report_row(key: Dict, ious: np.ndarray) -> Dict:
    row = dict(key)
    row["frames"] = int(ious.size)
    recalls = []
    for beta in THRESHOLDS:
        label = _threshold_label(beta)
        tp = int(np.count_nonzero(ious >= beta))
        recall = recall_at(ious, beta)
        recalls.append(recall)
        row[f"re_{label}"] = recall
        row[f"tp_{label}"] = tp
        row[f"fn_{label}"] = int(ious.size) - tp
    row["ar"] = float(np.mean(recalls))
    row["iou_mean"] = float(np.mean(ious))
    row["iou_var"] = float(np.var(ious))
    return row


@dataclass
class EvalReport:
    """
    One row per (dataset, category, alpha_p, model, mode, view).

    Columns ``re_50`` ... ``re_95`` hold the recalls, ``ar`` their mean and
    ``tp_XX`` / ``fn_XX`` the counts behind each recall. ``iou_mean`` and
    ``iou_var`` are the mean and population variance of the pooled per-frame IoUs.
    """

    rows: pd.DataFrame = field(default_factory=pd.DataFrame)

    KEYS = ["dataset", "category", "alpha_p", "model", "mode", "view"]

    @classmethod
    def concat(cls, reports: Iterable["EvalReport"]) -> "EvalReport":
        frames = [r.rows for r in reports if not r.rows.empty]
        return cls(pd.concat(frames, ignore_index=True) if frames else pd.DataFrame())

    def summary(self) -> pd.DataFrame:
        """mRe_50, mRe_75 and mAR as unweighted means over (dataset, category) rows."""
        if self.rows.empty:
            return pd.DataFrame(columns=["model", "mode", "alpha_p", "view", "mre_50", "mre_75", "mar"])
        grouped = self.rows.groupby(["model", "mode", "alpha_p", "view"], sort=True)
        out = grouped.agg(mre_50=("re_50", "mean"), mre_75=("re_75", "mean"), mar=("ar", "mean"))
        return out.reset_index()

    def mar(self, model: Optional[str] = None, view: str = "posterior") -> float:
        if self.rows.empty:
            raise DomainError("report is empty")
        rows = self.rows[self.rows["view"] == view]
        if model is not None:
            rows = rows[rows["model"] == model]
        if rows.empty:
            raise DomainError(f"no report rows for model={model!r}, view={view!r}")
        return float(rows["ar"].mean())

    def curves(self) -> pd.DataFrame:
        """Long table (keys, threshold, recall) for plotting recall against IoU threshold."""
        records = []
        for _, row in self.rows.iterrows():
            for beta in THRESHOLDS:
                records.append({**{k: row[k] for k in self.KEYS}, "threshold": beta,
                                "recall": row[f"re_{_threshold_label(beta)}"]})
        return pd.DataFrame(records)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.rows.to_csv(path, index=False)
        return path


def evaluate(model: FilterModel, trajs: Sequence[SemiSimTrajectory],
             cfg: Optional[EvalConfig] = None, data_mode=None) -> EvalReport:
    """
    Scores a model on test trajectories per (dataset, category, alpha_p).

    Args:
        model: KF, gain network or observation pseudo-model
        trajs: Test trajectories
        cfg: Evaluation options
        data_mode: Mode the caller expects to evaluate in; refused when it
            differs from the model's mode unless cfg.allow_mode_mismatch

    Returns:
        EvalReport

    Raises:
        ModeMismatchError: On a model/data mode mismatch
    """
    cfg = cfg or EvalConfig()
    if data_mode is not None and as_mode(data_mode) is not model.mode and not cfg.allow_mode_mismatch:
        raise ModeMismatchError(f"model {model.label} runs in {model.mode.value}, evaluation requested "
                                f"{as_mode(data_mode).value}")
    results = collect_ious(model, list(trajs), cfg.batch_size)

    pooled: Dict[Tuple[str, str, float], Dict[str, List[np.ndarray]]] = {}
    for res in results:
        views = pooled.setdefault((res.dataset, res.category, res.alpha_p), {"posterior": [], "prior": []})
        views["posterior"].append(res.posterior)
        if res.prior is not None:
            views["prior"].append(res.prior)

    rows = []
    for (dataset, category, alpha_p), views in sorted(pooled.items()):
        for view in cfg.views:
            if not views[view]:
                continue
            ious = np.concatenate(views[view])
            if ious.size == 0:
                continue
            key = {"dataset": dataset, "category": category, "alpha_p": alpha_p,
                   "model": model.label, "mode": model.mode.value, "view": view}
            rows.append(_report_row(key, ious))
    report = EvalReport(pd.DataFrame(rows))
    if rows:
        logger.info(f"Evaluated {model.label} on {len(results)} trajectories: mAR={report.mar(view=cfg.views[0]):.4f}")
    return report


def mismatch_grid(models: Mapping[str, Optional[FilterModel]],
                  tests: Mapping[float, Optional[Sequence[SemiSimTrajectory]]],
                  cfg: Optional[EvalConfig] = None) -> pd.DataFrame:
    """
    Cross-product of mAR: rows are model labels, columns are test noise levels.

    Missing models or empty test splits leave NaN cells.
    """
    cfg = cfg or EvalConfig(views=["posterior"])
    grid = pd.DataFrame(index=list(models), columns=sorted(tests), dtype=float)
    grid.index.name = "model"
    grid.columns.name = "test_alpha_p"
    for label, model in models.items():
        for alpha, trajs in tests.items():
            if model is None or not trajs:
                continue
            report = evaluate(model, trajs, cfg)
            if report.rows.empty:
                continue
            grid.loc[label, alpha] = report.mar(view="posterior")
    return grid
