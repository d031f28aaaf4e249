"""Model-based Kalman filter predict/update recursion for bounding boxes."""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from lakf.errors import DomainError, NumericError
from lakf.geometry import BBox, StateMode, convert_mode
from lakf.linear_models import (
    ASPECT_POS_STD,
    ASPECT_VEL_STD,
    LinearModelConfig,
    build_measurement,
    build_measurement_noise,
    build_process_noise,
    build_transition,
)
from lakf.logger import get_logger

logger = get_logger(__name__)

MIN_SIZE = 1e-4
# State indices of p3 (aspect or width) and h.
SIZE_INDICES = (4, 6)


@dataclass(frozen=True)
class FilterState:
    """Posterior or prior mean and covariance at frame ``t``."""

    x: np.ndarray
    P: np.ndarray
    t: int = 1

    def box(self, mode: StateMode) -> BBox:
        """Measurement-space box ``H x`` of this state."""
        return BBox(float(self.x[0]), float(self.x[2]), float(self.x[4]), float(self.x[6]), mode)


@dataclass(frozen=True)
class UpdateDiagnostics:
    """Intermediate quantities of one update."""

    y_pred: np.ndarray
    S: np.ndarray
    K: np.ndarray
    innovation: np.ndarray


@dataclass(frozen=True)
class FilterStep:
    """One output of run_filter; ``predicted`` is None on the initial frame."""

    predicted: Optional[BBox]
    updated: BBox


def predict_mean(x, transition):
    """
    Shared mean prediction ``x_{t|t-1} = F x_{t-1|t-1}``.

    Works for numpy arrays and torch tensors, single states ``(8,)`` and
    batches ``(B, 8)``.
    """
    if x.ndim == 1:
        return transition @ x
    return x @ transition.T


def _check_finite(values: np.ndarray, what: str, step: Optional[int]) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite {what}", step=step)


def _clamp_sizes(x: np.ndarray) -> np.ndarray:
    for index in SIZE_INDICES:
        if x[index] <= 0:
            x[index] = MIN_SIZE
    return x


def initial_std(cfg: LinearModelConfig, x: np.ndarray) -> np.ndarray:
    """Initial standard deviations: ``2 alpha_p`` and ``10 alpha_v`` scaled like Q."""
    h = x[6]
    ap, av = 2.0 * cfg.alpha_p, 10.0 * cfg.alpha_v
    if cfg.mode is StateMode.XYAH:
        return np.array([ap * h, av * h, ap * h, av * h, ASPECT_POS_STD, ASPECT_VEL_STD, ap * h, av * h])
    w = x[4]
    return np.array([ap, av, ap, av, ap, av, ap, av]) * np.array([w, h, w, h, w, h, w, h])


def init_from_measurement(meas: BBox, cfg: LinearModelConfig) -> FilterState:
    """
    Starts a track from its first measurement.

    Positions come from the measurement, velocities are zero and ``P`` is
    diagonal with the doubled position / tenfold velocity factors.

    Args:
        meas: First measurement (converted to cfg.mode if needed)
        cfg: Linear model configuration

    Returns:
        Initial filter state at t=1
    """
    box = convert_mode(meas, cfg.mode)
    x = np.zeros(8)
    x[::2] = box.to_array()
    P = np.diag(initial_std(cfg, x) ** 2)
    return FilterState(x=x, P=P, t=1)


def predict(state: FilterState, cfg: LinearModelConfig) -> FilterState:
    """
    Prediction stage: ``x <- F x``, ``P <- F P F^T + Q``.

    Q is evaluated at the pre-prediction state.

    Raises:
        NumericError: If the predicted state is not finite
    """
    F = build_transition(cfg)
    Q = build_process_noise(cfg, state.x)
    x = _clamp_sizes(predict_mean(state.x, F))
    P = F @ state.P @ F.T + Q
    P = 0.5 * (P + P.T)
    _check_finite(x, "predicted mean", state.t + 1)
    _check_finite(P, "predicted covariance", state.t + 1)
    return FilterState(x=x, P=P, t=state.t + 1)


def coast(state: FilterState, cfg: LinearModelConfig) -> FilterState:
    """Predict-only step for frames without an associated measurement."""
    return predict(state, cfg)


def update(state: FilterState, meas: BBox, cfg: LinearModelConfig):
    """
    Update stage with the innovation covariance solved by Cholesky.

    Args:
        state: Post-predict state
        meas: Measurement in cfg.mode
        cfg: Linear model configuration

    Returns:
        Tuple of (posterior FilterState, UpdateDiagnostics)

    Raises:
        DomainError: If the measurement mode differs from cfg.mode
        NumericError: If S is not positive definite or the result is not finite
    """
    if meas.mode is not cfg.mode:
        raise DomainError(f"measurement mode {meas.mode.value} does not match filter mode {cfg.mode.value}")
    H = build_measurement()
    R = build_measurement_noise(cfg, state.x)
    y = meas.to_array()
    y_pred = H @ state.x
    S = H @ state.P @ H.T + R
    try:
        chol = scipy.linalg.cho_factor(S, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"innovation covariance not positive definite: {exc}", step=state.t) from exc
    # K = P H^T S^-1, solved as S K^T = H P
    K = scipy.linalg.cho_solve(chol, H @ state.P, check_finite=False).T
    innovation = y - y_pred
    x = _clamp_sizes(state.x + K @ innovation)
    P = (np.eye(8) - K @ H) @ state.P
    P = 0.5 * (P + P.T)
    _check_finite(x, "posterior mean", state.t)
    _check_finite(P, "posterior covariance", state.t)
    diagnostics = UpdateDiagnostics(y_pred=y_pred, S=S, K=K, innovation=innovation)
    return replace(state, x=x, P=P), diagnostics


def joseph_covariance(P: np.ndarray, K: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Joseph-form posterior ``(I - KH) P (I - KH)^T + K R K^T``."""
    A = np.eye(P.shape[0]) - K @ H
    return A @ P @ A.T + K @ R @ K.T


def run_filter(meas_seq: Sequence[BBox], cfg: LinearModelConfig) -> List[FilterStep]:
    """
    Filters a measurement sequence with the model-based KF.

    Args:
        meas_seq: Non-empty measurement sequence in one state mode
        cfg: Linear model configuration

    Returns:
        One FilterStep per frame; the first has no prediction

    Raises:
        DomainError: On an empty sequence or mixed modes
    """
    if not meas_seq:
        raise DomainError("run_filter needs at least one measurement")
    modes = {box.mode for box in meas_seq}
    if len(modes) != 1:
        raise DomainError(f"measurement sequence mixes state modes: {sorted(m.value for m in modes)}")
    meas_seq = [convert_mode(box, cfg.mode) for box in meas_seq]

    state = init_from_measurement(meas_seq[0], cfg)
    steps = [FilterStep(predicted=None, updated=state.box(cfg.mode))]
    for meas in meas_seq[1:]:
        state = predict(state, cfg)
        predicted = state.box(cfg.mode)
        state, _ = update(state, meas, cfg)
        steps.append(FilterStep(predicted=predicted, updated=state.box(cfg.mode)))
    logger.debug(f"Filtered {len(steps)} frames in {cfg.mode.value}")
    return steps
