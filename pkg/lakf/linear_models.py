"""Constant-velocity transition, linear measurement and box-size-scaled noise matrices.

The 8-dim state is interleaved as ``[cx, vcx, cy, vcy, p3, vp3, h, vh]`` where
``p3`` is the aspect ratio (XYAH) or the width (XYWH).
"""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from lakf.errors import DomainError
from lakf.geometry import StateMode, as_mode

STATE_DIM = 8
MEAS_DIM = 4

# Fixed aspect-channel constants of the XYAH parameterization.
ASPECT_POS_STD = 0.01
ASPECT_VEL_STD = 0.00001
ASPECT_MEAS_STD = 0.1


class LinearModelConfig(BaseModel):
    """State mode, frame interval and noise factors of the CV model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: StateMode = Field(default=StateMode.XYAH, description="State mode")
    dt: float = Field(default=1.0, description="Frame interval in frames")
    alpha_p: float = Field(default=0.05, description="Position noise factor")
    alpha_v: float = Field(default=0.00625, description="Velocity noise factor")

    @field_validator("mode", mode="before")
    @classmethod
    def validate_mode(cls, v):
        return as_mode(v)

    @field_validator("dt", "alpha_p", "alpha_v")
    @classmethod
    def validate_positive(cls, v, info):
        if not v > 0:
            raise ValueError(f"{info.field_name} must be positive")
        return v


def build_transition(cfg: LinearModelConfig) -> np.ndarray:
    """Block-diagonal CV transition with four ``[[1, dt], [0, 1]]`` blocks."""
    block = np.array([[1.0, cfg.dt], [0.0, 1.0]])
    return np.kron(np.eye(MEAS_DIM), block)


def build_measurement() -> np.ndarray:
    """Selects ``[cx, cy, p3, h]`` from the 8-dim state."""
    return np.kron(np.eye(MEAS_DIM), np.array([[1.0, 0.0]]))


def _size_terms(mode: StateMode, state: np.ndarray):
    state = np.asarray(state, dtype=np.float64)
    h = state[..., 6]
    if np.any(h <= 0):
        raise DomainError(f"state height must be positive, got {h}")
    if mode is StateMode.XYAH:
        return None, h
    w = state[..., 4]
    if np.any(w <= 0):
        raise DomainError(f"state width must be positive, got {w}")
    return w, h


def process_noise_std(cfg: LinearModelConfig, state: np.ndarray) -> np.ndarray:
    """Returns ``q ∘ q_d`` for the given state."""
    w, h = _size_terms(cfg.mode, state)
    ap, av = cfg.alpha_p, cfg.alpha_v
    if cfg.mode is StateMode.XYAH:
        q = np.array([ap, av, ap, av, ASPECT_POS_STD, ASPECT_VEL_STD, ap, av])
        q_d = np.array([h, h, h, h, 1.0, 1.0, h, h])
    else:
        q = np.array([ap, av, ap, av, ap, av, ap, av])
        q_d = np.array([w, h, w, h, w, h, w, h])
    return q * q_d


def measurement_noise_std(mode: StateMode, alpha_p: float, boxes: np.ndarray) -> np.ndarray:
    """
    Returns ``r ∘ r_d`` for one box or an ``(T, 4)`` array of boxes.

    Args:
        mode: State mode of the boxes
        alpha_p: Position noise factor
        boxes: Box(es) as ``[cx, cy, p3, h]``
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    h = boxes[..., 3]
    if np.any(h <= 0):
        raise DomainError(f"box height must be positive, got {h}")
    if as_mode(mode) is StateMode.XYAH:
        std = np.stack([alpha_p * h, alpha_p * h, np.full_like(h, ASPECT_MEAS_STD), alpha_p * h], axis=-1)
    else:
        w = boxes[..., 2]
        if np.any(w <= 0):
            raise DomainError(f"box width must be positive, got {w}")
        std = np.stack([alpha_p * w, alpha_p * h, alpha_p * w, alpha_p * h], axis=-1)
    return std


def build_process_noise(cfg: LinearModelConfig, state: np.ndarray) -> np.ndarray:
    """
    Process noise ``Q = diag[(q ∘ q_d)^2]`` evaluated at the given state.

    Raises:
        DomainError: If the state height (or width in XYWH mode) is not positive
    """
    return np.diag(process_noise_std(cfg, state) ** 2)


def build_measurement_noise(cfg: LinearModelConfig, state: np.ndarray) -> np.ndarray:
    """
    Measurement noise ``R = diag[(r ∘ r_d)^2]`` evaluated at the given state.

    Raises:
        DomainError: If the state height (or width in XYWH mode) is not positive
    """
    state = np.asarray(state, dtype=np.float64)
    _size_terms(cfg.mode, state)
    return np.diag(measurement_noise_std(cfg.mode, cfg.alpha_p, state[::2]) ** 2)
