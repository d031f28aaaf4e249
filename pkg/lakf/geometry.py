"""Bounding-box representations, mode conversion, IoU and adjacent-frame AIoU.

Boxes are stored as ``(cx, cy, p3, h)`` where ``p3`` is the width in XYWH mode
and the aspect ratio ``w / h`` in XYAH mode. Overlap is always evaluated on the
pixel extent, so XYAH boxes are converted to corners first.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence, Union

import numpy as np

from lakf.errors import DomainError


class StateMode(str, Enum):
    """Bounding-box state parameterization."""

    XYAH = "XYAH"
    XYWH = "XYWH"


ModeLike = Union[StateMode, str]


def as_mode(mode: ModeLike) -> StateMode:
    """Coerces a string such as ``"xyah"`` into a StateMode."""
    try:
        return mode if isinstance(mode, StateMode) else StateMode(str(mode).upper())
    except ValueError:
        raise DomainError(f"unknown state mode: {mode!r}") from None


@dataclass(frozen=True)
class BBox:
    """Immutable bounding box in one of the two state modes."""

    cx: float
    cy: float
    p3: float
    h: float
    mode: StateMode = StateMode.XYAH

    def __post_init__(self):
        object.__setattr__(self, "mode", as_mode(self.mode))
        values = (self.cx, self.cy, self.p3, self.h)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"non-finite box: {values}")
        if self.h <= 0:
            raise DomainError(f"box height must be positive, got {self.h}")
        if self.p3 <= 0:
            name = "aspect ratio" if self.mode is StateMode.XYAH else "width"
            raise DomainError(f"box {name} must be positive, got {self.p3}")

    @classmethod
    def from_array(cls, values: Sequence[float], mode: ModeLike = StateMode.XYAH) -> "BBox":
        cx, cy, p3, h = (float(v) for v in values)
        return cls(cx, cy, p3, h, as_mode(mode))

    @classmethod
    def from_tlwh(cls, left: float, top: float, w: float, h: float,
                  mode: ModeLike = StateMode.XYAH) -> "BBox":
        """Builds a box from MOTChallenge top-left/width/height form."""
        if h <= 0 or w <= 0:
            raise DomainError(f"box size must be positive, got w={w}, h={h}")
        box = cls(left + w / 2.0, top + h / 2.0, w, h, StateMode.XYWH)
        return convert_mode(box, mode)

    @property
    def width(self) -> float:
        return self.p3 * self.h if self.mode is StateMode.XYAH else self.p3

    @property
    def aspect(self) -> float:
        return self.p3 if self.mode is StateMode.XYAH else self.p3 / self.h

    @property
    def area(self) -> float:
        return self.width * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.p3, self.h], dtype=np.float64)

    def tlwh(self) -> np.ndarray:
        """Returns ``[left, top, w, h]``."""
        w = self.width
        return np.array([self.cx - w / 2.0, self.cy - self.h / 2.0, w, self.h])

    def tlbr(self) -> np.ndarray:
        """Returns corner form ``[x1, y1, x2, y2]``."""
        w = self.width
        return np.array([self.cx - w / 2.0, self.cy - self.h / 2.0,
                         self.cx + w / 2.0, self.cy + self.h / 2.0])


def convert_mode(box: BBox, target: ModeLike) -> BBox:
    """
    Converts a box to the target state mode.

    The only relation between the modes is ``a = w / h``; center and height
    are shared, so the corner coordinates are unchanged.

    Args:
        box: Valid box in either mode
        target: Desired state mode

    Returns:
        Box in the target mode

    Raises:
        DomainError: If the box has non-positive size
    """
    target = as_mode(target)
    if box.h <= 0 or box.p3 <= 0:
        raise DomainError(f"cannot convert degenerate box {box}")
    if box.mode is target:
        return box
    if target is StateMode.XYAH:
        return BBox(box.cx, box.cy, box.p3 / box.h, box.h, StateMode.XYAH)
    return BBox(box.cx, box.cy, box.p3 * box.h, box.h, StateMode.XYWH)


def iou(est: BBox, gt: BBox) -> float:
    """
    Intersection-over-union of two boxes on their pixel extent.

    Args:
        est: Estimated box
        gt: Ground-truth box

    Returns:
        IoU in [0, 1]
    """
    a = est.tlbr()
    b = gt.tlbr()
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = est.area + gt.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def to_tlbr(boxes: np.ndarray, mode: ModeLike) -> np.ndarray:
    """Converts an ``(..., 4)`` array of state-mode boxes to corner form."""
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] * boxes[..., 3] if as_mode(mode) is StateMode.XYAH else boxes[..., 2]
    half_w = w / 2.0
    half_h = boxes[..., 3] / 2.0
    return np.stack([boxes[..., 0] - half_w, boxes[..., 1] - half_h,
                     boxes[..., 0] + half_w, boxes[..., 1] + half_h], axis=-1)


def convert_array(boxes: np.ndarray, source: ModeLike, target: ModeLike) -> np.ndarray:
    """Array counterpart of convert_mode for ``(..., 4)`` box arrays."""
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    source, target = as_mode(source), as_mode(target)
    if source is target:
        return boxes
    if source is StateMode.XYAH:
        boxes[..., 2] = boxes[..., 2] * boxes[..., 3]
    else:
        boxes[..., 2] = boxes[..., 2] / boxes[..., 3]
    return boxes


def paired_iou(est: np.ndarray, gt: np.ndarray, mode: ModeLike) -> np.ndarray:
    """
    Row-wise IoU between two equally shaped ``(T, 4)`` box arrays.

    Raises:
        DomainError: On shape mismatch or non-positive sizes
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.shape[-1] != 4:
        raise DomainError(f"shape mismatch: {est.shape} vs {gt.shape}")
    if np.any(est[..., 2:] <= 0) or np.any(gt[..., 2:] <= 0):
        raise DomainError("boxes must have positive size")
    a = to_tlbr(est, mode)
    b = to_tlbr(gt, mode)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)


def iou_matrix(atlbrs: np.ndarray, btlbrs: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two sets of corner-form boxes, shape ``(N, M)``.

    Raises:
        DomainError: If any box has zero or negative extent
    """
    atlbrs = np.asarray(atlbrs, dtype=np.float64).reshape(-1, 4)
    btlbrs = np.asarray(btlbrs, dtype=np.float64).reshape(-1, 4)
    ious = np.zeros((len(atlbrs), len(btlbrs)), dtype=np.float64)
    if ious.size == 0:
        return ious
    for boxes in (atlbrs, btlbrs):
        if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
            raise DomainError("boxes must have positive size")
    a = atlbrs[:, None, :]
    b = btlbrs[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return np.clip(inter / (area_a + area_b - inter), 0.0, 1.0)


def aiou(trajectories: Iterable[Sequence[BBox]]) -> float:
    """
    Average IoU of every object's boxes on adjacent frames.

    Ragged sequence lengths are pooled: the sum of all adjacent-pair IoUs is
    divided by the total number of pairs, which reduces to the usual
    ``1 / (N (T - 1))`` weighting when all lengths are equal.

    Args:
        trajectories: Per-object box sequences on consecutive frames

    Returns:
        AIoU in [0, 1]

    Raises:
        DomainError: If a sequence is shorter than two frames or none is given
    """
    total = 0.0
    pairs = 0
    for index, seq in enumerate(trajectories):
        seq = list(seq)
        if len(seq) < 2:
            raise DomainError(f"sequence {index} has {len(seq)} boxes, need at least 2")
        for prev, curr in zip(seq[:-1], seq[1:]):
            total += iou(prev, curr)
        pairs += len(seq) - 1
    if pairs == 0:
        raise DomainError("aiou needs at least one sequence")
    return total / pairs


def boxes_from_array(values: np.ndarray, mode: ModeLike) -> List[BBox]:
    """Wraps every row of a ``(T, 4)`` array as a BBox."""
    mode = as_mode(mode)
    return [BBox.from_array(row, mode) for row in np.asarray(values, dtype=np.float64)]


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stacks boxes into a ``(T, 4)`` array."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([box.to_array() for box in boxes])
