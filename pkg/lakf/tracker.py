"""BYTE-style two-stage association over pluggable motion models."""

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, TextIO, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import linear_sum_assignment

from lakf.dataio import Trajectory
from lakf.errors import DomainError, ModeMismatchError, ParseError
from lakf.geometry import BBox, StateMode, convert_mode, iou_matrix
from lakf.kalman_core import FilterState, init_from_measurement, predict, update
from lakf.learned_filters import (
    GainNetwork,
    GainNetworkState,
    RecursionState,
    coast_recursion,
    input_scale,
    learned_step,
    predict_recursion,
    reset,
)
from lakf.linear_models import LinearModelConfig, build_transition
from lakf.logger import get_logger

logger = get_logger(__name__)


class ByteConfig(BaseModel):
    """Association thresholds; defaults follow the public ByteTrack settings."""

    model_config = ConfigDict(extra="forbid")

    high_thresh: float = Field(default=0.6, ge=0, le=1, description="First-stage / new-track score threshold")
    low_thresh: float = Field(default=0.1, ge=0, le=1, description="Lowest score considered at all")
    match_thresh: float = Field(default=0.8, ge=0, le=1, description="Max 1 - IoU cost in stage 1")
    second_match_thresh: float = Field(default=0.5, ge=0, le=1, description="Max 1 - IoU cost in stage 2")
    max_lost: int = Field(default=30, ge=0, description="Frames a lost track survives")
    min_box_area: float = Field(default=10.0, ge=0, description="Smaller output boxes are not reported")

    @model_validator(mode="after")
    def check_thresholds(self):
        if not self.low_thresh < self.high_thresh:
            raise ValueError("low_thresh must be smaller than high_thresh")
        return self


@dataclass(frozen=True)
class Detection:
    """A detector box in MOTChallenge top-left form with its confidence."""

    tlwh: Tuple[float, float, float, float]
    score: float

    def box(self, mode: StateMode) -> BBox:
        return BBox.from_tlwh(*self.tlwh, mode=mode)

    def tlbr(self) -> np.ndarray:
        left, top, w, h = self.tlwh
        return np.array([left, top, left + w, top + h])


class TrackStatus(str, Enum):
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass(eq=False)
class Track:
    """One tracked identity and its motion state."""

    track_id: int
    motion: Any
    start_frame: int
    last_update: int
    status: TrackStatus = TrackStatus.ACTIVE
    scores: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class TrackedBox:
    """One line of a result file."""

    track_id: int
    tlwh: Tuple[float, float, float, float]
    score: float


# ============================================================================
# Motion models
# ============================================================================

class MotionModel(Protocol):
    """Per-track motion state handling used by ByteTracker."""

    mode: StateMode

    def initiate(self, box: BBox) -> Any: ...

    def predict(self, motion: Any) -> Any: ...

    def update(self, motion: Any, box: BBox) -> Any: ...

    def coast(self, motion: Any) -> Any: ...

    def box(self, motion: Any) -> BBox: ...


class KalmanMotion:
    """Model-based Kalman filter motion."""

    def __init__(self, cfg: Optional[LinearModelConfig] = None):
        self.cfg = cfg or LinearModelConfig()
        self.mode = self.cfg.mode

    def initiate(self, box: BBox) -> FilterState:
        return init_from_measurement(box, self.cfg)

    def predict(self, motion: FilterState) -> FilterState:
        return predict(motion, self.cfg)

    def update(self, motion: FilterState, box: BBox) -> FilterState:
        state, _ = update(motion, convert_mode(box, self.mode), self.cfg)
        return state

    def coast(self, motion: FilterState) -> FilterState:
        return motion

    def box(self, motion: FilterState) -> BBox:
        return motion.box(self.mode)


@dataclass(eq=False)
class LearnedTrackState:
    recursion: RecursionState
    net_state: GainNetworkState


class LearnedMotion:
    """Learned-gain motion; hidden vectors stay frozen while a track coasts."""

    def __init__(self, net: GainNetwork, cfg: Optional[LinearModelConfig] = None,
                 img_size: Optional[Tuple[int, int]] = None):
        self.net = net
        self.cfg = cfg or net.config.linear_config()
        if self.cfg.mode is not net.config.mode:
            raise ModeMismatchError(f"network runs in {net.config.mode.value}, tracker in {self.cfg.mode.value}")
        self.mode = self.cfg.mode
        self.transition = torch.from_numpy(build_transition(self.cfg))
        self.scale = None
        if net.config.normalize_inputs:
            if img_size is None:
                raise DomainError("network normalizes inputs; img_size is required")
            self.scale = input_scale(self.mode, *img_size)
        net.eval()

    @staticmethod
    def _row(box: BBox) -> torch.Tensor:
        return torch.from_numpy(box.to_array()).unsqueeze(0)

    def initiate(self, box: BBox) -> LearnedTrackState:
        box = convert_mode(box, self.mode)
        x0 = torch.from_numpy(init_from_measurement(box, self.cfg).x).unsqueeze(0)
        return LearnedTrackState(RecursionState(x_post=x0, y_prev=self._row(box), t=1, scale=self.scale),
                                 reset(self.net))

    def predict(self, motion: LearnedTrackState) -> LearnedTrackState:
        return LearnedTrackState(predict_recursion(motion.recursion, self.transition), motion.net_state)

    def update(self, motion: LearnedTrackState, box: BBox) -> LearnedTrackState:
        with torch.no_grad():
            recursion, net_state, _ = learned_step(motion.recursion, motion.net_state,
                                                   self._row(convert_mode(box, self.mode)))
        return LearnedTrackState(recursion, net_state)

    def coast(self, motion: LearnedTrackState) -> LearnedTrackState:
        return LearnedTrackState(coast_recursion(motion.recursion), motion.net_state)

    def box(self, motion: LearnedTrackState) -> BBox:
        x = motion.recursion.x_prior if motion.recursion.x_prior is not None else motion.recursion.x_post
        values = (x @ self.net.h_t).detach().reshape(-1).numpy()
        return BBox.from_array(values, self.mode)


# ============================================================================
# Association
# ============================================================================

def linear_assignment(cost: np.ndarray, thresh: float) -> Tuple[List[Tuple[int, int]], List[int], List[int]]:
    """
    Minimum-cost assignment; pairs costing more than thresh are rejected.

    Returns:
        Tuple of (matches as (row, col), unmatched rows, unmatched cols)
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return [], list(range(cost.shape[0])), list(range(cost.shape[1] if cost.ndim == 2 else 0))
    rows, cols = linear_sum_assignment(cost)
    matches = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= thresh]
    matched_rows = {r for r, _ in matches}
    matched_cols = {c for _, c in matches}
    unmatched_rows = [r for r in range(cost.shape[0]) if r not in matched_rows]
    unmatched_cols = [c for c in range(cost.shape[1]) if c not in matched_cols]
    return matches, unmatched_rows, unmatched_cols


def iou_cost(track_boxes: Sequence[BBox], detections: Sequence[Detection]) -> np.ndarray:
    """``1 - IoU`` between predicted track boxes and detections."""
    if not track_boxes or not detections:
        return np.zeros((len(track_boxes), len(detections)))
    a = np.stack([box.tlbr() for box in track_boxes])
    b = np.stack([det.tlbr() for det in detections])
    return 1.0 - iou_matrix(a, b)


@dataclass
class Association:
    matches: List[Tuple[Track, Detection]]
    unmatched_tracks: List[Track]
    unmatched_detections: List[Detection]


def byte_associate(tracks: Sequence[Track], detections: Sequence[Detection], cfg: ByteConfig,
                   motion: MotionModel) -> Association:
    """
    Two-stage association.

    Stage 1 matches high-score detections against every track. Stage 2 matches
    the remaining low-score detections against tracks still active that
    stage 1 left unmatched. Detections below low_thresh are ignored.

    Args:
        tracks: Post-predict tracks (active and lost)
        detections: Detections of the current frame
        cfg: Thresholds
        motion: Motion model providing the predicted boxes

    Returns:
        Association
    """
    high = [d for d in detections if d.score >= cfg.high_thresh]
    low = [d for d in detections if cfg.low_thresh <= d.score < cfg.high_thresh]

    pool = list(tracks)
    cost = iou_cost([motion.box(t.motion) for t in pool], high)
    first, u_tracks, u_high = linear_assignment(cost, cfg.match_thresh)
    matches = [(pool[r], high[c]) for r, c in first]

    remaining = [pool[r] for r in u_tracks if pool[r].status is TrackStatus.ACTIVE]
    cost = iou_cost([motion.box(t.motion) for t in remaining], low)
    second, u_remaining, u_low = linear_assignment(cost, cfg.second_match_thresh)
    matches.extend((remaining[r], low[c]) for r, c in second)

    matched_ids = {id(t) for t, _ in matches}
    unmatched_tracks = [t for t in pool if id(t) not in matched_ids]
    unmatched = [high[c] for c in u_high] + [low[c] for c in u_low]
    return Association(matches, unmatched_tracks, unmatched)


class ByteTracker:
    """Keeps the track list of one sequence and advances it frame by frame."""

    def __init__(self, motion: MotionModel, cfg: Optional[ByteConfig] = None):
        self.motion = motion
        self.cfg = cfg or ByteConfig()
        self.tracks: List[Track] = []
        self.frame_id = 0
        self._next_id = 1

    def update(self, detections: Sequence[Detection], frame: Optional[int] = None) -> List[Track]:
        """
        Processes one frame.

        Returns:
            Active tracks updated on this frame
        """
        self.frame_id = self.frame_id + 1 if frame is None else frame
        for track in self.tracks:
            track.motion = self.motion.predict(track.motion)

        assoc = byte_associate(self.tracks, detections, self.cfg, self.motion)
        for track, det in assoc.matches:
            track.motion = self.motion.update(track.motion, det.box(self.motion.mode))
            track.last_update = self.frame_id
            track.status = TrackStatus.ACTIVE
            track.scores.append(det.score)

        for track in assoc.unmatched_tracks:
            track.motion = self.motion.coast(track.motion)
            if self.frame_id - track.last_update > self.cfg.max_lost:
                track.status = TrackStatus.REMOVED
                logger.debug(f"frame {self.frame_id}: track {track.track_id} removed")
            else:
                track.status = TrackStatus.LOST

        for det in assoc.unmatched_detections:
            if det.score < self.cfg.high_thresh:
                continue
            track = Track(track_id=self._next_id, motion=self.motion.initiate(det.box(self.motion.mode)),
                          start_frame=self.frame_id, last_update=self.frame_id, scores=[det.score])
            self._next_id += 1
            self.tracks.append(track)

        self.tracks = [t for t in self.tracks if t.status is not TrackStatus.REMOVED]
        return [t for t in self.tracks if t.status is TrackStatus.ACTIVE and t.last_update == self.frame_id]

    def output(self, tracks: Iterable[Track]) -> List[TrackedBox]:
        boxes = []
        for track in tracks:
            box = self.motion.box(track.motion)
            tlwh = box.tlwh()
            if tlwh[2] * tlwh[3] <= self.cfg.min_box_area:
                continue
            boxes.append(TrackedBox(track.track_id, tuple(float(v) for v in tlwh), track.scores[-1]))
        return sorted(boxes, key=lambda b: b.track_id)


def track_sequence(detections: Mapping[int, Sequence[Detection]], motion: MotionModel,
                   cfg: Optional[ByteConfig] = None, n_frames: Optional[int] = None) -> Dict[int, List[TrackedBox]]:
    """
    Runs ByteTracker over every frame from 1 to the last detection frame.

    Frames without detections are still processed, so tracks coast through them.

    Returns:
        Mapping frame -> reported boxes, only frames with output are present
    """
    last = max(detections, default=0) if n_frames is None else n_frames
    tracker = ByteTracker(motion, cfg)
    results: Dict[int, List[TrackedBox]] = {}
    for frame in range(1, last + 1):
        active = tracker.update(detections.get(frame, []), frame)
        boxes = tracker.output(active)
        if boxes:
            results[frame] = boxes
    logger.info(f"Tracked {last} frames, {tracker._next_id - 1} identities")
    return results


# ============================================================================
# Detection and result files
# ============================================================================

def read_detections(text: Union[str, TextIO]) -> Dict[int, List[Detection]]:
    """
    Parses "frame,id,x,y,w,h,score" CSV content.

    Raises:
        ParseError: On a malformed row, with its line number
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    frames: Dict[int, List[Detection]] = {}
    for line_number, record in enumerate(csv.reader(stream), start=1):
        if not record or not "".join(record).strip():
            continue
        if len(record) < 7:
            raise ParseError(f"expected at least 7 columns, got {len(record)}", line_number)
        try:
            frame = int(float(record[0]))
            left, top, w, h, score = (float(v) for v in record[2:7])
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line_number) from None
        if w <= 0 or h <= 0:
            raise ParseError(f"non-positive box size w={w}, h={h}", line_number)
        frames.setdefault(frame, []).append(Detection((left, top, w, h), score))
    return frames


def oracle_detections(trajs: Iterable[Trajectory], score: float = 1.0) -> Dict[int, List[Detection]]:
    """Ground-truth boxes as detections; frames missing from a trajectory act as occlusions."""
    frames: Dict[int, List[Detection]] = {}
    for traj in trajs:
        for frame, row in zip(traj.frames, traj.gt):
            tlwh = BBox.from_array(row, StateMode.XYAH).tlwh()
            frames.setdefault(int(frame), []).append(Detection(tuple(float(v) for v in tlwh), score))
    return frames


def write_mot_results(results: Mapping[int, Sequence[TrackedBox]], path: Union[str, Path]) -> Path:
    """Writes "frame,id,left,top,w,h,score,-1,-1,-1" lines, frame-major then by track id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for frame in sorted(results):
            for box in sorted(results[frame], key=lambda b: b.track_id):
                left, top, w, h = box.tlwh
                handle.write(f"{frame},{box.track_id},{float(left)!r},{float(top)!r},{float(w)!r},{float(h)!r},{float(box.score)!r},-1,-1,-1\n")
    logger.info(f"Results saved to {path}")
    return path
