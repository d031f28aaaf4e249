"""MOTChallenge ground-truth ingestion, semi-simulated measurements, splits and persistence."""

import configparser
import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from lakf.errors import DomainError, FormatError, ParseError
from lakf.geometry import BBox, StateMode, aiou, as_mode, boxes_from_array, convert_array
from lakf.linear_models import measurement_noise_std
from lakf.logger import get_logger

logger = get_logger(__name__)

SCHEMA_VERSION = "lakf-ds-v1"
MIN_SIZE = 1e-4


@dataclass(frozen=True)
class Trajectory:
    """One object's ground-truth box sequence (XYAH) with its provenance."""

    dataset: str
    sequence: str
    track_id: int
    category: str
    img_w: int
    img_h: int
    frames: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64)
        gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        if len(frames) != len(gt):
            raise DomainError(f"track {self.track_id}: {len(frames)} frames but {len(gt)} boxes")
        if len(frames) < 2:
            raise DomainError(f"track {self.track_id}: need at least 2 frames, got {len(frames)}")
        if np.any(np.diff(frames) <= 0):
            raise DomainError(f"track {self.track_id}: frames must be strictly increasing")
        if np.any(gt[:, 2:] <= 0):
            raise DomainError(f"track {self.track_id}: boxes must have positive aspect and height")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "gt", gt)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def key(self) -> Tuple[str, str, int]:
        return self.dataset, self.sequence, self.track_id

    def gt_boxes(self) -> List[BBox]:
        return boxes_from_array(self.gt, StateMode.XYAH)

    def consecutive_runs(self) -> List[np.ndarray]:
        """Index arrays of the maximal runs of consecutive frames."""
        breaks = np.flatnonzero(np.diff(self.frames) != 1) + 1
        return np.split(np.arange(len(self.frames)), breaks)

    def slice(self, start: int, stop: int) -> "Trajectory":
        return replace(self, frames=self.frames[start:stop], gt=self.gt[start:stop])


@dataclass(frozen=True)
class SemiSimTrajectory:
    """Ground truth paired with simulated measurements ``y_t = x_t + v_t``."""

    base: Trajectory
    meas: np.ndarray
    alpha_p: float
    seed: int

    def __post_init__(self):
        meas = np.asarray(self.meas, dtype=np.float64).reshape(-1, 4)
        if meas.shape != self.base.gt.shape:
            raise DomainError(f"meas shape {meas.shape} does not match gt shape {self.base.gt.shape}")
        if np.any(meas[:, 2:] <= 0):
            raise DomainError("measurement boxes must have positive aspect and height")
        object.__setattr__(self, "meas", meas)

    def __len__(self) -> int:
        return len(self.base)

    def slice(self, start: int, stop: int) -> "SemiSimTrajectory":
        return replace(self, base=self.base.slice(start, stop), meas=self.meas[start:stop])

    def arrays(self, mode=StateMode.XYAH) -> Tuple[np.ndarray, np.ndarray]:
        """Returns ``(gt, meas)`` converted to the requested state mode."""
        mode = as_mode(mode)
        return (convert_array(self.base.gt, StateMode.XYAH, mode),
                convert_array(self.meas, StateMode.XYAH, mode))


@dataclass
class DatasetSplit:
    """Temporal train/test halves plus a validation subset of the train pool."""

    train: List[SemiSimTrajectory] = field(default_factory=list)
    val: List[SemiSimTrajectory] = field(default_factory=list)
    test: List[SemiSimTrajectory] = field(default_factory=list)
    skipped: int = 0

    def parts(self) -> Dict[str, List[SemiSimTrajectory]]:
        return {"train": self.train, "val": self.val, "test": self.test}


# ============================================================================
# MOTChallenge ingestion
# ============================================================================

def parse_mot_gt(text: Union[str, TextIO], dataset: str, sequence: str, img_w: int, img_h: int,
                 categories: Optional[Mapping[int, str]] = None,
                 default_category: str = "Pedestrian") -> List[Trajectory]:
    """
    Parses MOTChallenge ``gt.txt`` content into per-track trajectories.

    Rows are ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,class,visibility``.
    Rows with ``conf == 0`` are ignore regions and are dropped. When a
    ``categories`` mapping is given, rows whose class is not in it are dropped
    as well. Tracks left with fewer than two frames are skipped.

    Args:
        text: File content or an open text stream
        dataset: Dataset name recorded on every trajectory
        sequence: Sequence name recorded on every trajectory
        img_w: Image width in pixels
        img_h: Image height in pixels
        categories: Optional class-id to label mapping
        default_category: Label used when no mapping is given

    Returns:
        Trajectories sorted by track id, frames ascending

    Raises:
        ParseError: On a malformed row, with its line number
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    rows: Dict[int, List[Tuple[int, np.ndarray, str]]] = {}
    seen: Dict[Tuple[int, int], int] = {}
    for line_number, record in enumerate(csv.reader(stream), start=1):
        if not record or not "".join(record).strip():
            continue
        if len(record) < 6:
            raise ParseError(f"expected at least 6 columns, got {len(record)}", line_number)
        try:
            frame = int(float(record[0]))
            track_id = int(float(record[1]))
            left, top, w, h = (float(v) for v in record[2:6])
            conf = float(record[6]) if len(record) > 6 else 1.0
            cls = int(float(record[7])) if len(record) > 7 else 1
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line_number) from None
        if conf == 0:
            continue
        if w <= 0 or h <= 0:
            raise ParseError(f"non-positive box size w={w}, h={h}", line_number)
        if categories is not None:
            if cls not in categories:
                continue
            category = categories[cls]
        else:
            category = default_category
        if (track_id, frame) in seen:
            raise ParseError(f"duplicate row for track {track_id} frame {frame} (first on line {seen[track_id, frame]})",
                             line_number)
        seen[track_id, frame] = line_number
        box = BBox.from_tlwh(left, top, w, h, StateMode.XYAH).to_array()
        rows.setdefault(track_id, []).append((frame, box, category))

    trajectories = []
    short = 0
    for track_id in sorted(rows):
        items = sorted(rows[track_id], key=lambda item: item[0])
        if len(items) < 2:
            short += 1
            continue
        trajectories.append(Trajectory(
            dataset=dataset,
            sequence=sequence,
            track_id=track_id,
            category=items[0][2],
            img_w=int(img_w),
            img_h=int(img_h),
            frames=np.array([item[0] for item in items]),
            gt=np.stack([item[1] for item in items]),
        ))
    if short:
        logger.warning(f"{dataset}/{sequence}: skipped {short} single-frame tracks")
    logger.debug(f"{dataset}/{sequence}: parsed {len(trajectories)} trajectories")
    return trajectories


def read_seqinfo(path: Union[str, Path]) -> Dict[str, Union[str, int]]:
    """Reads name, imWidth, imHeight and seqLength from a ``seqinfo.ini``."""
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"seqinfo not found: {path}")
    section = parser["Sequence"]
    return {
        "name": section.get("name", Path(path).parent.name),
        "imWidth": int(section.get("imWidth", 1920)),
        "imHeight": int(section.get("imHeight", 1080)),
        "seqLength": int(section.get("seqLength", 0)),
    }


def load_mot_root(root: Union[str, Path], dataset: str,
                  categories: Optional[Mapping[int, str]] = None,
                  default_category: str = "Pedestrian") -> List[Trajectory]:
    """
    Loads every ``<root>/<sequence>/gt/gt.txt`` below a MOTChallenge split directory.

    Raises:
        FileNotFoundError: If the root contains no ground-truth files
    """
    root = Path(root)
    trajectories: List[Trajectory] = []
    gt_files = sorted(root.glob("*/gt/gt.txt"))
    if not gt_files:
        raise FileNotFoundError(f"no */gt/gt.txt below {root}")
    for gt_file in gt_files:
        seq_dir = gt_file.parent.parent
        info_path = seq_dir / "seqinfo.ini"
        if info_path.exists():
            info = read_seqinfo(info_path)
        else:
            info = {"name": seq_dir.name, "imWidth": 1920, "imHeight": 1080}
        with open(gt_file, encoding="utf-8") as handle:
            trajectories.extend(parse_mot_gt(
                handle, dataset, str(info["name"]), int(info["imWidth"]), int(info["imHeight"]),
                categories=categories, default_category=default_category,
            ))
    logger.info(f"Loaded {len(trajectories)} trajectories from {len(gt_files)} sequences of {dataset}")
    return trajectories


# ============================================================================
# Semi-simulated measurements
# ============================================================================

def trajectory_seed(seed: int, traj: Trajectory) -> int:
    """Derives an order-independent per-trajectory seed from the global seed."""
    token = f"{seed}|{traj.dataset}|{traj.sequence}|{traj.track_id}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(token, digest_size=8).digest(), "little")


def simulate_measurements(traj: Trajectory, alpha_p: float, seed: int) -> SemiSimTrajectory:
    """
    Draws ``y_t = x_t + v_t`` with ``v_t ~ N(0, R_t)`` built in XYAH mode.

    ``R_t`` uses the ground-truth height at frame t. Boxes pushed to a
    non-positive aspect or height by the noise are clamped to 1e-4.

    Args:
        traj: Ground-truth trajectory
        alpha_p: Position noise factor; 0 returns the ground truth unchanged
        seed: RNG seed, the draw is a pure function of (traj, alpha_p, seed)

    Returns:
        SemiSimTrajectory carrying the measurements and provenance

    Raises:
        DomainError: If alpha_p is negative
    """
    if alpha_p < 0 or not np.isfinite(alpha_p):
        raise DomainError(f"alpha_p must be non-negative, got {alpha_p}")
    if alpha_p == 0:
        meas = traj.gt.copy()
    else:
        rng = np.random.default_rng(seed)
        std = measurement_noise_std(StateMode.XYAH, alpha_p, traj.gt)
        meas = traj.gt + rng.standard_normal(traj.gt.shape) * std
        meas[:, 2:] = np.maximum(meas[:, 2:], MIN_SIZE)
    return SemiSimTrajectory(base=traj, meas=meas, alpha_p=float(alpha_p), seed=int(seed))


def simulate_dataset(trajs: Iterable[Trajectory], alpha_p: float, seed: int,
                     workers: int = 1) -> List[SemiSimTrajectory]:
    """Simulates every trajectory with its derived seed, preserving input order."""
    trajs = list(trajs)

    def _one(traj: Trajectory) -> SemiSimTrajectory:
        return simulate_measurements(traj, alpha_p, trajectory_seed(seed, traj))

    if workers <= 1:
        return [_one(traj) for traj in trajs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_one, trajs))


def to_mode(boxes: np.ndarray, mode) -> np.ndarray:
    """Converts an XYAH `(T, 4)` sequence to the requested state mode."""
    return convert_array(boxes, StateMode.XYAH, mode)


# ============================================================================
# Splits
# ============================================================================

def make_splits(trajs: Iterable[SemiSimTrajectory], val_fraction: float = 0.1,
                seed: int = 0) -> DatasetSplit:
    """
    Cuts every trajectory into two temporal halves and samples validation tracks.

    The first ``floor(T / 2)`` frames go to the train pool, the rest to test.
    ``round(val_fraction * pool)`` train-pool trajectories are moved to val.

    Args:
        trajs: Semi-simulated trajectories
        val_fraction: Fraction of train-pool trajectories used for validation
        seed: Seed of the validation sample

    Returns:
        DatasetSplit; trajectories shorter than 4 frames are counted in ``skipped``
    """
    if not 0 <= val_fraction < 1:
        raise DomainError(f"val_fraction must be in [0, 1), got {val_fraction}")
    pool: List[SemiSimTrajectory] = []
    test: List[SemiSimTrajectory] = []
    skipped = 0
    for traj in trajs:
        if len(traj) < 4:
            skipped += 1
            continue
        cut = len(traj) // 2
        pool.append(traj.slice(0, cut))
        test.append(traj.slice(cut, len(traj)))
    if skipped:
        logger.warning(f"make_splits skipped {skipped} trajectories shorter than 4 frames")

    n_val = int(round(val_fraction * len(pool)))
    rng = np.random.default_rng(seed)
    val_idx = set(rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else set()
    train = [traj for i, traj in enumerate(pool) if i not in val_idx]
    val = [traj for i, traj in enumerate(pool) if i in val_idx]
    logger.info(f"Split: train={len(train)}, val={len(val)}, test={len(test)}, skipped={skipped}")
    return DatasetSplit(train=train, val=val, test=test, skipped=skipped)


# ============================================================================
# Persistence
# ============================================================================

class DatasetHeader(BaseModel):
    """First line of a dataset file."""

    model_config = ConfigDict(extra="forbid")

    schema_version: str


class TrajectoryRecord(BaseModel):
    """One trajectory per line."""

    model_config = ConfigDict(extra="forbid")

    dataset: str
    sequence: str
    track_id: int
    category: str
    img_w: int
    img_h: int
    alpha_p: float
    seed: int
    frames: List[int]
    gt: List[List[float]]
    meas: List[List[float]]
    split: Literal["train", "val", "test"]

    @model_validator(mode="after")
    def check_shapes(self):
        if len(self.gt) != len(self.frames):
            raise ValueError("gt must have one row per frame")
        if len(self.meas) != len(self.frames):
            raise ValueError("meas must have one row per frame")
        if any(len(row) != 4 for row in self.gt + self.meas):
            raise ValueError("gt and meas rows must have 4 values")
        return self

    @classmethod
    def from_trajectory(cls, traj: SemiSimTrajectory, split: str) -> "TrajectoryRecord":
        base = traj.base
        return cls(
            dataset=base.dataset, sequence=base.sequence, track_id=base.track_id,
            category=base.category, img_w=base.img_w, img_h=base.img_h,
            alpha_p=traj.alpha_p, seed=traj.seed, frames=base.frames.tolist(),
            gt=base.gt.tolist(), meas=traj.meas.tolist(), split=split,
        )

    def to_trajectory(self) -> SemiSimTrajectory:
        base = Trajectory(
            dataset=self.dataset, sequence=self.sequence, track_id=self.track_id,
            category=self.category, img_w=self.img_w, img_h=self.img_h,
            frames=np.array(self.frames, dtype=np.int64), gt=np.array(self.gt, dtype=np.float64),
        )
        return SemiSimTrajectory(base=base, meas=np.array(self.meas, dtype=np.float64),
                                 alpha_p=self.alpha_p, seed=self.seed)


def write_dataset(split: DatasetSplit, path: Union[str, Path]) -> Path:
    """
    Writes a split as line-delimited JSON: one header line, then one trajectory per line.

    Floats are written in their shortest round-trip decimal form, so reading
    the file back reproduces every value bit-exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(DatasetHeader(schema_version=SCHEMA_VERSION).model_dump()) + "\n")
        for name, trajs in split.parts().items():
            for traj in trajs:
                record = TrajectoryRecord.from_trajectory(traj, name)
                handle.write(json.dumps(record.model_dump()) + "\n")
    logger.info(f"Dataset saved to {path}")
    return path


def _first_error_field(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return "?"
    return ".".join(str(part) for part in errors[0]["loc"]) or "?"


def read_dataset(path: Union[str, Path]) -> DatasetSplit:
    """
    Reads a file written by write_dataset.

    Raises:
        FormatError: On a version mismatch, malformed JSON or schema violation
    """
    split = DatasetSplit()
    with open(path, encoding="utf-8") as handle:
        lines = [line for line in handle if line.strip()]
    if not lines:
        return split

    try:
        header = DatasetHeader.model_validate(json.loads(lines[0]))
    except json.JSONDecodeError as exc:
        raise FormatError(f"line 1: invalid JSON: {exc}") from None
    except ValidationError as exc:
        raise FormatError("line 1: invalid header", field=_first_error_field(exc)) from None
    if header.schema_version != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema {header.schema_version!r}, expected {SCHEMA_VERSION!r}",
                          field="schema_version")

    parts = split.parts()
    for line_number, line in enumerate(lines[1:], start=2):
        try:
            record = TrajectoryRecord.model_validate(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {line_number}: invalid JSON: {exc}") from None
        except ValidationError as exc:
            raise FormatError(f"line {line_number}: schema violation", field=_first_error_field(exc)) from None
        try:
            parts[record.split].append(record.to_trajectory())
        except DomainError as exc:
            raise FormatError(f"line {line_number}: {exc}") from None
    return split


# ============================================================================
# Motion-pattern analysis
# ============================================================================

def dataset_aiou_report(trajs: Iterable[Trajectory]) -> pd.DataFrame:
    """
    Adjacent-frame AIoU per (dataset, category).

    Trajectories are split at frame gaps; only consecutive frames are paired.

    Returns:
        DataFrame with columns dataset, category, objects, pairs, aiou
    """
    groups: Dict[Tuple[str, str], List[List[BBox]]] = {}
    objects: Dict[Tuple[str, str], int] = {}
    for traj in trajs:
        key = (traj.dataset, traj.category)
        runs = [traj.gt[run] for run in traj.consecutive_runs() if len(run) >= 2]
        if not runs:
            continue
        objects[key] = objects.get(key, 0) + 1
        groups.setdefault(key, []).extend(boxes_from_array(run, StateMode.XYAH) for run in runs)

    rows = []
    for (dataset, category), sequences in sorted(groups.items()):
        rows.append({
            "dataset": dataset,
            "category": category,
            "objects": objects[(dataset, category)],
            "pairs": sum(len(seq) - 1 for seq in sequences),
            "aiou": aiou(sequences),
        })
    return pd.DataFrame(rows, columns=["dataset", "category", "objects", "pairs", "aiou"])
