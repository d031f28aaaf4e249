"""Synthetic ground-truth trajectories for tests and desk-scale experiments."""

from typing import List, Tuple

import numpy as np

from lakf.dataio import Trajectory
from lakf.logger import get_logger

logger = get_logger(__name__)

IMG_W = 1920
IMG_H = 1080


def constant_velocity_tracks(n: int, length: int, seed: int,
                             height_range: Tuple[float, float] = (50.0, 300.0),
                             aspect_range: Tuple[float, float] = (0.35, 0.75),
                             speed_range: Tuple[float, float] = (0.0, 6.0),
                             img_w: int = IMG_W, img_h: int = IMG_H) -> List[Trajectory]:
    """
    Boxes moving with a constant per-track velocity; aspect and height are constant.

    Args:
        n: Number of tracks
        length: Frames per track (>= 2)
        seed: RNG seed
        height_range: Uniform range of box heights in pixels
        aspect_range: Uniform range of w / h
        speed_range: Uniform range of the center speed in pixels per frame

    Returns:
        Trajectories of dataset "synthetic", category "Pedestrian"
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    tracks = []
    for i in range(n):
        h = rng.uniform(*height_range)
        a = rng.uniform(*aspect_range)
        speed = rng.uniform(*speed_range)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        cx0 = rng.uniform(0.2 * img_w, 0.8 * img_w)
        cy0 = rng.uniform(0.2 * img_h, 0.8 * img_h)
        gt = np.stack([
            cx0 + speed * np.cos(heading) * t,
            cy0 + speed * np.sin(heading) * t,
            np.full(length, a),
            np.full(length, h),
        ], axis=1)
        tracks.append(Trajectory(
            dataset="synthetic", sequence="synthetic-cv", track_id=i + 1, category="Pedestrian",
            img_w=img_w, img_h=img_h, frames=np.arange(1, length + 1), gt=gt,
        ))
    return tracks


def _piecewise_sinusoid(rng: np.random.Generator, length: int, amplitude_scale: float,
                        segment_range: Tuple[int, int]) -> np.ndarray:
    velocity = np.empty(length)
    start = 0
    while start < length:
        stop = min(length, start + int(rng.integers(segment_range[0], segment_range[1] + 1)))
        amplitude = rng.uniform(0.3, 1.0) * amplitude_scale
        period = rng.uniform(10.0, 40.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        offset = rng.uniform(-0.5, 0.5) * amplitude_scale
        local_t = np.arange(stop - start, dtype=np.float64)
        velocity[start:stop] = offset + amplitude * np.sin(2.0 * np.pi * local_t / period + phase)
        start = stop
    return velocity


def maneuvering_tracks(n: int, length: int, seed: int,
                       height_range: Tuple[float, float] = (60.0, 300.0),
                       aspect_range: Tuple[float, float] = (0.3, 0.7),
                       segment_range: Tuple[int, int] = (20, 50),
                       img_w: int = IMG_W, img_h: int = IMG_H) -> List[Trajectory]:
    """
    Dance-like motion: piecewise sinusoidal velocities and slow height breathing.

    Velocity amplitudes scale with the box height, so small and large boxes
    manoeuvre alike relative to their size.

    Returns:
        Trajectories of dataset "synthetic", category "Dancer"
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    tracks = []
    for i in range(n):
        h0 = rng.uniform(*height_range)
        a0 = rng.uniform(*aspect_range)
        vx = _piecewise_sinusoid(rng, length, 0.08 * h0, segment_range)
        vy = _piecewise_sinusoid(rng, length, 0.04 * h0, segment_range)
        cx = rng.uniform(0.3 * img_w, 0.7 * img_w) + np.concatenate([[0.0], np.cumsum(vx[:-1])])
        cy = rng.uniform(0.3 * img_h, 0.7 * img_h) + np.concatenate([[0.0], np.cumsum(vy[:-1])])
        h = h0 * (1.0 + 0.1 * np.sin(2.0 * np.pi * t / rng.uniform(30.0, 80.0) + rng.uniform(0.0, 2.0 * np.pi)))
        a = a0 * (1.0 + 0.15 * np.sin(2.0 * np.pi * t / rng.uniform(20.0, 60.0) + rng.uniform(0.0, 2.0 * np.pi)))
        tracks.append(Trajectory(
            dataset="synthetic", sequence="synthetic-dance", track_id=i + 1, category="Dancer",
            img_w=img_w, img_h=img_h, frames=np.arange(1, length + 1),
            gt=np.stack([cx, cy, a, h], axis=1),
        ))
    logger.debug(f"Generated {n} maneuvering tracks of length {length}")
    return tracks
