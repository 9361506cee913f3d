"""Keyframe camera trajectories for novel-view tours.

File format: one keyframe per line, ``qw qx qy qz tx ty tz frames_to_next``
(world->camera pose as in the reconstruction files); ``#`` starts a comment.
Segment ``k`` contributes ``frames_to_next`` frames starting at keyframe
``k``; the last keyframe closes the sequence with one more frame, so two
keyframes with a count of 9 give 10 frames whose ends equal the keyframes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .colmap_io import normalize_quat
from .errors import MalformedRecord, MissingFile

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class Keyframe:
    qvec: tuple
    tvec: tuple
    frames_to_next: int


@dataclass(frozen=True)
class TrajectorySpec:
    keyframes: tuple

    def __post_init__(self):
        if len(self.keyframes) < 2:
            raise ValueError("a trajectory needs at least two keyframes")
        for k, kf in enumerate(self.keyframes[:-1]):
            if kf.frames_to_next < 1:
                raise ValueError(f"keyframe {k}: frames_to_next must be at least 1")
        for k, kf in enumerate(self.keyframes):
            n = math.sqrt(sum(c * c for c in kf.qvec))
            if abs(n - 1.0) > UNIT_TOL:
                raise ValueError(f"keyframe {k}: quaternion norm {n} is not 1")

    @property
    def n_frames(self) -> int:
        return sum(kf.frames_to_next for kf in self.keyframes[:-1]) + 1


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc; ``t=0`` gives ``q0`` exactly."""
    q0 = np.asarray(q0, float)
    q1 = np.asarray(q1, float)
    if t == 0:
        return q0.copy()
    dot = float(q0 @ q1)
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        q = q0 + t * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    q = (math.sin((1 - t) * theta) / s) * q0 + (math.sin(t * theta) / s) * q1
    return q / np.linalg.norm(q)


def interpolate(spec: TrajectorySpec) -> list:
    """Per-frame ``(qvec, tvec)`` tuples: slerp for rotation, linear for translation."""
    frames = []
    kfs = spec.keyframes
    for a, b in zip(kfs[:-1], kfs[1:]):
        ta, tb = np.asarray(a.tvec, float), np.asarray(b.tvec, float)
        for j in range(a.frames_to_next):
            t = j / a.frames_to_next
            q = slerp(a.qvec, b.qvec, t)
            tr = ta + t * (tb - ta)
            frames.append((tuple(float(c) for c in q), tuple(float(c) for c in tr)))
    last = kfs[-1]
    frames.append((tuple(float(c) for c in last.qvec), tuple(float(c) for c in last.tvec)))
    return frames


def load_trajectory(path) -> TrajectorySpec:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    kfs = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise MalformedRecord(path, f"line {lineno}", f"expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[:7]]
            count = int(parts[7])
        except ValueError as exc:
            raise MalformedRecord(path, f"line {lineno}", str(exc)) from None
        q = tuple(vals[:4])
        n = math.sqrt(sum(c * c for c in q))
        if abs(n - 1.0) > UNIT_TOL:
            raise MalformedRecord(path, f"line {lineno}", f"quaternion norm {n:.6g} is not 1")
        kfs.append(Keyframe(normalize_quat(q), tuple(vals[4:]), count))
    try:
        return TrajectorySpec(tuple(kfs))
    except ValueError as exc:
        raise MalformedRecord(path, "file", str(exc)) from None


def write_trajectory(spec: TrajectorySpec, path) -> None:
    lines = ["# qw qx qy qz tx ty tz frames_to_next"]
    for kf in spec.keyframes:
        lines.append(" ".join(repr(float(c)) for c in (*kf.qvec, *kf.tvec)) + f" {kf.frames_to_next}")
    Path(path).write_text("\n".join(lines) + "\n")
