from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

# Quaternions are (w, x, y, z) throughout the pipeline; scipy is scalar-last.


def to_rotation(q: Sequence[float]) -> Rotation:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w])


def from_rotation(rotation: Rotation) -> np.ndarray:
    x, y, z, w = rotation.as_quat()
    q = np.array([w, x, y, z], dtype=np.float64)
    # canonical hemisphere keeps labels continuous along a trajectory
    return q if w >= 0 else -q


def from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation (radians) as a unit quaternion"""
    return from_rotation(Rotation.from_euler('ZYX', [yaw, pitch, roll]))


def to_euler(q: Sequence[float]) -> Tuple[float, float, float]:
    yaw, pitch, roll = to_rotation(q).as_euler('ZYX')
    return float(yaw), float(pitch), float(roll)


def normalize(q: Sequence[float]) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def angle_between(q1: Sequence[float], q2: Sequence[float]) -> float:
    """Geodesic rotation angle between two orientations, insensitive to sign"""
    dot = abs(float(np.dot(normalize(q1), normalize(q2))))
    return 2.0 * float(np.arccos(min(dot, 1.0)))


def random_unit(rng: np.random.Generator, size: int) -> np.ndarray:
    return from_rotation_batch(Rotation.random(size, random_state=rng))


def from_rotation_batch(rotations: Rotation) -> np.ndarray:
    xyzw = rotations.as_quat().reshape(-1, 4)
    return np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
