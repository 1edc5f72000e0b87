"""Poses, scene normalization, and rotation math."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DegenerateWeightsError, FrameError, InvalidArgumentError

UNIT_TOL = 1e-3


class Frame(str, enum.Enum):
    WORLD = "world"
    NORMALIZED = "normalized"


def canonicalize_quats(q: np.ndarray) -> np.ndarray:
    """Flip signs so that qw >= 0; ties fall through to qz, then qy, then qx."""
    q = np.array(q, dtype=np.float64, copy=True)
    flat = q.reshape(-1, 4)
    sign = np.ones(flat.shape[0])
    undecided = np.ones(flat.shape[0], dtype=bool)
    for col in (3, 2, 1, 0):
        v = flat[:, col]
        neg = undecided & (v < 0)
        sign[neg] = -1.0
        undecided &= v == 0
    flat *= sign[:, None]
    return flat.reshape(q.shape)


def _as_unit_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidArgumentError(f"quaternion {q} has no direction")
    return q / n


@dataclass(frozen=True)
class Pose:
    """Translation plus unit quaternion ``(qx, qy, qz, qw)``."""

    t: np.ndarray
    q: np.ndarray
    frame: Frame = Frame.WORLD

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(3)
        q = _as_unit_quat(self.q)
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "frame", Frame(self.frame))

    @classmethod
    def identity(cls, frame: Frame = Frame.WORLD) -> "Pose":
        return cls(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), frame)

    def as_vector(self) -> np.ndarray:
        """``(tx, ty, tz, qx, qy, qz, qw)``."""
        return np.concatenate([self.t, self.q])


def stack_poses(poses: Sequence[Pose]) -> tuple[np.ndarray, np.ndarray]:
    if len(poses) == 0:
        return np.zeros((0, 3)), np.zeros((0, 4))
    return np.stack([p.t for p in poses]), np.stack([p.q for p in poses])


@dataclass(frozen=True)
class SceneFrame:
    """``normalized = (world - center) / scale``."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"scene scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_positions(cls, positions: np.ndarray) -> "SceneFrame":
        """Center on the bounding-box midpoint, scale by the largest axis extent."""
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if p.shape[0] == 0:
            raise InvalidArgumentError("cannot build a scene frame from no positions")
        lo, hi = p.min(axis=0), p.max(axis=0)
        extent = float((hi - lo).max())
        return cls(0.5 * (lo + hi), extent if extent > 0 else 1.0)

    def to_normalized(self, positions: np.ndarray) -> np.ndarray:
        return (np.asarray(positions, dtype=np.float64) - self.center) / self.scale

    def to_world(self, positions: np.ndarray) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64) * self.scale + self.center


def normalize_pose(p: Pose, frame: SceneFrame) -> Pose:
    if p.frame is not Frame.WORLD:
        raise FrameError("normalize_pose expects a world-frame pose")
    return Pose(frame.to_normalized(p.t), p.q, Frame.NORMALIZED)


def denormalize_pose(p: Pose, frame: SceneFrame) -> Pose:
    if p.frame is not Frame.NORMALIZED:
        raise FrameError("denormalize_pose expects a normalized-frame pose")
    return Pose(frame.to_world(p.t), p.q, Frame.WORLD)


@dataclass(frozen=True)
class NoiseVector:
    """Sampling variances: translation in m^2 along (x, altitude y, z), rotation in deg^2
    about x, y, z.  Written in the conventional short form ``[8 m, 0.2 m, 8 m, 1, 5, 1 deg]``."""

    v_t: np.ndarray = field(default_factory=lambda: np.array([8.0, 0.2, 8.0]))
    v_r: np.ndarray = field(default_factory=lambda: np.array([1.0, 5.0, 1.0]))

    def __post_init__(self):
        vt = np.array(self.v_t, dtype=np.float64).reshape(3)
        vr = np.array(self.v_r, dtype=np.float64).reshape(3)
        if (vt < 0).any() or (vr < 0).any() or not (np.isfinite(vt).all() and np.isfinite(vr).all()):
            raise InvalidArgumentError("noise components must be finite and non-negative")
        vt.flags.writeable = False
        vr.flags.writeable = False
        object.__setattr__(self, "v_t", vt)
        object.__setattr__(self, "v_r", vr)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "NoiseVector":
        values = list(values)
        if len(values) != 6:
            raise InvalidArgumentError("noise vector needs 6 components")
        return cls(values[:3], values[3:])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.v_t] + [float(x) for x in self.v_r]

    def at_iteration(self, k: int) -> "NoiseVector":
        """Variance after ``k`` halvings."""
        f = 2.0 ** (-int(k))
        return NoiseVector(self.v_t * f, self.v_r * f)

    def normalized_std(self, frame: SceneFrame) -> tuple[np.ndarray, np.ndarray]:
        """Per-axis standard deviations: translation in normalized units, rotation in radians."""
        return np.sqrt(self.v_t) / frame.scale, np.deg2rad(np.sqrt(self.v_r))

    def normalized_bounds(self, frame: SceneFrame) -> tuple[np.ndarray, np.ndarray]:
        """The vector itself as a uniform half-width: normalized translation, radians."""
        return self.v_t / frame.scale, np.deg2rad(self.v_r)


def _check_unit(q, name):
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL) or not np.all(np.isfinite(n)):
        raise InvalidArgumentError(f"{name} is not a unit quaternion (norm {n})")


def geodesic_distance(q1, q2) -> float:
    """Minimal rotation angle in radians between two unit quaternions."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    _check_unit(q1, "q1")
    _check_unit(q2, "q2")
    return float(min(np.pi, max(0.0, kernels.quat_geodesic(q1, q2)[0])))


def geodesic_distances(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Batched geodesic distance; rows are broadcast against each other."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    _check_unit(q1, "q1")
    _check_unit(q2, "q2")
    return np.clip(kernels.quat_geodesic(q1, q2), 0.0, np.pi)


def average_quaternion(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dominant eigenvector of ``sum_i w_i q_i q_i^T``, canonicalized to qw >= 0."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    m = (q * w[:, None]).T @ q
    vals, vecs = kernels.jacobi_eigh(m, tol=1e-12)
    best = vecs[:, int(np.argmax(vals))]
    return canonicalize_quats(best / np.linalg.norm(best))


def average_pose_arrays(t: np.ndarray, q: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if t.shape[0] == 0:
        raise InvalidArgumentError("cannot average an empty pose set")
    if w.shape[0] != t.shape[0] or q.shape[0] != t.shape[0]:
        raise InvalidArgumentError("poses and weights differ in length")
    if (w < 0).any() or not np.isfinite(w).all():
        raise InvalidArgumentError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeightsError("all averaging weights are zero")
    wn = w / total
    return wn @ t, average_quaternion(q, wn)


def average_poses(poses: Sequence[Pose], weights: Sequence[float]) -> Pose:
    """Weighted pose mean: arithmetic on translations, eigenvector method on rotations."""
    if len(poses) == 0:
        raise InvalidArgumentError("cannot average an empty pose set")
    frames = {p.frame for p in poses}
    if len(frames) != 1:
        raise FrameError("poses to average are in different frames")
    t, q = stack_poses(poses)
    tm, qm = average_pose_arrays(t, q, weights)
    return Pose(tm, qm, poses[0].frame)


def perturb_pose(p: Pose, dt, euler) -> Pose:
    """Shift by ``dt`` and pre-multiply the rotation by the extrinsic XYZ Euler rotation."""
    t, q = kernels.perturb(
        p.t[None, :], p.q[None, :], np.asarray(dt, dtype=np.float64).reshape(1, 3),
        np.asarray(euler, dtype=np.float64).reshape(1, 3),
    )
    return Pose(t[0], q[0], p.frame)


def yaw_quaternion(yaw) -> np.ndarray:
    """Rotation by ``yaw`` radians about the altitude (y) axis."""
    yaw = np.asarray(yaw, dtype=np.float64)
    out = np.zeros(yaw.shape + (4,))
    out[..., 1] = np.sin(0.5 * yaw)
    out[..., 3] = np.cos(0.5 * yaw)
    return out


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
