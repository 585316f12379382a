"""Needle-tip pivot calibration from tracked poses.

While the tip rests on a fixed point and the handle pivots, every pose
satisfies R_i @ tip_offset + p_i = pivot_point. Stacking all poses gives
the 3n x 6 linear system [R_i | -I] @ (tip_offset; pivot_point) = -p_i,
solved by QR least squares. Readiness requires enough poses and enough
rotational diversity for the system to be well determined.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_POSES = 20
DIVERSITY_THRESHOLD = 0.15
CONDITION_LIMIT = 1e8          # on the normal matrix, i.e. cond(A)^2
ROTATION_TOL = 1e-6


class PivotError(ValueError):
    pass


class NotReadyError(PivotError):
    pass


class IllConditionedError(PivotError):
    pass


@dataclass(frozen=True)
class PoseSample:
    rotation: np.ndarray
    position: np.ndarray
    timestamp: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
            raise PivotError("pose rotation not orthonormal")
        p = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise PivotError("pose position not finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "timestamp", float(self.timestamp))


@dataclass(frozen=True)
class PivotResult:
    tip_offset: np.ndarray      # sensor frame, mm
    pivot_point: np.ndarray     # tracker world, mm
    rms_residual: float
    n_poses: int


@dataclass
class PoseBuffer:
    min_poses: int = MIN_POSES
    diversity_threshold: float = DIVERSITY_THRESHOLD
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def snapshot(self) -> list:
        return list(self.samples)


def rotation_diversity(samples) -> float:
    """Smallest singular value of the vertically stacked (R_i - R_mean)."""
    if not samples:
        return 0.0
    rs = np.stack([s.rotation for s in samples])
    dev = rs - rs.mean(axis=0)
    stacked = dev.reshape(-1, 3)
    return float(np.linalg.svd(stacked, compute_uv=False)[-1])


def accumulate_pose(buffer: PoseBuffer, sample: PoseSample):
    """Append a pose; returns (buffer, ready). Non-orthonormal rotations raise."""
    if not isinstance(sample, PoseSample):
        sample = PoseSample(*sample)
    buffer.samples.append(sample)
    ready = (len(buffer.samples) >= buffer.min_poses
             and rotation_diversity(buffer.samples) > buffer.diversity_threshold)
    return buffer, ready


def is_ready(buffer: PoseBuffer) -> bool:
    return (len(buffer.samples) >= buffer.min_poses
            and rotation_diversity(buffer.samples) > buffer.diversity_threshold)


def pivot_calibrate(buffer) -> PivotResult:
    """Solve for the tip offset and pivot point from a ready pose buffer."""
    if isinstance(buffer, PoseBuffer):
        if not is_ready(buffer):
            raise NotReadyError(
                f"buffer not ready: {len(buffer)} poses, "
                f"diversity {rotation_diversity(buffer.samples):.3f}")
        samples = buffer.snapshot()
    else:
        samples = list(buffer)
        if not samples:
            raise NotReadyError("no poses")
    n = len(samples)
    a = np.zeros((3 * n, 6))
    b = np.zeros(3 * n)
    for i, s in enumerate(samples):
        a[3 * i:3 * i + 3, :3] = s.rotation
        a[3 * i:3 * i + 3, 3:] = -np.eye(3)
        b[3 * i:3 * i + 3] = -s.position
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[-1] <= 0 or (sv[0] / sv[-1]) ** 2 > CONDITION_LIMIT:
        raise IllConditionedError(
            "pivot system ill-conditioned; sweep a wider range of orientations")
    q, r = np.linalg.qr(a)
    x = np.linalg.solve(r, q.T @ b)
    tip_offset, pivot_point = x[:3], x[3:]
    residuals = np.array([np.linalg.norm(s.rotation @ tip_offset + s.position - pivot_point)
                          for s in samples])
    rms = float(np.sqrt(np.mean(residuals**2)))
    return PivotResult(tip_offset, pivot_point, rms, n)
