"""Point-based rigid registration between tracker space and image space.

Closed-form least-squares fit: align centroids, SVD of the cross-covariance,
correct an improper rotation by flipping the smallest singular direction so
the result is always a proper rotation (det +1). Reliability is reported as
the RMS of the per-pair residuals, the fiducial registration error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .transforms import RigidTransform, rigid_apply

DEGENERACY_RTOL = 1e-9


class LandmarkError(ValueError):
    pass


class DegenerateConfigurationError(LandmarkError):
    pass


@dataclass(frozen=True)
class LandmarkPair:
    image_point: np.ndarray     # interventional-CT world, mm
    tracker_point: np.ndarray   # tracker world, mm
    label: str = ""

    def __post_init__(self):
        ip = np.asarray(self.image_point, dtype=float).reshape(3)
        tp = np.asarray(self.tracker_point, dtype=float).reshape(3)
        if not (np.all(np.isfinite(ip)) and np.all(np.isfinite(tp))):
            raise LandmarkError("landmark points must be finite")
        object.__setattr__(self, "image_point", ip)
        object.__setattr__(self, "tracker_point", tp)


@dataclass(frozen=True)
class LandmarkRegistrationResult:
    transform: RigidTransform           # tracker -> image
    rmse: float
    per_pair_residuals: np.ndarray

    def __post_init__(self):
        res = np.asarray(self.per_pair_residuals, dtype=float)
        object.__setattr__(self, "per_pair_residuals", res)
        recomputed = float(np.sqrt(np.mean(res**2))) if res.size else 0.0
        if abs(recomputed - self.rmse) > 1e-12:
            raise LandmarkError("rmse inconsistent with residuals")


def register_landmarks(pairs) -> LandmarkRegistrationResult:
    """Least-squares rigid transform minimizing sum ||T(tracker_i) - image_i||^2.

    Accepts 3 or more pairs; collinear or coincident configurations (two
    near-zero singular values of the cross-covariance) are rejected.
    """
    pairs = list(pairs)
    if len(pairs) < 3:
        raise LandmarkError(f"need at least 3 pairs, got {len(pairs)}")
    trk = np.array([p.tracker_point for p in pairs])
    img = np.array([p.image_point for p in pairs])
    c_trk = trk.mean(axis=0)
    c_img = img.mean(axis=0)
    h = (trk - c_trk).T @ (img - c_img)
    u, s, vt = np.linalg.svd(h)
    scale = max(s[0], 1.0)
    if s[1] <= DEGENERACY_RTOL * scale and s[2] <= DEGENERACY_RTOL * scale:
        raise DegenerateConfigurationError(
            "landmarks are collinear or coincident; rotation unobservable")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = c_img - rotation @ c_trk
    transform = RigidTransform(rotation, translation)
    residuals = np.linalg.norm(rigid_apply(transform, trk) - img, axis=1)
    rmse = float(np.sqrt(np.mean(residuals**2)))
    return LandmarkRegistrationResult(transform, rmse, residuals)


def fiducial_registration_error(result: LandmarkRegistrationResult, pairs) -> float:
    """RMS residual of the fit, recomputed from scratch against the pairs."""
    pairs = list(pairs)
    if not pairs:
        raise LandmarkError("no pairs")
    trk = np.array([p.tracker_point for p in pairs])
    img = np.array([p.image_point for p in pairs])
    res = np.linalg.norm(rigid_apply(result.transform, trk) - img, axis=1)
    return float(np.sqrt(np.mean(res**2)))
