"""Biopsy path planning and live needle-versus-plan guidance metrics.

Entry and target live in interventional-CT world coordinates.  The needle
axis is the third column of the tracked sensor rotation (sensor +z); the tip
is the calibrated offset carried through pose and tracker-to-image chain.
Guidance older than STALENESS_THRESHOLD seconds is flagged invalid; the
caller owning the pose slot decides what to display meanwhile.
"""

from dataclasses import dataclass

import numpy as np

from .pivot import PoseSample
from .transforms import RigidTransform, rigid_apply

STALENESS_THRESHOLD = 0.5  # seconds without a fresh pose
MIN_PLAN_LENGTH = 1.0      # mm between entry and target
NEEDLE_AXIS_COLUMN = 2


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class BiopsyPlan:
    entry: np.ndarray
    target: np.ndarray
    direction: np.ndarray
    length: float

    def __post_init__(self):
        entry = np.asarray(self.entry, dtype=float).reshape(3)
        target = np.asarray(self.target, dtype=float).reshape(3)
        direction = np.asarray(self.direction, dtype=float).reshape(3)
        if not (np.all(np.isfinite(entry)) and np.all(np.isfinite(target))):
            raise PlanError("plan points must be finite")
        diff = target - entry
        norm = float(np.linalg.norm(diff))
        if norm == 0.0:
            raise PlanError("entry and target coincide")
        if abs(self.length - norm) > 1e-9 or np.abs(direction - diff / norm).max() > 1e-12:
            raise PlanError("direction/length inconsistent with entry and target")
        object.__setattr__(self, "entry", entry)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "length", float(self.length))


@dataclass(frozen=True, eq=False)
class GuidanceState:
    tip_image: np.ndarray
    depth_remaining: float
    lateral_deviation: float
    angle_deviation: float
    pose_age: float
    valid: bool

    def __post_init__(self):
        if self.lateral_deviation < 0:
            raise PlanError("lateral deviation cannot be negative")
        if not 0.0 <= self.angle_deviation <= 180.0:
            raise PlanError("angle deviation must lie in [0, 180] degrees")


def make_plan(entry, target) -> BiopsyPlan:
    """Plan from entry to target; rejects paths shorter than 1 mm."""
    entry = np.asarray(entry, dtype=float).reshape(3)
    target = np.asarray(target, dtype=float).reshape(3)
    diff = target - entry
    length = float(np.linalg.norm(diff))
    if not length > MIN_PLAN_LENGTH:
        raise PlanError(
            f"entry and target are {length:.3g} mm apart, need > {MIN_PLAN_LENGTH}")
    return BiopsyPlan(entry, target, diff / length, length)


def sample_path(plan: BiopsyPlan, step: float) -> np.ndarray:
    """Points every `step` mm from entry along the plan, target always last."""
    if not step > 0:
        raise PlanError(f"step must be positive, got {step}")
    distances = np.append(np.arange(0.0, plan.length, step), plan.length)
    return plan.entry + distances[:, None] * plan.direction


def compute_guidance(plan: BiopsyPlan, pose: PoseSample, tip_offset,
                     tracker_to_image: RigidTransform, now: float) -> GuidanceState:
    """Needle metrics against the plan for one tracked pose.

    tip_image = tracker_to_image(pose.rotation @ tip_offset + pose.position);
    depth_remaining is signed distance to target along the plan direction
    (negative = past target), lateral_deviation the distance to the infinite
    plan line, angle_deviation between the sensor +z axis mapped to image
    space and the plan direction.
    """
    tip_offset = np.asarray(tip_offset, dtype=float).reshape(3)
    tip_tracker = pose.rotation @ tip_offset + pose.position
    tip_image = rigid_apply(tracker_to_image, tip_tracker)

    rel = tip_image - plan.entry
    along = float(rel @ plan.direction)
    lateral = float(np.linalg.norm(rel - along * plan.direction))
    depth = float((plan.target - tip_image) @ plan.direction)

    axis_image = tracker_to_image.rotation @ pose.rotation[:, NEEDLE_AXIS_COLUMN]
    cosine = float(np.clip(axis_image @ plan.direction, -1.0, 1.0))
    angle = float(np.degrees(np.arccos(cosine)))

    age = float(now - pose.timestamp)
    return GuidanceState(
        tip_image=tip_image,
        depth_remaining=depth,
        lateral_deviation=lateral,
        angle_deviation=angle,
        pose_age=age,
        valid=age <= STALENESS_THRESHOLD,
    )
