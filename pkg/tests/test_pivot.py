import numpy as np
import pytest

from petnav.pivot import (
    IllConditionedError,
    NotReadyError,
    PivotError,
    PoseBuffer,
    PoseSample,
    accumulate_pose,
    pivot_calibrate,
    rotation_diversity,
)
from petnav.transforms import RigidTransform


def rot(axis, angle):
    return RigidTransform.from_axis_angle(axis, angle).rotation


def cone_sweep(n=30, tilt=np.pi / 6, twist=0.5):
    """Rotations whose needle axis sweeps a cone of half-angle `tilt`, with twist."""
    out = []
    for i in range(n):
        az = 2 * np.pi * i / n
        tilt_axis = [np.cos(az), np.sin(az), 0.0]
        r = rot(tilt_axis, tilt) @ rot([0, 0, 1], twist * np.sin(3 * az))
        out.append(r)
    return out


def pivot_poses(rotations, tip_offset, pivot, noise=0.0, rng=None):
    # noise is the isotropic magnitude: E[|n|^2] = noise^2, so sigma/sqrt(3) per axis
    samples = []
    for i, r in enumerate(rotations):
        p = pivot - r @ np.asarray(tip_offset, float)
        if noise:
            p = p + rng.normal(scale=noise / np.sqrt(3.0), size=3)
        samples.append(PoseSample(r, p, timestamp=0.1 * i))
    return samples


def test_identical_poses_not_ready():
    buf = PoseBuffer()
    ready = False
    for i in range(25):
        buf, ready = accumulate_pose(buf, PoseSample(np.eye(3), [1.0, 2.0, 3.0], i * 0.1))
    assert not ready
    assert rotation_diversity(buf.samples) == 0.0


def test_cone_sweep_ready_and_metric_oracle():
    rotations = cone_sweep(30)
    buf = PoseBuffer()
    for i, r in enumerate(rotations):
        buf, ready = accumulate_pose(buf, PoseSample(r, np.zeros(3), i * 0.1))
    # independent oracle for the diversity metric
    rs = np.stack(rotations)
    stacked = (rs - rs.mean(axis=0)).reshape(-1, 3)
    smin = np.linalg.svd(stacked, compute_uv=False)[-1]
    assert abs(rotation_diversity(buf.samples) - smin) < 1e-12
    assert smin > 0.15
    assert ready


def test_bad_rotation_rejected():
    with pytest.raises(PivotError):
        PoseSample(np.eye(3) * 2.0, [0, 0, 0], 0.0)


def test_noise_free_recovery():
    tip = np.array([0.0, 0.0, 100.0])
    pivot = np.array([50.0, 20.0, -30.0])
    rng = np.random.default_rng(0)
    rotations = []
    for _ in range(20):
        q = rng.normal(size=(3, 3))
        u, _, vt = np.linalg.svd(q)
        r = u @ vt
        if np.linalg.det(r) < 0:
            r[:, 2] *= -1
        rotations.append(r)
    buf = PoseBuffer()
    for s in pivot_poses(rotations, tip, pivot):
        buf, _ = accumulate_pose(buf, s)
    res = pivot_calibrate(buf)
    assert np.abs(res.tip_offset - tip).max() < 1e-9
    assert np.abs(res.pivot_point - pivot).max() < 1e-9
    assert res.rms_residual < 1e-9
    assert res.n_poses == 20


def test_noisy_recovery_monte_carlo():
    tip = np.array([0.0, 0.0, 100.0])
    pivot = np.array([50.0, 20.0, -30.0])
    rng = np.random.default_rng(1)
    tip_errors, rmss = [], []
    rotations = cone_sweep(30, tilt=np.pi / 4, twist=1.0)
    for _ in range(100):
        samples = pivot_poses(rotations, tip, pivot, noise=0.2, rng=rng)
        res = pivot_calibrate(samples)
        tip_errors.append(np.linalg.norm(res.tip_offset - tip))
        rmss.append(res.rms_residual)
    assert np.median(tip_errors) < 0.5
    assert 0.1 <= np.median(rmss) <= 0.3


def test_single_axis_tip_on_axis_ill_conditioned():
    tip = np.array([0.0, 0.0, 100.0])
    pivot = np.array([10.0, 10.0, 10.0])
    rotations = [rot([0, 0, 1], th) for th in np.linspace(0, 2 * np.pi, 25, endpoint=False)]
    samples = pivot_poses(rotations, tip, pivot)
    with pytest.raises(IllConditionedError):
        pivot_calibrate(samples)


def test_not_ready_raises():
    buf = PoseBuffer()
    buf, _ = accumulate_pose(buf, PoseSample(np.eye(3), [0, 0, 0], 0.0))
    with pytest.raises(NotReadyError):
        pivot_calibrate(buf)


def test_translation_invariance():
    tip = np.array([5.0, -3.0, 90.0])
    pivot = np.array([0.0, 0.0, 0.0])
    rotations = cone_sweep(24, tilt=0.6, twist=0.8)
    base = pivot_calibrate(pivot_poses(rotations, tip, pivot))
    d = np.array([17.0, -4.0, 8.5])
    shifted = [PoseSample(s.rotation, s.position + d, s.timestamp)
               for s in pivot_poses(rotations, tip, pivot)]
    res = pivot_calibrate(shifted)
    assert np.abs(res.tip_offset - base.tip_offset).max() < 1e-9
    assert np.abs(res.pivot_point - (base.pivot_point + d)).max() < 1e-9


def test_rotation_equivariance():
    tip = np.array([5.0, -3.0, 90.0])
    pivot = np.array([30.0, 1.0, -12.0])
    rotations = cone_sweep(24, tilt=0.6, twist=0.8)
    base = pivot_calibrate(pivot_poses(rotations, tip, pivot))
    q = rot([1, 2, 0.5], 1.2)
    rotated = [PoseSample(q @ s.rotation, q @ s.position, s.timestamp)
               for s in pivot_poses(rotations, tip, pivot)]
    res = pivot_calibrate(rotated)
    assert np.abs(res.tip_offset - base.tip_offset).max() < 1e-9
    assert np.abs(res.pivot_point - q @ base.pivot_point).max() < 1e-9


def test_residual_matches_independent_recomputation():
    tip = np.array([1.0, 2.0, 80.0])
    pivot = np.array([5.0, 5.0, 5.0])
    rng = np.random.default_rng(3)
    samples = pivot_poses(cone_sweep(25, tilt=0.5, twist=0.6), tip, pivot, noise=0.3, rng=rng)
    res = pivot_calibrate(samples)
    manual = np.sqrt(np.mean([
        np.linalg.norm(s.rotation @ res.tip_offset + s.position - res.pivot_point) ** 2
        for s in samples]))
    assert abs(res.rms_residual - manual) < 1e-12
