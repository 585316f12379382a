import itertools

import numpy as np
import pytest

from petnav.mireg import (
    EmptyOverlapError,
    JointHistogram,
    RegistrationConfig,
    RegistrationError,
    joint_histogram,
    marginal_entropies,
    mutual_information,
    register_bspline_mi,
    register_rigid_mi,
)
from petnav.transforms import (
    BSplineGrid,
    RigidTransform,
    deformable_apply,
    rigid_apply,
    rigid_invert,
)
from petnav.volume import Volume, sample_trilinear_many

IDENTITY = RigidTransform.identity()


def blob_volume(dims=(32, 32, 32), spacing=(1.5, 1.5, 2.0), seed=0, n_blobs=6):
    """Smooth sum-of-Gaussians volume; background 0, peaks around 100."""
    rng = np.random.default_rng(seed)
    dims = tuple(dims)
    spacing = np.asarray(spacing, float)
    extent = (np.array(dims) - 1) * spacing
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    world = idx * spacing
    data = np.zeros(dims)
    for _ in range(n_blobs):
        center = extent * rng.uniform(0.25, 0.75, size=3)
        width = extent.mean() * rng.uniform(0.08, 0.2)
        amp = rng.uniform(60.0, 140.0)
        r2 = ((world - center) ** 2).sum(axis=-1)
        data += amp * np.exp(-r2 / (2.0 * width**2))
    return Volume(dims, spacing, np.zeros(3), np.eye(3), data.astype(np.float32))


def resample_through(fixed: Volume, warp) -> Volume:
    """New volume on fixed's lattice whose values are fixed sampled at warp(x)."""
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in fixed.dims], indexing="ij"),
                   axis=-1).reshape(-1, 3)
    world = fixed.origin + (idx * fixed.spacing) @ fixed.direction.T
    vals, inside = sample_trilinear_many(fixed, warp(world))
    vals = np.where(inside, vals, 0.0)
    return Volume(fixed.dims, fixed.spacing, fixed.origin, fixed.direction,
                  vals.reshape(fixed.dims).astype(np.float32))


def intensity_mse(fixed: Volume, moving: Volume, mapping) -> float:
    idx = np.stack(np.meshgrid(*[np.arange(0, d, 2) for d in fixed.dims],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    world = fixed.origin + (idx * fixed.spacing) @ fixed.direction.T
    fvals = fixed.data[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
    mvals, inside = sample_trilinear_many(moving, mapping(world))
    return float(np.mean((mvals[inside] - fvals[inside]) ** 2))


# ---------------------------------------------------------------------------
# Config and histogram


def test_config_rejects_nonpositive_fields():
    with pytest.raises(RegistrationError):
        RegistrationConfig(bins=1)
    with pytest.raises(RegistrationError):
        RegistrationConfig(sample_stride=0)
    with pytest.raises(RegistrationError):
        RegistrationConfig(bspline_step_mm=-1.0)


def test_histogram_identical_volumes_diagonal():
    vol = blob_volume(dims=(12, 12, 12))
    cfg = RegistrationConfig(bins=16, sample_stride=1)
    h = joint_histogram(vol, vol, IDENTITY, cfg)
    off_diagonal = h.counts.sum() - np.trace(h.counts)
    assert off_diagonal == 0.0
    assert h.n_samples == 12**3
    assert h.n_outside == 0


def test_histogram_matches_hand_enumeration():
    rng = np.random.default_rng(3)
    df = rng.integers(0, 10, size=(4, 4, 4)).astype(np.float32)
    dm = rng.integers(0, 10, size=(4, 4, 4)).astype(np.float32)
    fixed = Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), np.eye(3), df)
    moving = Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), np.eye(3), dm)
    bins = 4
    h = joint_histogram(fixed, moving, IDENTITY,
                        RegistrationConfig(bins=bins, sample_stride=1))

    expected = np.zeros((bins, bins))
    flo, fhi = float(df.min()), float(df.max())
    mlo, mhi = float(dm.min()), float(dm.max())
    for i, j, k in itertools.product(range(4), repeat=3):
        fb = min(int((df[i, j, k] - flo) / (fhi - flo) * bins), bins - 1)
        mb = min(int((dm[i, j, k] - mlo) / (mhi - mlo) * bins), bins - 1)
        expected[fb, mb] += 1
    assert np.array_equal(h.counts, expected)
    assert h.n_samples == 64


def test_histogram_zero_overlap_raises():
    vol = blob_volume(dims=(10, 10, 10))
    far = RigidTransform(np.eye(3), [1e4, 0.0, 0.0])
    with pytest.raises(EmptyOverlapError):
        joint_histogram(vol, vol, far, RegistrationConfig(sample_stride=1))


def test_histogram_outside_counted_separately():
    vol = blob_volume(dims=(16, 16, 16), spacing=(1, 1, 1))
    # Shift by half the extent: part of the grid falls off the moving volume.
    t = RigidTransform(np.eye(3), [8.0, 0.0, 0.0])
    h = joint_histogram(vol, vol, t, RegistrationConfig(sample_stride=1))
    assert h.n_outside > 0
    assert h.n_samples + h.n_outside == 16**3
    assert abs(h.counts.sum() - h.n_samples) < 1e-6


# ---------------------------------------------------------------------------
# Mutual information


def test_mi_constant_volume_is_zero():
    const = Volume((6, 6, 6), (1, 1, 1), (0, 0, 0), np.eye(3), np.ones((6, 6, 6)))
    vol = blob_volume(dims=(6, 6, 6), spacing=(1, 1, 1))
    cfg = RegistrationConfig(bins=8, sample_stride=1)
    assert mutual_information(joint_histogram(const, vol, IDENTITY, cfg)) == 0.0
    assert mutual_information(joint_histogram(vol, const, IDENTITY, cfg)) == 0.0


def test_mi_eight_voxel_self_registration_exactly_two_bits():
    data = np.array([0, 0, 1, 1, 2, 2, 3, 3], dtype=np.float32).reshape(2, 2, 2)
    vol = Volume((2, 2, 2), (1, 1, 1), (0, 0, 0), np.eye(3), data)
    h = joint_histogram(vol, vol, IDENTITY, RegistrationConfig(bins=4, sample_stride=1))
    # Four values, two voxels each: p = 1/4 per diagonal cell, H = 2 bits.
    assert mutual_information(h) == pytest.approx(2.0, abs=1e-12)
    hf, hm = marginal_entropies(h)
    assert hf == pytest.approx(2.0, abs=1e-12)
    assert mutual_information(h) == pytest.approx(hf, abs=1e-9)


def random_histogram(seed, bins=8):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 50, size=(bins, bins)).astype(float)
    counts[0, 0] += 1  # nonempty
    return JointHistogram(bins, counts, (0.0, 1.0), (0.0, 1.0), int(counts.sum()))


def test_mi_symmetric_under_transpose():
    for seed in range(5):
        h = random_histogram(seed)
        ht = JointHistogram(h.bins, h.counts.T.copy(), h.moving_range,
                            h.fixed_range, h.n_samples)
        assert abs(mutual_information(h) - mutual_information(ht)) <= 1e-12


def test_mi_bounded_by_marginal_entropies():
    for seed in range(10):
        h = random_histogram(seed)
        mi = mutual_information(h)
        hf, hm = marginal_entropies(h)
        assert 0.0 <= mi <= min(hf, hm) + 1e-9


def test_mi_invariant_under_bin_relabeling():
    rng = np.random.default_rng(11)
    for seed in range(5):
        h = random_histogram(seed)
        perm = rng.permutation(h.bins)
        hp = JointHistogram(h.bins, h.counts[perm].copy(), h.fixed_range,
                            h.moving_range, h.n_samples)
        assert abs(mutual_information(h) - mutual_information(hp)) <= 1e-12


def test_histogram_counts_must_sum():
    with pytest.raises(RegistrationError):
        JointHistogram(4, np.ones((4, 4)), (0, 1), (0, 1), n_samples=99)


# ---------------------------------------------------------------------------
# Rigid registration


def test_rigid_self_registration_stays_at_identity():
    vol = blob_volume()
    report = register_rigid_mi(vol, vol, IDENTITY,
                               RegistrationConfig(sample_stride=2))
    assert np.array_equal(report.final_transform.rotation, np.eye(3))
    assert np.array_equal(report.final_transform.translation, np.zeros(3))
    assert report.final_mi == report.initial_mi
    assert report.converged


def test_rigid_recovers_known_translation():
    fixed = blob_volume(seed=4)
    shift = np.array([4.5, -3.0, 2.0])
    # Same data, origin moved by -shift: true fixed->moving map is x - shift.
    moving = Volume(fixed.dims, fixed.spacing, fixed.origin - shift,
                    fixed.direction, fixed.data)
    cfg = RegistrationConfig(sample_stride=1)
    report = register_rigid_mi(fixed, moving, IDENTITY, cfg)
    err = np.abs(report.final_transform.translation - (-shift))
    assert np.all(err <= 0.5 * fixed.spacing)
    angle = np.arccos(np.clip((np.trace(report.final_transform.rotation) - 1) / 2, -1, 1))
    assert angle < np.deg2rad(1.0)
    assert report.final_mi >= report.initial_mi


def test_rigid_recovers_known_rotation():
    fixed = blob_volume(seed=5)
    angle = np.deg2rad(5.0)
    center = fixed.center_world()
    w_rot = RigidTransform.from_axis_angle([0, 0, 1], angle)
    warp = RigidTransform(w_rot.rotation, center - w_rot.rotation @ center)
    moving = resample_through(fixed, lambda p: rigid_apply(warp, p))
    report = register_rigid_mi(fixed, moving, IDENTITY,
                               RegistrationConfig(sample_stride=1))
    # Truth is the inverse warp: rotation by -5 degrees about the center.
    r = report.final_transform.rotation
    recovered = np.arctan2(r[1, 0], r[0, 0])
    assert abs(recovered - (-angle)) < np.deg2rad(0.5)


def test_rigid_empty_overlap_at_init_raises():
    vol = blob_volume(dims=(16, 16, 16))
    far = RigidTransform(np.eye(3), [5e3, 0.0, 0.0])
    with pytest.raises(EmptyOverlapError):
        register_rigid_mi(vol, vol, far, RegistrationConfig())


def test_rigid_trace_monotone_and_reported():
    fixed = blob_volume(seed=4)
    moving = Volume(fixed.dims, fixed.spacing, fixed.origin - np.array([3.0, 1.5, -2.0]),
                    fixed.direction, fixed.data)
    report = register_rigid_mi(fixed, moving, IDENTITY, RegistrationConfig())
    trace = np.array(report.mi_trace)
    assert trace[0] == report.initial_mi
    assert np.all(np.diff(trace) >= 0.0)
    assert report.final_mi == trace[-1]
    assert report.iterations > 0


def test_rigid_deterministic_bit_for_bit():
    fixed = blob_volume(seed=6)
    moving = Volume(fixed.dims, fixed.spacing, fixed.origin - np.array([2.0, -1.0, 1.0]),
                    fixed.direction, fixed.data)
    a = register_rigid_mi(fixed, moving, IDENTITY, RegistrationConfig())
    b = register_rigid_mi(fixed, moving, IDENTITY, RegistrationConfig())
    assert a.final_mi == b.final_mi
    assert a.initial_mi == b.initial_mi
    assert a.mi_trace == b.mi_trace
    assert np.array_equal(a.final_transform.rotation, b.final_transform.rotation)
    assert np.array_equal(a.final_transform.translation, b.final_transform.translation)


def test_report_rejects_mi_regression():
    with pytest.raises(RegistrationError):
        from petnav.mireg import RegistrationReport

        RegistrationReport(IDENTITY, initial_mi=1.0, final_mi=0.5,
                           iterations=1, converged=True)


# ---------------------------------------------------------------------------
# B-spline registration


def test_bspline_self_registration_keeps_zero_grid():
    vol = blob_volume(dims=(24, 24, 24), spacing=(2.0, 2.0, 2.0))
    cfg = RegistrationConfig(sample_stride=2, bspline_iterations=4)
    report = register_bspline_mi(vol, vol, IDENTITY, cfg)
    max_disp = np.abs(report.grid.displacements).max()
    assert max_disp < 0.1 * report.grid.grid_spacing.min()
    assert report.final_mi >= report.initial_mi


def test_bspline_empty_overlap_raises():
    vol = blob_volume(dims=(16, 16, 16))
    far = RigidTransform(np.eye(3), [5e3, 0.0, 0.0])
    with pytest.raises(EmptyOverlapError):
        register_bspline_mi(vol, vol, far, RegistrationConfig())


def test_bspline_recovers_smooth_warp():
    fixed = blob_volume(dims=(32, 32, 32), spacing=(2.0, 2.0, 2.0), seed=8)
    lo, hi = fixed.world_bounds()
    truth = BSplineGrid.covering(lo, hi, 20.0)
    gd = truth.grid_dims
    ii, jj, kk = np.meshgrid(*[np.arange(d) for d in gd], indexing="ij")
    disp = np.stack([
        4.0 * np.sin(2 * np.pi * ii / gd[0]) * np.cos(np.pi * jj / gd[1]),
        4.0 * np.cos(2 * np.pi * jj / gd[1]) * np.sin(np.pi * kk / gd[2]),
        -3.0 * np.sin(2 * np.pi * kk / gd[2]),
    ], axis=-1)
    truth = BSplineGrid(gd, truth.grid_origin, truth.grid_spacing, disp)
    moving = resample_through(fixed, lambda p: deformable_apply(IDENTITY, truth, p))

    cfg = RegistrationConfig(sample_stride=2, pyramid_levels=2, sweeps=2)
    rigid = register_rigid_mi(fixed, moving, IDENTITY, cfg).final_transform
    report = register_bspline_mi(fixed, moving, rigid, cfg)

    mse_rigid = intensity_mse(fixed, moving, lambda p: rigid_apply(rigid, p))
    mse_def = intensity_mse(
        fixed, moving, lambda p: deformable_apply(report.final_transform, report.grid, p))
    assert mse_def <= 0.5 * mse_rigid
    assert report.final_mi >= report.initial_mi - 1e-9
