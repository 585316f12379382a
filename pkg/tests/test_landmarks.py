import numpy as np
import pytest

from petnav.landmarks import (
    DegenerateConfigurationError,
    LandmarkError,
    LandmarkPair,
    LandmarkRegistrationResult,
    fiducial_registration_error,
    register_landmarks,
)
from petnav.transforms import RigidTransform, rigid_apply, rigid_compose, rigid_invert


def make_pairs(image_pts, transform):
    """Pairs whose tracker points map to the image points under `transform`."""
    inv = rigid_invert(transform)
    return [LandmarkPair(p, rigid_apply(inv, p), label=f"f{i}") for i, p in enumerate(image_pts)]


NONCOPLANAR = np.array([[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [0.0, 40.0, 0.0], [10.0, 10.0, 30.0]])


def test_pure_translation_recovered():
    t = RigidTransform(np.eye(3), [10.0, -5.0, 2.0])
    res = register_landmarks(make_pairs(NONCOPLANAR, t))
    assert np.abs(res.transform.rotation - np.eye(3)).max() < 1e-12
    assert np.abs(res.transform.translation - [10.0, -5.0, 2.0]).max() < 1e-12
    assert res.rmse < 1e-12


def test_rotation_90_plus_translation_recovered():
    t = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2, [5.0, 6.0, 7.0])
    res = register_landmarks(make_pairs(NONCOPLANAR, t))
    assert np.abs(res.transform.matrix4() - t.matrix4()).max() < 1e-9
    assert res.rmse <= 1e-9


def test_collinear_degenerate():
    pts = [LandmarkPair([i, 0, 0], [i, 0, 0]) for i in range(3)]
    with pytest.raises(DegenerateConfigurationError):
        register_landmarks(pts)


def test_coincident_degenerate():
    pts = [LandmarkPair([1, 2, 3], [4, 5, 6]) for _ in range(4)]
    with pytest.raises(DegenerateConfigurationError):
        register_landmarks(pts)


def test_too_few_pairs():
    with pytest.raises(LandmarkError):
        register_landmarks([LandmarkPair([0, 0, 0], [0, 0, 0])])


def test_coplanar_is_fine():
    pts = np.array([[0, 0, 0], [30, 0, 0], [0, 30, 0], [30, 30, 0.0]])
    t = RigidTransform.from_axis_angle([1, 1, 0], 0.4, [1.0, 2.0, 3.0])
    res = register_landmarks(make_pairs(pts, t))
    assert np.abs(res.transform.matrix4() - t.matrix4()).max() < 1e-9
    assert np.linalg.det(res.transform.rotation) > 0


def test_reflection_safety_under_noise():
    # near-planar points with noise that pushes the naive SVD solution improper
    rng = np.random.default_rng(0)
    base = np.array([[0, 0, 0], [20, 0, 0], [0, 20, 0], [20, 20, 0.001]])
    for _ in range(200):
        t = RigidTransform.from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi), rng.normal(size=3))
        pairs = []
        inv = rigid_invert(t)
        for p in base:
            noisy = p + rng.normal(scale=0.5, size=3)
            pairs.append(LandmarkPair(noisy, rigid_apply(inv, p)))
        res = register_landmarks(pairs)
        assert np.linalg.det(res.transform.rotation) > 0.999


def test_fre_recomputation_matches_solver():
    rng = np.random.default_rng(1)
    t = RigidTransform.from_axis_angle([1, 2, 3], 0.7, [4.0, -2.0, 9.0])
    pairs = make_pairs(NONCOPLANAR, t)
    # offset one image point by 2 mm
    moved = list(pairs)
    moved[1] = LandmarkPair(pairs[1].image_point + [2.0, 0.0, 0.0], pairs[1].tracker_point)
    res = register_landmarks(moved)
    assert res.rmse > 0
    assert abs(fiducial_registration_error(res, moved) - res.rmse) < 1e-12


def test_fre_perfect_pairs_zero():
    t = RigidTransform.identity()
    pairs = make_pairs(NONCOPLANAR, t)
    res = register_landmarks(pairs)
    assert fiducial_registration_error(res, pairs) < 1e-12


def test_fre_empty_error():
    res = register_landmarks(make_pairs(NONCOPLANAR, RigidTransform.identity()))
    with pytest.raises(LandmarkError):
        fiducial_registration_error(res, [])


def test_rmse_invariant_to_common_rigid_and_ordering():
    rng = np.random.default_rng(2)
    t = RigidTransform.from_axis_angle([0, 1, 0], 0.3, [1, 2, 3])
    pairs = make_pairs(NONCOPLANAR + rng.normal(scale=1.0, size=NONCOPLANAR.shape), t)
    base_rmse = register_landmarks(pairs).rmse

    q = RigidTransform.from_axis_angle([1, 0, 1], 1.1, [10, 20, 30])
    moved = [LandmarkPair(rigid_apply(q, p.image_point), rigid_apply(q, p.tracker_point), p.label)
             for p in pairs]
    assert abs(register_landmarks(moved).rmse - base_rmse) < 1e-9

    rng.shuffle(pairs)
    assert abs(register_landmarks(pairs).rmse - base_rmse) < 1e-12


def test_result_invariant_enforced():
    with pytest.raises(LandmarkError):
        LandmarkRegistrationResult(RigidTransform.identity(), 5.0, np.array([1.0, 1.0]))


def test_nonfinite_pair_rejected():
    with pytest.raises(LandmarkError):
        LandmarkPair([np.nan, 0, 0], [0, 0, 0])


def test_exact_recovery_property():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(3, 11)
        pts = rng.normal(scale=60.0, size=(n, 3))
        # reject near-collinear draws the same way the solver would
        c = pts - pts.mean(axis=0)
        if np.linalg.svd(c, compute_uv=False)[1] < 1.0:
            continue
        q = rng.normal(size=(3, 3))
        u, _, vt = np.linalg.svd(q)
        r = u @ vt
        if np.linalg.det(r) < 0:
            r[:, 2] *= -1
        t = RigidTransform(r, rng.normal(scale=80.0, size=3))
        res = register_landmarks(make_pairs(pts, t))
        assert np.abs(res.transform.matrix4() - t.matrix4()).max() < 1e-9
        assert res.rmse <= 1e-9
