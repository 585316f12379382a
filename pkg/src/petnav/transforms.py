"""Rigid and B-spline free-form deformation transforms.

Coordinate frames are always metric (mm). A RigidTransform maps points as
R @ p + t. A BSplineGrid holds a regular lattice of control-point
displacement vectors; the dense displacement field is the cubic
tensor-product interpolation of those vectors. The deformable mapping used
for registration is rigid-then-displacement: the field is evaluated at the
rigidly mapped point and added to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class TransformError(ValueError):
    pass


def _check_rotation(rotation: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=float)
    if rotation.shape != (3, 3):
        raise TransformError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise TransformError("rotation contains non-finite entries")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > tol:
        raise TransformError(f"rotation not orthonormal (max deviation {err:.3e})")
    det = np.linalg.det(rotation)
    if abs(det - 1.0) > max(tol, 1e-9):
        raise TransformError(f"rotation determinant {det} != +1")
    return rotation


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: rotation (det +1 orthonormal 3x3) plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise TransformError("translation contains non-finite entries")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation of angle_rad about the (normalized) axis, plus translation."""
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0:
            raise TransformError("axis must be nonzero")
        ux, uy, uz = axis / n
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        K = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
        R = np.eye(3) + s * K + (1.0 - c) * (K @ K)
        # Renormalize so the orthonormality check passes at tight tolerance.
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return RigidTransform(R, np.asarray(translation, dtype=float))

    def matrix4(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rigid_apply(t: RigidTransform, p) -> np.ndarray:
    """Apply the transform to one point (3,) or many points (n, 3)."""
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return t.rotation @ p + t.translation
    return p @ t.rotation.T + t.translation


def rigid_compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: apply b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rigid_invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


# Cubic uniform B-spline blending weights.  Valid for u in [0, 1]; the
# public bspline_basis restricts to [0, 1) per the transform contract, the
# internal evaluator also needs u == 1 at the upper support edge.

def _basis_unchecked(u):
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    b0 = (1.0 - u) ** 3 / 6.0
    b1 = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
    b2 = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
    b3 = u3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=-1)


def bspline_basis(u: float) -> np.ndarray:
    """The four cubic blending weights at fractional cell coordinate u in [0, 1)."""
    if not 0.0 <= u < 1.0:
        raise TransformError(f"basis parameter {u} outside [0, 1)")
    return _basis_unchecked(u)


@dataclass(frozen=True)
class BSplineGrid:
    """Regular control-point lattice of displacement vectors (mm).

    Control point (i, j, k) sits at grid_origin + (i, j, k) * grid_spacing.
    The dense field is supported where a full 4x4x4 neighborhood exists,
    i.e. for local coordinates u in [1, n-2] along each axis; a grid built
    with one control-point margin around the image domain keeps the whole
    image inside that support.
    """

    grid_dims: tuple
    grid_origin: np.ndarray
    grid_spacing: np.ndarray
    displacements: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        if len(dims) != 3 or any(d < 4 for d in dims):
            raise TransformError(f"grid_dims must be 3 integers >= 4, got {dims}")
        origin = np.asarray(self.grid_origin, dtype=float).reshape(3)
        spacing = np.asarray(self.grid_spacing, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise TransformError("grid_spacing must be positive")
        disp = np.asarray(self.displacements, dtype=float)
        if disp.shape != dims + (3,):
            disp = disp.reshape(dims + (3,))
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "grid_origin", origin)
        object.__setattr__(self, "grid_spacing", spacing)
        object.__setattr__(self, "displacements", disp)

    @staticmethod
    def zeros(grid_dims, grid_origin, grid_spacing) -> "BSplineGrid":
        dims = tuple(int(d) for d in grid_dims)
        return BSplineGrid(dims, grid_origin, grid_spacing, np.zeros(dims + (3,)))

    @staticmethod
    def covering(lo, hi, spacing) -> "BSplineGrid":
        """Zero grid whose support contains the box [lo, hi], margin included."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        extent = np.maximum(hi - lo, 0.0)
        # support needs u in [1, n-2]: origin one cell below lo, n = ceil(extent/h) + 3
        dims = tuple(int(np.ceil(e / h)) + 3 for e, h in zip(extent, spacing))
        dims = tuple(max(d, 4) for d in dims)
        origin = lo - spacing
        return BSplineGrid.zeros(dims, origin, spacing)


def _support_cells(g: BSplineGrid, p: np.ndarray):
    """Cell index and fractional coordinate for points (n, 3); raises if outside support."""
    u = (p - g.grid_origin) / g.grid_spacing
    dims = np.array(g.grid_dims)
    if np.any(u < 1.0 - 1e-12) or np.any(u > dims - 2.0 + 1e-12):
        raise TransformError("point outside B-spline grid support")
    cell = np.floor(u).astype(int)
    cell = np.minimum(np.maximum(cell, 1), dims - 3)
    frac = u - cell
    return cell, np.clip(frac, 0.0, 1.0)


def bspline_displacement(g: BSplineGrid, p) -> np.ndarray:
    """Displacement vector(s) at world point(s) p inside the grid support."""
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    cell, frac = _support_cells(g, pts)
    wx = _basis_unchecked(frac[:, 0])   # (n, 4)
    wy = _basis_unchecked(frac[:, 1])
    wz = _basis_unchecked(frac[:, 2])
    out = np.zeros((len(pts), 3))
    for a in range(4):
        ia = cell[:, 0] + a - 1
        for b in range(4):
            jb = cell[:, 1] + b - 1
            wab = wx[:, a] * wy[:, b]
            for c in range(4):
                kc = cell[:, 2] + c - 1
                w = wab * wz[:, c]
                out += w[:, None] * g.displacements[ia, jb, kc]
    return out[0] if single else out


def deformable_apply(rigid: RigidTransform, g: BSplineGrid, p) -> np.ndarray:
    """Rigid pre-alignment followed by the additive displacement field."""
    q = rigid_apply(rigid, p)
    return q + bspline_displacement(g, q)
