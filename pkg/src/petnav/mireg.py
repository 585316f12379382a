"""Mutual-information registration: histogram metric, rigid and B-spline stages.

The metric is plain joint-histogram MI in bits (nearest-bin accumulation,
per-volume min/max range).  The rigid stage runs coordinate-wise
golden-section refinement over ZYX Euler angles about the fixed-image center
plus translation, inside a mean-pooled multiresolution pyramid.  The
deformable stage runs gradient ascent on B-spline control displacements with
finite central differences.  Everything is deterministic: fixed sampling
grids, fixed sweep order, no stochastic draws.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from .transforms import (
    BSplineGrid,
    RigidTransform,
    _basis_unchecked,
    _support_cells,
    rigid_apply,
    rigid_compose,
)
from .volume import Volume, sample_trilinear_many

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class RegistrationError(Exception):
    pass


class EmptyOverlapError(RegistrationError):
    """No (or too few) sampled fixed voxels land inside the moving volume."""


@dataclass(frozen=True)
class RegistrationConfig:
    bins: int = 32
    sample_stride: int = 2
    pyramid_levels: int = 3
    sweeps: int = 6                  # coordinate sweeps per pyramid level
    line_search_iters: int = 18
    rot_bracket_rad: float = 0.1     # finest-level half bracket, scaled by level factor
    trans_bracket_voxels: float = 4.0
    tol_bits: float = 1e-4           # sweep gain below this ends a level
    min_overlap_fraction: float = 0.25
    grid_spacing: float = 0.0        # mm; 0 means grid_spacing_voxels is used
    grid_spacing_voxels: float = 8.0
    bspline_iterations: int = 12
    bspline_step_mm: float = 2.0     # step i moves max coordinate by step*0.5^(i//4)
    bspline_grad_epsilon: float = 0.5

    def __post_init__(self):
        if self.bins < 2:
            raise RegistrationError(f"bins must be >= 2, got {self.bins}")
        for name in ("sample_stride", "pyramid_levels", "sweeps", "line_search_iters",
                     "rot_bracket_rad", "trans_bracket_voxels", "tol_bits",
                     "min_overlap_fraction", "grid_spacing_voxels",
                     "bspline_iterations", "bspline_step_mm", "bspline_grad_epsilon"):
            if getattr(self, name) <= 0:
                raise RegistrationError(f"{name} must be positive")
        if self.grid_spacing < 0:
            raise RegistrationError("grid_spacing must be nonnegative")


@dataclass(frozen=True)
class JointHistogram:
    bins: int
    counts: np.ndarray = field(repr=False)
    fixed_range: tuple
    moving_range: tuple
    n_samples: int
    n_outside: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.shape != (self.bins, self.bins):
            raise RegistrationError(f"counts must be {self.bins}x{self.bins}")
        if self.bins < 2 or self.n_samples <= 0:
            raise RegistrationError("need bins >= 2 and n_samples > 0")
        if abs(counts.sum() - self.n_samples) > 1e-6:
            raise RegistrationError("histogram counts do not sum to n_samples")
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class RegistrationReport:
    final_transform: RigidTransform
    initial_mi: float
    final_mi: float
    iterations: int
    converged: bool
    grid: BSplineGrid = None
    mi_trace: tuple = ()

    def __post_init__(self):
        if not self.final_mi >= self.initial_mi - 1e-9:
            raise RegistrationError("final MI fell below initial MI")


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.intp)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _mi_from_counts(counts: np.ndarray, n: float) -> float:
    p = counts / n
    pf = p.sum(axis=1)
    pm = p.sum(axis=0)
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / np.outer(pf, pm)[nz])))


def mutual_information(h: JointHistogram) -> float:
    """MI in bits: sum p(f,m) log2(p(f,m) / (p(f) p(m))), 0 log 0 := 0."""
    return _mi_from_counts(h.counts, h.n_samples)


def marginal_entropies(h: JointHistogram):
    """(H_fixed, H_moving) in bits."""
    out = []
    for axis in (1, 0):
        p = h.counts.sum(axis=axis) / h.n_samples
        p = p[p > 0]
        out.append(float(-np.sum(p * np.log2(p))))
    return tuple(out)


class _Sampler:
    """Strided fixed-voxel sample set against one moving volume.

    margin excludes boundary voxels.  The optimizers sample with margin 1 so
    that sub-voxel motion cannot change which samples land inside the moving
    volume: with the accepted set constant, MI <= H(fixed marginal) makes
    perfect alignment an exact metric maximum instead of a razor-thin one
    beaten by boundary-clipping artifacts.
    """

    def __init__(self, fixed: Volume, moving: Volume, cfg: RegistrationConfig,
                 stride=None, margin: int = 0):
        stride = cfg.sample_stride if stride is None else stride
        ii, jj, kk = np.meshgrid(
            *[np.arange(min(margin, d - 1), max(d - margin, min(margin, d - 1) + 1), stride)
              for d in fixed.dims], indexing="ij")
        idx = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
        self.points = (fixed.origin
                       + (idx * fixed.spacing) @ fixed.direction.T)
        fixed_vals = fixed.data[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
        self.fixed_range = (float(fixed.data.min()), float(fixed.data.max()))
        self.moving_range = (float(moving.data.min()), float(moving.data.max()))
        self.bins = cfg.bins
        self.fixed_bins = _bin_indices(fixed_vals, *self.fixed_range, cfg.bins)
        self.moving = moving
        self.n_drawn = len(idx)
        self.min_accept = cfg.min_overlap_fraction * self.n_drawn

    def map_points(self, t):
        if isinstance(t, RigidTransform):
            return rigid_apply(t, self.points)
        return t(self.points)

    def histogram(self, t):
        """(counts, n_accepted, n_outside) under fixed->moving transform t."""
        vals, inside = sample_trilinear_many(self.moving, self.map_points(t))
        n = int(inside.sum())
        if n == 0:
            return None, 0, self.n_drawn
        mb = _bin_indices(vals[inside], *self.moving_range, self.bins)
        flat = self.fixed_bins[inside] * self.bins + mb
        counts = np.bincount(flat, minlength=self.bins * self.bins)
        return counts.astype(float).reshape(self.bins, self.bins), n, self.n_drawn - n

    def mi(self, t) -> float:
        """Metric value; -inf marks a rejected (out-of-overlap) candidate."""
        counts, n, _ = self.histogram(t)
        if counts is None or n < self.min_accept:
            return -np.inf
        return _mi_from_counts(counts, n)


def joint_histogram(fixed: Volume, moving: Volume, t, cfg: RegistrationConfig) -> JointHistogram:
    """Accumulate (fixed_bin, moving_bin) over strided fixed voxels mapped by t.

    t maps fixed-world to moving-world (RigidTransform or point-mapping
    callable).  Samples landing outside the moving volume are skipped and
    reported in n_outside.
    """
    s = _Sampler(fixed, moving, cfg)
    counts, n, n_outside = s.histogram(t)
    if counts is None:
        raise EmptyOverlapError("no sampled fixed voxel maps inside the moving volume")
    return JointHistogram(
        bins=cfg.bins,
        counts=counts,
        fixed_range=s.fixed_range,
        moving_range=s.moving_range,
        n_samples=n,
        n_outside=n_outside,
    )


# ---------------------------------------------------------------------------
# Rigid stage


def _euler_zyx(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _param_transform(params, center, init: RigidTransform) -> RigidTransform:
    """init composed with a correction rotating about the fixed-image center."""
    r = _euler_zyx(params[0], params[1], params[2])
    correction = RigidTransform(r, params[3:6] + center - r @ center)
    return rigid_compose(init, correction)


def _golden_max(f, lo: float, hi: float, iters: int):
    """Deterministic golden-section maximization; returns best (x, f(x)) probed."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best_x, best_v = (c, fc) if fc >= fd else (d, fd)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
            x, v = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
            x, v = d, fd
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v


def _downsample(vol: Volume, factor: int) -> Volume:
    if factor == 1:
        return vol
    dims = tuple((d // factor) for d in vol.dims)
    if any(d < 2 for d in dims):
        return vol
    trimmed = vol.data[: dims[0] * factor, : dims[1] * factor, : dims[2] * factor]
    blocks = trimmed.reshape(dims[0], factor, dims[1], factor, dims[2], factor)
    pooled = blocks.astype(float).mean(axis=(1, 3, 5))
    # Block centers sit half a block in from the original voxel centers.
    origin = vol.origin + vol.direction @ (vol.spacing * (factor - 1) / 2.0)
    return Volume(dims, vol.spacing * factor, origin, vol.direction, pooled, vol.modality)


def register_rigid_mi(fixed: Volume, moving: Volume, init: RigidTransform,
                      cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationReport:
    """Maximize MI over 6 rigid parameters (ZYX Euler about the fixed center).

    Coordinate-wise golden-section refinement inside a mean-pooled pyramid.
    Each pyramid level's result is accepted only if it improves the metric at
    the finest level, which keeps the reported MI trace nondecreasing.
    """
    center = fixed.center_world()
    finest = _Sampler(fixed, moving, cfg, margin=1)
    counts, n, _ = finest.histogram(init)
    if counts is None or n < finest.min_accept:
        raise EmptyOverlapError(
            f"initial overlap too small: {n}/{finest.n_drawn} samples accepted")
    initial_mi = _mi_from_counts(counts, n)

    params = np.zeros(6)
    best_finest = initial_mi
    trace = [initial_mi]
    iterations = 0
    converged = False
    mean_spacing = float(np.mean(fixed.spacing))

    for level in range(cfg.pyramid_levels):
        factor = 2 ** (cfg.pyramid_levels - 1 - level)
        fixed_l = _downsample(fixed, factor)
        moving_l = _downsample(moving, factor)
        sampler = (_Sampler(fixed_l, moving_l, cfg, stride=1, margin=1)
                   if factor > 1 else finest)
        converged = False

        def level_mi(p):
            return sampler.mi(_param_transform(p, center, init))

        cand = params.copy()
        cand_v = level_mi(cand)
        rot_h = cfg.rot_bracket_rad * factor
        trans_h = cfg.trans_bracket_voxels * factor * mean_spacing
        brackets = np.array([rot_h] * 3 + [trans_h] * 3)
        for _ in range(cfg.sweeps):
            sweep_start = cand_v
            for j in range(6):
                def along(x, j=j):
                    p = cand.copy()
                    p[j] = x
                    return level_mi(p)

                x, v = _golden_max(along, cand[j] - brackets[j],
                                   cand[j] + brackets[j], cfg.line_search_iters)
                iterations += 1
                if v > cand_v + 1e-12:
                    cand[j] = x
                    cand_v = v
            # 18 golden iterations localize a bracket to ~2e-4 of its width,
            # so a sweep that stops paying off means the level is done.
            if cand_v - sweep_start < cfg.tol_bits:
                converged = True
                break

        v_finest = finest.mi(_param_transform(cand, center, init))
        if v_finest > best_finest + 1e-12:
            params = cand
            best_finest = v_finest
            trace.append(v_finest)

    final_t = _param_transform(params, center, init)
    final_mi = best_finest
    if final_mi < initial_mi:
        return RegistrationReport(init, initial_mi, initial_mi, iterations, False,
                                  mi_trace=(initial_mi,))
    return RegistrationReport(final_t, initial_mi, final_mi, iterations, converged,
                              mi_trace=tuple(trace))


# ---------------------------------------------------------------------------
# B-spline stage


class _BsplineMetric:
    """Histogram MI as a function of control displacements.

    The mapped point is linear in the displacements: m_k = q_k + (W d)_k with
    constant weights W, so each control point keeps a sparse list of the
    samples it touches and a probe re-bins only those samples.
    """

    def __init__(self, sampler: _Sampler, grid: BSplineGrid, q: np.ndarray):
        self.s = sampler
        self.grid = grid
        self.q = q
        n = len(q)
        gdims = self.grid.grid_dims
        cell, frac = _support_cells(self.grid, q)
        wx = _basis_unchecked(frac[:, 0])
        wy = _basis_unchecked(frac[:, 1])
        wz = _basis_unchecked(frac[:, 2])
        cols = np.empty((n, 64), dtype=np.intp)
        vals = np.empty((n, 64))
        m = 0
        for a in range(4):
            ia = cell[:, 0] + a - 1
            for b in range(4):
                jb = cell[:, 1] + b - 1
                wab = wx[:, a] * wy[:, b]
                for c in range(4):
                    kc = cell[:, 2] + c - 1
                    cols[:, m] = (ia * gdims[1] + jb) * gdims[2] + kc
                    vals[:, m] = wab * wz[:, c]
                    m += 1
        rows = np.repeat(np.arange(n), 64)
        n_ctrl = gdims[0] * gdims[1] * gdims[2]
        self.W = scipy.sparse.csc_matrix(
            (vals.ravel(), (rows, cols.ravel())), shape=(n, n_ctrl))

    def mapped(self, d_flat: np.ndarray) -> np.ndarray:
        return self.q + self.W @ d_flat

    def state(self, d_flat: np.ndarray):
        """Full evaluation: per-sample bins/inside plus histogram and MI."""
        vals, inside = sample_trilinear_many(self.s.moving, self.mapped(d_flat))
        mb = np.zeros(len(vals), dtype=np.intp)
        mb[inside] = _bin_indices(vals[inside], *self.s.moving_range, self.s.bins)
        n = int(inside.sum())
        if n == 0:
            return None
        flat = self.s.fixed_bins[inside] * self.s.bins + mb[inside]
        counts = np.bincount(flat, minlength=self.s.bins ** 2).astype(float)
        counts = counts.reshape(self.s.bins, self.s.bins)
        return {"inside": inside, "mb": mb, "counts": counts, "n": n,
                "mi": _mi_from_counts(counts, n)}

    def probe(self, base, mapped_base: np.ndarray, col: int, axis: int,
              eps: float) -> float:
        """MI after displacing control `col` by eps along `axis` only."""
        sl = slice(self.W.indptr[col], self.W.indptr[col + 1])
        rows = self.W.indices[sl]
        if len(rows) == 0:
            return base["mi"]
        w = self.W.data[sl]
        pts = mapped_base[rows].copy()
        pts[:, axis] += eps * w
        vals, inside = sample_trilinear_many(self.s.moving, pts)
        mb = np.zeros(len(rows), dtype=np.intp)
        mb[inside] = _bin_indices(vals[inside], *self.s.moving_range, self.s.bins)
        old_inside = base["inside"][rows]
        old_mb = base["mb"][rows]
        fb = self.s.fixed_bins[rows]
        counts = base["counts"].copy()
        nbins = self.s.bins
        sub = np.bincount(fb[old_inside] * nbins + old_mb[old_inside],
                          minlength=nbins * nbins)
        add = np.bincount(fb[inside] * nbins + mb[inside],
                          minlength=nbins * nbins)
        counts += (add - sub).reshape(nbins, nbins)
        n = base["n"] - int(old_inside.sum()) + int(inside.sum())
        if n <= 0:
            return -np.inf
        return _mi_from_counts(counts, n)


def register_bspline_mi(fixed: Volume, moving: Volume, rigid_init: RigidTransform,
                        cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationReport:
    """Gradient-ascend control displacements from a zero grid atop rigid_init.

    Central-difference gradient per control coordinate using incremental
    histogram updates; a fixed geometric step schedule, each step accepted
    only if the fully re-evaluated metric improves.
    """
    sampler = _Sampler(fixed, moving, cfg, margin=1)
    q = sampler.map_points(rigid_init)
    vals, inside = sample_trilinear_many(moving, q)
    n = int(inside.sum())
    if n == 0 or n < sampler.min_accept:
        raise EmptyOverlapError(
            f"initial overlap too small: {n}/{sampler.n_drawn} samples accepted")

    if cfg.grid_spacing > 0:
        spacing = np.full(3, cfg.grid_spacing)
    else:
        spacing = cfg.grid_spacing_voxels * fixed.spacing
    # Support the rigid image of the whole fixed box, not just the samples,
    # so the returned grid can be applied at any fixed voxel.
    lo_f, hi_f = fixed.world_bounds()
    corners = np.array([[x, y, z] for x in (lo_f[0], hi_f[0])
                        for y in (lo_f[1], hi_f[1])
                        for z in (lo_f[2], hi_f[2])])
    mapped_corners = rigid_apply(rigid_init, corners)
    grid = BSplineGrid.covering(mapped_corners.min(axis=0),
                                mapped_corners.max(axis=0), spacing)
    n_ctrl = int(np.prod(grid.grid_dims))

    metric = _BsplineMetric(sampler, grid, q)
    d = np.zeros((n_ctrl, 3))
    base = metric.state(d)
    initial_mi = base["mi"]
    trace = [initial_mi]
    eps = cfg.bspline_grad_epsilon
    iterations = 0
    converged = False

    active = [c for c in range(n_ctrl)
              if metric.W.indptr[c + 1] > metric.W.indptr[c]]
    schedule = [cfg.bspline_step_mm * 0.5 ** (i // 4)
                for i in range(cfg.bspline_iterations)]
    it = 0
    grad = None
    while it < len(schedule):
        if grad is None:
            mapped_base = metric.mapped(d)
            grad = np.zeros((n_ctrl, 3))
            for c in active:
                for axis in range(3):
                    up = metric.probe(base, mapped_base, c, axis, +eps)
                    dn = metric.probe(base, mapped_base, c, axis, -eps)
                    grad[c, axis] = (up - dn) / (2.0 * eps)
            iterations += 1
            gmax = np.abs(grad).max()
            if gmax == 0.0:
                converged = True
                break
        step = schedule[it]
        cand = d + step * grad / gmax
        cand_state = metric.state(cand)
        if cand_state is not None and cand_state["mi"] > base["mi"] + 1e-12:
            d = cand
            base = cand_state
            trace.append(base["mi"])
            grad = None
            it += 1
        else:
            # The same gradient at the same step would fail identically, so
            # fast-forward to the next smaller step in the schedule.
            smaller = [j for j in range(it + 1, len(schedule)) if schedule[j] < step]
            if not smaller:
                converged = True
                break
            it = smaller[0]

    final_grid = BSplineGrid(grid.grid_dims, grid.grid_origin, grid.grid_spacing,
                             d.reshape(grid.grid_dims + (3,)))
    return RegistrationReport(rigid_init, initial_mi, base["mi"], iterations,
                              converged, grid=final_grid, mi_trace=tuple(trace))
