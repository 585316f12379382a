"""Digital respiring-phantom stand-in with known ground truth.

Generates the three study volumes (compensated CT, compensated PET on the
same frame, interventional CT resampled through a true offset transform),
plus pose streams for a tracked needle whose tip follows a prescribed image
space trajectory.  Everything is procedural and seed-deterministic, so every
derived quantity (lesion position, fiducial locations, the full tracking
chain) has an exact truth value tests can measure against.

Intensities are HU-flavored for CT (air -1000, soft tissue ~40, ribs bright)
and arbitrary uptake units for PET (near-zero background, hot sphere at the
lesion).  Pose noise sigma is the total isotropic magnitude: per-axis
standard deviation is sigma/sqrt(3) so E[|n|^2] = sigma^2.
"""

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .pivot import PoseSample
from .transforms import RigidTransform, rigid_apply, rigid_compose, rigid_invert
from .volume import Modality, Volume, sample_trilinear_many

AIR_HU = -1000.0
DEFAULT_TIP_OFFSET = np.array([1.5, -2.0, 150.0])  # sensor frame, mm

# Liver blob relative to the body ellipsoid; fixed internal anatomy.
_LIVER_CENTER = np.array([16.0, 6.0, -8.0])
_LIVER_SEMI_AXES = np.array([30.0, 22.0, 26.0])

# Surface directions for the default fiducial set (unit-normalized below).
_FIDUCIAL_DIRS = np.array([
    [0.80, 0.55, 0.23],
    [-0.62, 0.70, -0.35],
    [0.10, -0.85, 0.51],
    [-0.45, -0.52, -0.72],
    [0.58, -0.20, 0.79],
])


class PhantomError(ValueError):
    pass


def _as_transform(value):
    if value is None:
        return RigidTransform.identity()
    if isinstance(value, RigidTransform):
        return value
    raise PhantomError(f"expected RigidTransform, got {type(value).__name__}")


@dataclass(frozen=True)
class PhantomConfig:
    volume_dims: tuple = (64, 64, 64)
    comp_ct_spacing: tuple = (2.0, 2.0, 2.0)
    pet_spacing: tuple = (4.0, 4.0, 4.0)
    interventional_spacing: tuple = (2.0, 2.0, 2.0)
    pet_dims: tuple = None              # default volume_dims // 2
    interventional_dims: tuple = None   # default volume_dims
    body_center: tuple = (0.0, 0.0, 0.0)
    body_semi_axes: tuple = (55.0, 45.0, 58.0)
    lesion_center: tuple = (18.0, 10.0, -12.0)
    lesion_radius: float = 6.0
    respiration_rate: float = 12.0      # breaths/min
    respiration_amplitude: float = 8.0  # mm, superior-inferior
    interventional_offset: RigidTransform = None  # comp-CT -> interventional
    tracker_to_image: RigidTransform = None
    fiducials: tuple = None             # image-space points; default on-surface
    pose_noise_sigma: float = 0.0
    stream_rate: float = 40.0           # Hz
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.volume_dims)
        if len(dims) != 3 or any(d < 8 for d in dims):
            raise PhantomError(f"volume_dims must be 3 ints >= 8, got {dims}")
        object.__setattr__(self, "volume_dims", dims)
        pet_dims = (tuple(max(d // 2, 8) for d in dims) if self.pet_dims is None
                    else tuple(int(d) for d in self.pet_dims))
        object.__setattr__(self, "pet_dims", pet_dims)
        int_dims = dims if self.interventional_dims is None else tuple(
            int(d) for d in self.interventional_dims)
        object.__setattr__(self, "interventional_dims", int_dims)
        for name in ("comp_ct_spacing", "pet_spacing", "interventional_spacing"):
            sp = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if np.any(sp <= 0):
                raise PhantomError(f"{name} must be positive, got {sp}")
            object.__setattr__(self, name, tuple(sp))
        for name, lo in (("respiration_rate", 0.0), ("respiration_amplitude", 0.0),
                         ("stream_rate", 0.0), ("lesion_radius", 0.0)):
            if not getattr(self, name) > lo:
                raise PhantomError(f"{name} must be positive")
        if self.pose_noise_sigma < 0:
            raise PhantomError("pose_noise_sigma cannot be negative")
        object.__setattr__(self, "body_center",
                           tuple(np.asarray(self.body_center, dtype=float)))
        semi = np.asarray(self.body_semi_axes, dtype=float).reshape(3)
        if np.any(semi <= 0):
            raise PhantomError("body semi-axes must be positive")
        object.__setattr__(self, "body_semi_axes", tuple(semi))
        object.__setattr__(self, "interventional_offset",
                           _as_transform(self.interventional_offset))
        object.__setattr__(self, "tracker_to_image",
                           _as_transform(self.tracker_to_image))

        lesion = np.asarray(self.lesion_center, dtype=float).reshape(3)
        rho = self._body_rho(lesion[None, :])[0]
        if rho >= 1.0 - self.lesion_radius / semi.min():
            raise PhantomError(
                f"lesion at normalized radius {rho:.2f} is not inside the body")
        object.__setattr__(self, "lesion_center", tuple(lesion))

        if self.fiducials is None:
            dirs = _FIDUCIAL_DIRS / np.linalg.norm(_FIDUCIAL_DIRS, axis=1, keepdims=True)
            surface = np.asarray(self.body_center) + dirs * semi
            fids = rigid_apply(self.interventional_offset, surface)
        else:
            fids = np.asarray(self.fiducials, dtype=float).reshape(-1, 3)
        if len(fids) < 4:
            raise PhantomError(f"need at least 4 fiducials, got {len(fids)}")
        on_body = self._body_rho(rigid_apply(rigid_invert(self.interventional_offset), fids))
        if np.any(np.abs(on_body - 1.0) > 0.1):
            raise PhantomError("fiducials must lie on the body surface")
        object.__setattr__(self, "fiducials", tuple(tuple(f) for f in fids))

    def _body_rho(self, pts: np.ndarray) -> np.ndarray:
        """Normalized ellipsoid radius: 1.0 on the body surface."""
        rel = (pts - np.asarray(self.body_center)) / np.asarray(self.body_semi_axes)
        return np.linalg.norm(rel, axis=1)


@dataclass(frozen=True)
class GroundTruth:
    """Every true quantity the simulator used, for oracle-grade assertions.

    The PET frame coincides with the compensated-CT frame, so
    lesion_comp_ct is also the lesion center in PET world coordinates.
    """

    interventional_offset: RigidTransform
    tracker_to_image: RigidTransform
    tip_offset: np.ndarray
    lesion_comp_ct: np.ndarray
    lesion_image: np.ndarray
    fiducials_comp_ct: np.ndarray
    fiducials_image: np.ndarray

    def __post_init__(self):
        for name in ("tip_offset", "lesion_comp_ct", "lesion_image"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float).reshape(3))
        for name in ("fiducials_comp_ct", "fiducials_image"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=float).reshape(-1, 3))
        mapped = rigid_apply(self.interventional_offset, self.lesion_comp_ct)
        if np.linalg.norm(mapped - self.lesion_image) > 1e-9:
            raise PhantomError("ground truth inconsistent: lesion frames disagree")
        mapped_f = rigid_apply(self.interventional_offset, self.fiducials_comp_ct)
        if np.abs(mapped_f - self.fiducials_image).max() > 1e-9:
            raise PhantomError("ground truth inconsistent: fiducial frames disagree")


def _smoothstep(edge0: float, edge1: float, x: np.ndarray) -> np.ndarray:
    """Hermite ramp 0 -> 1 between the edges; edge0 > edge1 inverts it."""
    t = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _centered_frame(dims, spacing):
    spacing = np.asarray(spacing, dtype=float)
    origin = -spacing * (np.asarray(dims, dtype=float) - 1.0) / 2.0
    return origin, np.eye(3)


def _grid_world_points(dims, spacing):
    origin, _ = _centered_frame(dims, spacing)
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _ct_pet_fields(cfg: PhantomConfig, pts: np.ndarray, fiducials_comp: np.ndarray):
    rho = cfg._body_rho(pts)
    body = _smoothstep(1.03, 0.97, rho)
    ct = AIR_HU + 1040.0 * body

    rel = (pts - _LIVER_CENTER) / _LIVER_SEMI_AXES
    liver = _smoothstep(1.06, 0.94, np.linalg.norm(rel, axis=1))
    ct = ct + 35.0 * liver

    r = np.linalg.norm(pts - np.asarray(cfg.lesion_center), axis=1) / cfg.lesion_radius
    lesion = _smoothstep(1.2, 0.8, r)
    ct = ct + 55.0 * lesion

    # Rib-like periodic shell bands near the surface.
    shell = _smoothstep(0.84, 0.90, rho) * _smoothstep(1.01, 0.95, rho)
    bands = np.clip(np.cos(2.0 * np.pi * pts[:, 2] / 26.0), 0.0, 1.0) ** 2
    ct = ct + 620.0 * shell * bands

    for f in fiducials_comp:
        ct = ct + 2800.0 * _smoothstep(3.5, 1.5, np.linalg.norm(pts - f, axis=1))

    pet = 2.0 * body + 95.0 * _smoothstep(1.25, 0.75, r)
    return ct, pet


def generate_phantom(cfg: PhantomConfig):
    """Build (comp_CT, comp_PET, interventional_CT, truth).

    comp_CT and comp_PET share one world frame; interventional_CT is the
    comp_CT content carried through cfg.interventional_offset and resampled
    on its own grid, so registering comp_CT to interventional_CT should
    recover the offset.
    """
    offset = cfg.interventional_offset
    fid_image = np.asarray(cfg.fiducials, dtype=float)
    fid_comp = rigid_apply(rigid_invert(offset), fid_image)

    dims = cfg.volume_dims
    spacing = np.asarray(cfg.comp_ct_spacing)
    pts = _grid_world_points(dims, spacing)
    ct_vals, _ = _ct_pet_fields(cfg, pts, fid_comp)
    origin, direction = _centered_frame(dims, spacing)
    comp_ct = Volume(dims, spacing, origin, direction,
                     ct_vals.astype(np.float32), Modality.CT)

    pet_dims = cfg.pet_dims
    pet_spacing = np.asarray(cfg.pet_spacing)
    pet_pts = _grid_world_points(pet_dims, pet_spacing)
    _, pet_vals = _ct_pet_fields(cfg, pet_pts, fid_comp)
    pet_origin, _ = _centered_frame(pet_dims, pet_spacing)
    comp_pet = Volume(pet_dims, pet_spacing, pet_origin, np.eye(3),
                      pet_vals.astype(np.float32), Modality.PET)

    int_dims = cfg.interventional_dims
    int_spacing = np.asarray(cfg.interventional_spacing)
    int_pts = _grid_world_points(int_dims, int_spacing)
    source_pts = rigid_apply(rigid_invert(offset), int_pts)
    vals, inside = sample_trilinear_many(comp_ct, source_pts)
    int_vals = np.where(inside, vals, AIR_HU)
    int_origin, _ = _centered_frame(int_dims, int_spacing)
    interventional = Volume(int_dims, int_spacing, int_origin, np.eye(3),
                            int_vals.astype(np.float32), Modality.INTERVENTIONAL_CT)

    lesion = np.asarray(cfg.lesion_center)
    truth = GroundTruth(
        interventional_offset=offset,
        tracker_to_image=cfg.tracker_to_image,
        tip_offset=DEFAULT_TIP_OFFSET.copy(),
        lesion_comp_ct=lesion,
        lesion_image=rigid_apply(offset, lesion),
        fiducials_comp_ct=fid_comp,
        fiducials_image=fid_image,
    )
    return comp_ct, comp_pet, interventional, truth


def respiration_displacement(t: float, rate: float, amplitude: float) -> float:
    """Superior-inferior displacement at time t, in mm.

    Raised cosine: 0 at end expiration (t=0), `amplitude` at peak
    inspiration, period 60/rate seconds.
    """
    if not (rate > 0 and amplitude > 0):
        raise PhantomError("rate and amplitude must be positive")
    return amplitude * (1.0 - np.cos(2.0 * np.pi * rate * t / 60.0)) / 2.0


def _axis_basis(axis) -> np.ndarray:
    """Rotation whose third column is the (normalized) axis."""
    d = np.asarray(axis, dtype=float).reshape(3)
    n = np.linalg.norm(d)
    if n == 0:
        raise PhantomError("needle axis must be nonzero")
    d = d / n
    h = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = h - (h @ d) * d
    x = x / np.linalg.norm(x)
    y = np.cross(d, x)
    return np.column_stack([x, y, d])


def pose_for_tip(truth: GroundTruth, tip_image, axis_image=(0.0, 0.0, 1.0),
                 timestamp: float = 0.0) -> PoseSample:
    """Sensor pose whose calibrated tip lands at tip_image with the given axis.

    Inverts the guidance chain: tip_image = t2i(R @ tip_offset + p) and the
    image-space needle axis is t2i.rotation @ R[:, 2].
    """
    t2i = truth.tracker_to_image
    r_img = _axis_basis(axis_image)
    r_pose = t2i.rotation.T @ r_img
    tip_tracker = rigid_apply(rigid_invert(t2i), np.asarray(tip_image, dtype=float))
    position = tip_tracker - r_pose @ truth.tip_offset
    return PoseSample(r_pose, position, timestamp)


def linear_insertion(entry, target, duration: float):
    """Trajectory: tip moves entry -> target over `duration` seconds, then holds."""
    entry = np.asarray(entry, dtype=float).reshape(3)
    target = np.asarray(target, dtype=float).reshape(3)
    axis = target - entry
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise PhantomError("degenerate insertion trajectory")
    axis = axis / norm

    def trajectory(t: float):
        s = np.clip(t / duration, 0.0, 1.0)
        return entry + s * (target - entry), axis

    return trajectory


def pivot_sweep(tip_image, half_angle: float = 0.35, turns: float = 2.0,
                duration: float = 5.0):
    """Trajectory: tip fixed at tip_image, axis sweeping a cone (pivoting)."""
    tip = np.asarray(tip_image, dtype=float).reshape(3)

    def trajectory(t: float):
        phi = 2.0 * np.pi * turns * t / duration
        axis = np.array([np.sin(half_angle) * np.cos(phi),
                         np.sin(half_angle) * np.sin(phi),
                         np.cos(half_angle)])
        return tip, axis

    return trajectory


def needle_poses(cfg: PhantomConfig, truth: GroundTruth, trajectory,
                 duration: float, respire: bool = False, start_time: float = 0.0,
                 noise_sigma: float = None, seed_salt: int = 1):
    """Pose sequence at cfg.stream_rate following the trajectory.

    trajectory: callable t -> (tip_image (3,), axis_image (3,)).  Respiration
    shifts the tip superior-inferior when enabled; static volumes are always
    motion-frozen.  Noise is added to sensor position only.
    """
    sigma = cfg.pose_noise_sigma if noise_sigma is None else float(noise_sigma)
    rng = np.random.default_rng([cfg.seed, seed_salt])
    n = int(round(duration * cfg.stream_rate)) + 1
    poses = []
    for k in range(n):
        t = k / cfg.stream_rate
        tip, axis = trajectory(t)
        tip = np.asarray(tip, dtype=float).copy()
        if respire:
            tip[2] += respiration_displacement(
                t, cfg.respiration_rate, cfg.respiration_amplitude)
        pose = pose_for_tip(truth, tip, axis, timestamp=start_time + t)
        if sigma > 0:
            noisy = pose.position + rng.normal(scale=sigma / np.sqrt(3.0), size=3)
            pose = PoseSample(pose.rotation, noisy, pose.timestamp)
        poses.append(pose)
    return poses


def stream_needle_poses(cfg: PhantomConfig, truth: GroundTruth, trajectory,
                        duration: float, out, device: str = "needle",
                        respire: bool = False, realtime: bool = False,
                        start_time: float = None, noise_sigma: float = None,
                        seed_salt: int = 1):
    """Emit the pose sequence to a tracker server (push interface) or file.

    Returns the emitted poses.  File format matches the pivot pose text
    format: 13 numbers per line (row-major rotation, position, timestamp).
    """
    if start_time is None:
        start_time = time.time() if realtime else 0.0
    poses = needle_poses(cfg, truth, trajectory, duration, respire=respire,
                         start_time=start_time, noise_sigma=noise_sigma,
                         seed_salt=seed_salt)
    if hasattr(out, "push"):
        period = 1.0 / cfg.stream_rate
        for p in poses:
            out.push(device, p.timestamp, RigidTransform(p.rotation, p.position))
            if realtime:
                time.sleep(period)
    else:
        with open(out, "w") as fh:
            for p in poses:
                nums = np.concatenate([p.rotation.ravel(), p.position, [p.timestamp]])
                fh.write(" ".join("%.17g" % v for v in nums) + "\n")
    return poses


def fiducial_touch_sequence(cfg: PhantomConfig, truth: GroundTruth,
                            noise_sigma: float = 0.0, seed_salt: int = 2):
    """(label, tracker-space tip point) for the needle touching each fiducial."""
    rng = np.random.default_rng([cfg.seed, seed_salt])
    inv = rigid_invert(truth.tracker_to_image)
    out = []
    for i, f in enumerate(truth.fiducials_image):
        p = rigid_apply(inv, f)
        if noise_sigma > 0:
            p = p + rng.normal(scale=noise_sigma / np.sqrt(3.0), size=3)
        out.append((f"F{i + 1}", p))
    return out


def _fmt_transform(t: RigidTransform) -> str:
    nums = np.hstack([t.rotation, t.translation[:, None]]).ravel()
    return " ".join("%.17g" % v for v in nums)


def _parse_transform(text: str) -> RigidTransform:
    nums = np.array([float(v) for v in text.split()])
    if nums.size != 12:
        raise PhantomError(f"transform needs 12 numbers, got {nums.size}")
    m = nums.reshape(3, 4)
    return RigidTransform(m[:, :3], m[:, 3])


def save_truth(truth: GroundTruth, path) -> None:
    """Plain-text key/value truth file (one transform or point per line)."""
    lines = [
        "interventional_offset = " + _fmt_transform(truth.interventional_offset),
        "tracker_to_image = " + _fmt_transform(truth.tracker_to_image),
        "tip_offset = " + " ".join("%.17g" % v for v in truth.tip_offset),
        "lesion_comp_ct = " + " ".join("%.17g" % v for v in truth.lesion_comp_ct),
        "lesion_image = " + " ".join("%.17g" % v for v in truth.lesion_image),
    ]
    for i, f in enumerate(truth.fiducials_image):
        lines.append(f"fiducial_image_{i + 1} = " + " ".join("%.17g" % v for v in f))
    for i, f in enumerate(truth.fiducials_comp_ct):
        lines.append(f"fiducial_comp_ct_{i + 1} = " + " ".join("%.17g" % v for v in f))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_truth(path) -> GroundTruth:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    try:
        fid_img = [entries[k] for k in sorted(entries) if k.startswith("fiducial_image_")]
        fid_comp = [entries[k] for k in sorted(entries) if k.startswith("fiducial_comp_ct_")]
        return GroundTruth(
            interventional_offset=_parse_transform(entries["interventional_offset"]),
            tracker_to_image=_parse_transform(entries["tracker_to_image"]),
            tip_offset=[float(v) for v in entries["tip_offset"].split()],
            lesion_comp_ct=[float(v) for v in entries["lesion_comp_ct"].split()],
            lesion_image=[float(v) for v in entries["lesion_image"].split()],
            fiducials_image=[[float(v) for v in f.split()] for f in fid_img],
            fiducials_comp_ct=[[float(v) for v in f.split()] for f in fid_comp],
        )
    except KeyError as exc:
        raise PhantomError(f"truth file missing key {exc}") from None


def config_to_dict(cfg: PhantomConfig) -> dict:
    d = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, RigidTransform):
            v = [float(x) for x in np.hstack([v.rotation, v.translation[:, None]]).ravel()]
        elif f.name == "fiducials":
            v = [[float(x) for x in p] for p in v]
        elif isinstance(v, tuple):
            v = list(v)
        d[f.name] = v
    return d


def config_from_dict(d: dict) -> PhantomConfig:
    kwargs = dict(d)
    for name in ("interventional_offset", "tracker_to_image"):
        if name in kwargs and kwargs[name] is not None:
            nums = np.asarray(kwargs[name], dtype=float).reshape(3, 4)
            kwargs[name] = RigidTransform(nums[:, :3], nums[:, 3])
    known = {f.name for f in dataclasses.fields(PhantomConfig)}
    unknown = set(kwargs) - known
    if unknown:
        raise PhantomError(f"unknown config fields: {sorted(unknown)}")
    return PhantomConfig(**kwargs)
