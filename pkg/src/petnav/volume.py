"""Volume data model, NRRD-subset file I/O, geometry and sampling.

A Volume is a regular 3D scalar grid. data is indexed data[i, j, k] with i
the x index; on disk the payload is raw little-endian with x fastest, which
is the NRRD raw layout for sizes "nx ny nz". The voxel model is
node-centered: origin is the world position of the center of voxel
(0, 0, 0), and index_to_world(i) = origin + direction @ (spacing * i).

The file format is a NRRD0004 subset: text header with type / dimension /
sizes / space directions / space origin / endian / encoding fields, raw
payload. `space directions` carries direction * diag(spacing) column by
column. Because re-factoring that product into spacing and direction loses
the last bits, the writer also emits `spacing:=` / `direction:=` key-value
lines with full-precision components; the reader prefers them when they
agree with the standard field, which makes save/load round trips bit-exact
while staying readable by ordinary NRRD tools.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-9

_DTYPES = {"short": np.dtype("<i2"), "float": np.dtype("<f4")}
_TYPE_NAMES = {np.dtype("<i2"): "short", np.dtype("<f4"): "float"}
# accepted aliases for the two supported scalar types
_TYPE_ALIASES = {
    "short": "short", "int16": "short", "int16_t": "short", "signed short": "short",
    "float": "float", "float32": "float",
}


class Modality(enum.Enum):
    CT = "CT"
    PET = "PET"
    INTERVENTIONAL_CT = "INTERVENTIONAL_CT"


class VolumeError(ValueError):
    pass


class NrrdParseError(VolumeError):
    pass


class DimensionMismatchError(VolumeError):
    pass


OUTSIDE = None  # sample_trilinear marker for points off the grid


@dataclass(frozen=True)
class WindowLevel:
    """Display normalization: intensities in [level - window/2, level + window/2] map to [0, 1]."""

    window: float
    level: float

    def __post_init__(self):
        if not self.window > 0:
            raise VolumeError(f"window must be positive, got {self.window}")


@dataclass(frozen=True)
class Volume:
    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray
    data: np.ndarray = field(repr=False)
    modality: Modality = Modality.CT

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeError(f"dims must be 3 positive integers, got {dims}")
        spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        if np.any(spacing <= 0):
            raise VolumeError(f"spacing must be positive, got {spacing}")
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        direction = np.asarray(self.direction, dtype=float).reshape(3, 3)
        if np.abs(direction.T @ direction - np.eye(3)).max() > GEOM_TOL:
            raise VolumeError("direction matrix not orthonormal")
        data = np.asarray(self.data)
        if data.dtype not in _TYPE_NAMES:
            data = data.astype(np.float32)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeError(f"data size {data.size} != prod(dims) {np.prod(dims)}")
        data = data.reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "data", data)
        if not isinstance(self.modality, Modality):
            object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self):
        return self.dims

    def world_bounds(self):
        """Axis-aligned world bounding box of the 8 outer voxel centers."""
        corners = np.array([[i, j, k] for i in (0, self.dims[0] - 1)
                            for j in (0, self.dims[1] - 1)
                            for k in (0, self.dims[2] - 1)], dtype=float)
        w = index_to_world(self, corners)
        return w.min(axis=0), w.max(axis=0)

    def center_world(self):
        c = (np.array(self.dims, dtype=float) - 1.0) / 2.0
        return index_to_world(self, c)


def index_to_world(vol: Volume, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=float)
    if idx.ndim == 1:
        return vol.origin + vol.direction @ (vol.spacing * idx)
    return (idx * vol.spacing) @ vol.direction.T + vol.origin


def world_to_index(vol: Volume, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return (vol.direction.T @ (p - vol.origin)) / vol.spacing
    return ((p - vol.origin) @ vol.direction) / vol.spacing


def sample_trilinear(vol: Volume, p):
    """Trilinear sample at world point p; returns OUTSIDE (None) off the grid."""
    vals, inside = sample_trilinear_many(vol, np.asarray(p, dtype=float).reshape(1, 3))
    return float(vals[0]) if inside[0] else OUTSIDE


def sample_trilinear_many(vol: Volume, pts: np.ndarray):
    """Vectorized trilinear sampling.

    pts: (n, 3) world points. Returns (values, inside) where values[i] is
    valid only where inside[i]; outside points get 0.0 placeholders.
    """
    c = world_to_index(vol, pts)
    dims = np.array(vol.dims)
    # 1e-9 band so exact voxel centers survive world->index round-off
    inside = np.all((c >= -GEOM_TOL) & (c <= dims - 1.0 + GEOM_TOL), axis=1)
    cc = np.clip(np.where(inside[:, None], c, 0.0), 0.0, dims - 1.0)
    i0 = np.floor(cc).astype(np.int64)
    i0 = np.minimum(i0, dims - 2)          # voxel-exact upper face stays in range
    i0 = np.maximum(i0, 0)
    f = cc - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    d = vol.data
    v000 = d[x0, y0, z0]
    v100 = d[x0 + 1, y0, z0]
    v010 = d[x0, y0 + 1, z0]
    v110 = d[x0 + 1, y0 + 1, z0]
    v001 = d[x0, y0, z0 + 1]
    v101 = d[x0 + 1, y0, z0 + 1]
    v011 = d[x0, y0 + 1, z0 + 1]
    v111 = d[x0 + 1, y0 + 1, z0 + 1]
    c00 = v000 * (1 - fx) + v100 * fx
    c10 = v010 * (1 - fx) + v110 * fx
    c01 = v001 * (1 - fx) + v101 * fx
    c11 = v011 * (1 - fx) + v111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    vals = c0 * (1 - fz) + c1 * fz
    return np.where(inside, vals, 0.0).astype(float), inside


_AXES = {"axial": 2, "coronal": 1, "sagittal": 0}


def extract_slice(vol: Volume, axis: str, index: int, wl: WindowLevel) -> np.ndarray:
    """2D array in [0, 1] for the given slice.

    Orientation: axial (fixed z) -> rows y, cols x; coronal (fixed y) ->
    rows z, cols x; sagittal (fixed x) -> rows z, cols y.
    """
    if axis not in _AXES:
        raise VolumeError(f"axis must be one of {sorted(_AXES)}, got {axis!r}")
    ax = _AXES[axis]
    index = int(index)
    if not 0 <= index < vol.dims[ax]:
        raise VolumeError(f"slice index {index} out of range for axis {axis} (dims {vol.dims})")
    if axis == "axial":
        plane = vol.data[:, :, index].T          # (ny, nx)
    elif axis == "coronal":
        plane = vol.data[:, index, :].T          # (nz, nx)
    else:
        plane = vol.data[index, :, :].T          # (nz, ny)
    lo = wl.level - wl.window / 2.0
    return np.clip((plane.astype(float) - lo) / wl.window, 0.0, 1.0)


def slice_geometry(vol: Volume, axis: str, index: int):
    """World mapping of extract_slice pixels.

    Returns (origin_world, row_step_world, col_step_world, (n_rows, n_cols)):
    pixel (r, c) center lies at origin_world + r * row_step + c * col_step.
    """
    if axis not in _AXES:
        raise VolumeError(f"axis must be one of {sorted(_AXES)}, got {axis!r}")
    ax = _AXES[axis]
    if not 0 <= int(index) < vol.dims[ax]:
        raise VolumeError(f"slice index {index} out of range for axis {axis}")
    if axis == "axial":
        row_ax, col_ax = 1, 0
    elif axis == "coronal":
        row_ax, col_ax = 2, 0
    else:
        row_ax, col_ax = 2, 1
    base_idx = np.zeros(3)
    base_idx[ax] = index
    origin_world = index_to_world(vol, base_idx)
    row_step = vol.direction[:, row_ax] * vol.spacing[row_ax]
    col_step = vol.direction[:, col_ax] * vol.spacing[col_ax]
    return origin_world, row_step, col_step, (vol.dims[row_ax], vol.dims[col_ax])


def _colormap_gray(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[:, :, None], 3, axis=2)


def _colormap_hot(img: np.ndarray) -> np.ndarray:
    r = np.clip(3.0 * img, 0.0, 1.0)
    g = np.clip(3.0 * img - 1.0, 0.0, 1.0)
    b = np.clip(3.0 * img - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=2)


def blend_overlay(base: np.ndarray, overlay: np.ndarray, opacity: float, colormap: str = "HOT") -> np.ndarray:
    """Alpha-blend a colormapped overlay onto a grayscale base; both in [0, 1]."""
    base = np.asarray(base, dtype=float)
    overlay = np.asarray(overlay, dtype=float)
    if base.shape != overlay.shape:
        raise VolumeError(f"shape mismatch: base {base.shape} vs overlay {overlay.shape}")
    if not 0.0 <= opacity <= 1.0:
        raise VolumeError(f"opacity must be in [0, 1], got {opacity}")
    cmap = {"GRAY": _colormap_gray, "HOT": _colormap_hot}.get(str(colormap).upper())
    if cmap is None:
        raise VolumeError(f"unknown colormap {colormap!r}")
    return (1.0 - opacity) * _colormap_gray(base) + opacity * cmap(overlay)


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_vector(text: str, n: int) -> np.ndarray:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise NrrdParseError(f"malformed vector {text!r}")
    parts = text[1:-1].split(",")
    if len(parts) != n:
        raise NrrdParseError(f"vector {text!r} does not have {n} components")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise NrrdParseError(f"malformed vector {text!r}: {e}") from None


def save_volume(vol: Volume, path) -> None:
    """Write the NRRD-subset file. load_volume(save_volume(v)) is bit-exact."""
    sd_cols = [vol.direction[:, i] * vol.spacing[i] for i in range(3)]
    lines = [
        "NRRD0004",
        f"type: {_TYPE_NAMES[vol.data.dtype]}",
        "dimension: 3",
        "sizes: " + " ".join(str(d) for d in vol.dims),
        "space directions: " + " ".join("(" + ",".join(_fmt(x) for x in col) + ")" for col in sd_cols),
        "space origin: (" + ",".join(_fmt(x) for x in vol.origin) + ")",
        "endian: little",
        "encoding: raw",
        "modality:=" + vol.modality.value,
        "spacing:=" + " ".join(_fmt(x) for x in vol.spacing),
        "direction:=" + " ".join(_fmt(x) for x in vol.direction.ravel()),
    ]
    payload = np.ascontiguousarray(vol.data.T)   # x fastest on disk
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n\n").encode("ascii"))
        f.write(payload.tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise NrrdParseError("no blank line terminating the header")
    try:
        header_text = raw[:end].decode("ascii")
    except UnicodeDecodeError as e:
        raise NrrdParseError(f"header is not ASCII: {e}") from None
    payload = raw[end + 2:]
    lines = header_text.split("\n")
    if not lines or not lines[0].startswith("NRRD"):
        raise NrrdParseError("missing NRRD magic")
    fields = {}
    keyvals = {}
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:
            k, v = line.split(":=", 1)
            keyvals[k.strip()] = v.strip()
        elif ": " in line:
            k, v = line.split(": ", 1)
            fields[k.strip().lower()] = v.strip()
        else:
            raise NrrdParseError(f"malformed header line {line!r}")

    for required in ("type", "dimension", "sizes", "encoding"):
        if required not in fields:
            raise NrrdParseError(f"missing required field {required!r}")
    if fields["dimension"] != "3":
        raise NrrdParseError(f"unsupported dimension {fields['dimension']}")
    tname = _TYPE_ALIASES.get(fields["type"].lower())
    if tname is None:
        raise NrrdParseError(f"unsupported scalar type {fields['type']!r}")
    dtype = _DTYPES[tname]
    if fields["encoding"].lower() != "raw":
        raise NrrdParseError(f"unsupported encoding {fields['encoding']!r}")
    if fields.get("endian", "little").lower() != "little":
        raise NrrdParseError(f"unsupported endian {fields.get('endian')!r}")
    try:
        dims = tuple(int(s) for s in fields["sizes"].split())
    except ValueError:
        raise NrrdParseError(f"malformed sizes {fields['sizes']!r}") from None
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise NrrdParseError(f"sizes must be 3 positive integers, got {dims}")

    if "space directions" in fields:
        cols = fields["space directions"].split()
        if len(cols) != 3:
            raise NrrdParseError("space directions must have 3 vectors")
        sd = np.stack([_parse_vector(c, 3) for c in cols], axis=1)
        spacing = np.linalg.norm(sd, axis=0)
        if np.any(spacing <= 0):
            raise NrrdParseError("degenerate space directions")
        direction = sd / spacing
    elif "spacings" in fields:
        spacing = np.array([float(s) for s in fields["spacings"].split()])
        direction = np.eye(3)
    else:
        raise NrrdParseError("missing spacing information (space directions)")
    if "space origin" in fields:
        origin = _parse_vector(fields["space origin"], 3)
    else:
        origin = np.zeros(3)

    # exact decomposition written by save_volume wins when consistent
    if "spacing" in keyvals and "direction" in keyvals:
        try:
            sp = np.array([float(s) for s in keyvals["spacing"].split()])
            dr = np.array([float(s) for s in keyvals["direction"].split()]).reshape(3, 3)
        except ValueError:
            sp = dr = None
        if sp is not None and sp.shape == (3,) and np.allclose(dr * sp, direction * spacing, atol=1e-6):
            spacing, direction = sp, dr

    n_expected = dims[0] * dims[1] * dims[2]
    n_bytes = n_expected * dtype.itemsize
    if len(payload) != n_bytes:
        raise DimensionMismatchError(
            f"header declares {n_expected} voxels "
            f"({n_bytes} bytes) but payload has {len(payload)} bytes")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims[::-1]).T

    modality = Modality.CT
    if "modality" in keyvals:
        try:
            modality = Modality(keyvals["modality"])
        except ValueError:
            raise NrrdParseError(f"unknown modality {keyvals['modality']!r}") from None
    return Volume(dims, spacing, origin, direction, data, modality)
