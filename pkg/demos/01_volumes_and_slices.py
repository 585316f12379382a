"""Volumes: generation, file round trip, trilinear sampling, slice display.

Generates the digital phantom, writes the three scans to NRRD, reads one
back bit-exactly, samples along a ray through the lesion, and renders a
fused axial slice to PNG.
"""

import tempfile
from pathlib import Path

import numpy as np

from petnav.phantom import PhantomConfig, generate_phantom
from petnav.volume import (WindowLevel, blend_overlay, extract_slice,
                           load_volume, sample_trilinear, save_volume,
                           slice_geometry, sample_trilinear_many)

work = Path(tempfile.mkdtemp(prefix="nav_volumes_"))
cfg = PhantomConfig()
ct, pet, inter, truth = generate_phantom(cfg)
print(f"phantom volumes: CT {ct.dims} @ {tuple(map(float, ct.spacing))} mm, "
      f"PET {pet.dims} @ {tuple(map(float, pet.spacing))} mm")

# -- file round trip ---------------------------------------------------------
save_volume(ct, work / "comp_ct.nrrd")
back = load_volume(work / "comp_ct.nrrd")
print(f"NRRD round trip bit-exact: {np.array_equal(back.data, ct.data)} "
      f"({(work / 'comp_ct.nrrd').stat().st_size} bytes)")

# -- point sampling ----------------------------------------------------------
lesion = np.asarray(truth.lesion_comp_ct)
for s in np.linspace(-1.2, 1.2, 7):
    p = lesion + s * np.array([0.0, 0.0, cfg.lesion_radius])
    v = sample_trilinear(ct, p)
    print(f"  CT at lesion {s:+.1f} radii along z: "
          f"{'outside' if v is None else f'{v:7.1f} HU'}")

# hot PET confirms the lesion position
pts = lesion + np.linspace(-30, 30, 13)[:, None] * np.array([1.0, 0.0, 0.0])
vals, inside = sample_trilinear_many(pet, pts)
print(f"PET profile through lesion (x): {np.round(vals, 1)}")

# -- slices ------------------------------------------------------------------
k = int(np.argmin(np.abs(
    ct.origin[2] + np.arange(ct.dims[2]) * ct.spacing[2] - lesion[2])))
base = extract_slice(ct, "axial", k, WindowLevel(400.0, 40.0))
origin, row_step, col_step, (nr, nc) = slice_geometry(ct, "axial", k)
print(f"axial slice {k}: {nr}x{nc} px, pixel (0,0) at {np.round(origin, 1)} mm")

pet_data = pet.data
rr, cc = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
world = origin + rr.reshape(-1, 1) * row_step + cc.reshape(-1, 1) * col_step
pvals, pin = sample_trilinear_many(pet, world)
overlay = np.where(pin, pvals / max(pet_data.max(), 1e-6), 0.0).reshape(nr, nc)
rgb = blend_overlay(base, np.clip(overlay, 0.0, 1.0), opacity=0.45)
try:
    from PIL import Image
    Image.fromarray((rgb * 255).astype(np.uint8)).save(work / "fused_axial.png")
    print(f"fused slice written to {work / 'fused_axial.png'}")
except ImportError:
    print("Pillow not installed; skipped PNG export")
