"""Volume containers: construction, the bit-exact file format, resampling.

Run:  python3 demos/01_volumes_and_io.py
"""

import tempfile
from pathlib import Path

import numpy as np

from gausstrack import (
    VoxelVolume,
    center_crop,
    load_volume,
    normalize_intensity,
    resample_trilinear,
    save_volume,
    world_to_normalized,
)

rng = np.random.default_rng(0)

# A small anisotropic grid: values indexed [ix, iy, iz], spacing in mm.
vol = VoxelVolume(dims=(24, 24, 12), spacing=(1.5, 1.5, 3.15),
                  values=rng.random((24, 24, 12)).astype(np.float32))
print("extent (mm):", vol.extent_mm)

# The container is a JSON manifest + raw little-endian payload and round
# trips bit-exactly.
with tempfile.TemporaryDirectory() as tmp:
    save_volume(vol, Path(tmp) / "demo")
    back = load_volume(Path(tmp) / "demo")
    print("round trip bit-exact:", np.array_equal(back.values, vol.values))

# Intensities map affinely onto [0, 1].
scaled = VoxelVolume(vol.dims, vol.spacing, 100 + 40 * vol.values)
norm = normalize_intensity(scaled)
print("normalized range:", norm.values.min(), "-", norm.values.max())

# World <-> normalized coordinates span the voxel-center bounding box.
corner = [(d - 1) * s for d, s in zip(vol.dims, vol.spacing)]
print("far corner maps to:", world_to_normalized(corner, vol))

# Resample to an isotropic grid, then crop the center region.
iso = resample_trilinear(norm, (24, 24, 24), (1.5, 1.5, 1.5))
cropped = center_crop(iso, (16, 16, 16))
print("resampled", iso.dims, "-> cropped", cropped.dims)
