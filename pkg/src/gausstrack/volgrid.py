"""Voxel grids, label grids, 4D sequences, and their on-disk container format.

Conventions used throughout the package:

* Arrays are indexed ``values[ix, iy, iz]`` with shape ``(nx, ny, nz)``.
* The raw payload on disk is little-endian, x-fastest (Fortran ravel of the
  array above).
* World coordinates are millimetres with the first voxel center at the
  origin, so voxel ``(i, j, k)`` sits at ``(i*sx, j*sy, k*sz)``.
* Normalized coordinates map the bounding box of voxel centers onto the
  unit cube: ``i/(n-1)`` per axis.

The container is deliberately minimal (JSON manifest + raw payload) so
round trips are bit-exact and testable without a DICOM/NIfTI stack.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError

# Anatomical label ids carried by LabelVolume (and by Gaussians sampled from it).
LABEL_BACKGROUND = 0
LABEL_RV = 1
LABEL_MYO = 2
LABEL_LV = 3
LABEL_SET = (LABEL_BACKGROUND, LABEL_RV, LABEL_MYO, LABEL_LV)

_DTYPE_TAGS = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or len(spacing) != 3:
        raise ValidationError(f"dims/spacing must be 3-vectors, got {dims}, {spacing}")
    if any(d < 1 for d in dims):
        raise ValidationError(f"dims components must be >= 1, got {dims}")
    if any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing components must be > 0, got {spacing}")
    return dims, spacing


@dataclass(frozen=True)
class VoxelVolume:
    """Scalar intensity grid. ``values`` has shape ``dims`` and is never
    mutated after construction."""

    dims: tuple
    spacing: tuple
    values: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        values = np.asarray(self.values)
        if values.shape != dims:
            raise ValidationError(
                f"value array shape {values.shape} does not match dims {dims}"
            )
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def extent_mm(self):
        """Physical size of the voxel-center bounding box per axis."""
        return tuple((d - 1) * s for d, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class LabelVolume:
    """Small-integer segmentation grid over the same geometry as VoxelVolume."""

    dims: tuple
    spacing: tuple
    labels: np.ndarray

    def __post_init__(self):
        dims, spacing = _check_geometry(self.dims, self.spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        labels = np.asarray(self.labels)
        if labels.shape != dims:
            raise ValidationError(
                f"label array shape {labels.shape} does not match dims {dims}"
            )
        bad = np.setdiff1d(np.unique(labels), np.array(LABEL_SET))
        if bad.size:
            raise ValidationError(f"labels outside declared set {LABEL_SET}: {bad.tolist()}")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def extent_mm(self):
        return tuple((d - 1) * s for d, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class Sequence4D:
    """Time-ordered frames sharing one grid, with normalized times and the
    end-diastole / end-systole frame indices."""

    frames: tuple
    times: np.ndarray
    ed_index: int
    es_index: int

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValidationError("sequence must contain at least one frame")
        dims, spacing = frames[0].dims, frames[0].spacing
        for i, f in enumerate(frames):
            if f.dims != dims or f.spacing != spacing:
                raise ValidationError(f"frame {i} geometry differs from frame 0")
        times = np.asarray(self.times, dtype=np.float64)
        if times.shape != (len(frames),):
            raise ValidationError("one normalized time per frame required")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("times must be strictly increasing")
        if not (0 <= self.ed_index < len(frames) and 0 <= self.es_index < len(frames)):
            raise ValidationError("ed/es indices out of range")
        times.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "times", times)

    @property
    def dims(self):
        return self.frames[0].dims

    @property
    def spacing(self):
        return self.frames[0].spacing

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# File container
# ---------------------------------------------------------------------------

def save_volume(volume, path):
    """Write ``<path>.vjson`` manifest plus ``<path>.raw`` payload.

    VoxelVolume is stored as f32le, LabelVolume as u8; both round-trip
    bit-exactly through load_volume.
    """
    path = Path(path)
    if path.suffix == ".vjson":
        path = path.with_suffix("")
    if isinstance(volume, LabelVolume):
        tag, data = "u8", volume.labels.astype("u1")
    elif isinstance(volume, VoxelVolume):
        tag, data = "f32le", volume.values.astype("<f4")
    else:
        raise ValidationError(f"cannot save object of type {type(volume).__name__}")
    raw_name = path.name + ".raw"
    manifest = {
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing),
        "dtype": tag,
        "order": "x-fastest",
        "payload": raw_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    (path.parent / raw_name).write_bytes(data.ravel(order="F").tobytes())
    path.with_suffix(".vjson").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_volume(path):
    """Read a ``.vjson`` manifest and its raw payload.

    Returns VoxelVolume for f32le payloads and LabelVolume for u8. Rejects
    missing payloads, size mismatches, unknown dtype tags and non-finite
    float data.
    """
    path = Path(path)
    if path.suffix != ".vjson":
        path = path.with_suffix(".vjson")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: malformed manifest: {e}") from e
    for key in ("dims", "spacing_mm", "dtype", "order", "payload"):
        if key not in manifest:
            raise ValidationError(f"{path}: manifest missing key '{key}'")
    if manifest["order"] != "x-fastest":
        raise ValidationError(f"{path}: unsupported order {manifest['order']!r}")
    tag = manifest["dtype"]
    if tag not in _DTYPE_TAGS:
        raise ValidationError(f"{path}: unknown dtype tag {tag!r}")
    dims, spacing = _check_geometry(manifest["dims"], manifest["spacing_mm"])
    raw_path = path.parent / manifest["payload"]
    if not raw_path.exists():
        raise ValidationError(f"{path}: missing raw payload {raw_path.name}")
    raw = raw_path.read_bytes()
    dtype = _DTYPE_TAGS[tag]
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) != expected:
        raise ValidationError(
            f"{path}: payload is {len(raw)} bytes, dims {dims} require {expected}"
        )
    flat = np.frombuffer(raw, dtype=dtype)
    data = flat.reshape(dims, order="F")
    if tag == "u8":
        return LabelVolume(dims, spacing, data)
    if not np.all(np.isfinite(flat)):
        raise ValidationError(f"{path}: payload contains non-finite values")
    return VoxelVolume(dims, spacing, data)


def save_sequence(sequence, dirpath):
    """Write a sequence directory: one volume container per frame plus
    ``sequence.vjson`` carrying times and the ED/ES indices."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(sequence.frames):
        name = f"frame_{i:03d}"
        save_volume(frame, dirpath / name)
        names.append(name + ".vjson")
    index = {
        "frames": names,
        "times": [float(t) for t in sequence.times],
        "ed_index": int(sequence.ed_index),
        "es_index": int(sequence.es_index),
    }
    (dirpath / "sequence.vjson").write_text(json.dumps(index, indent=1), encoding="utf-8")


def load_sequence(dirpath):
    dirpath = Path(dirpath)
    index_path = dirpath / "sequence.vjson"
    if not index_path.exists():
        raise ValidationError(f"{dirpath}: no sequence.vjson found")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    for key in ("frames", "times", "ed_index", "es_index"):
        if key not in index:
            raise ValidationError(f"{index_path}: missing key '{key}'")
    frames = []
    for name in index["frames"]:
        vol = load_volume(dirpath / name)
        if not isinstance(vol, VoxelVolume):
            raise ValidationError(f"{dirpath}/{name}: sequence frames must be f32le volumes")
        frames.append(vol)
    return Sequence4D(frames, index["times"], index["ed_index"], index["es_index"])


# ---------------------------------------------------------------------------
# Intensity and coordinate transforms
# ---------------------------------------------------------------------------

def normalize_intensity(volume):
    """Affine map of intensities onto [0, 1]; min -> 0 and max -> 1.

    Raises ValidationError for constant volumes (degenerate range).
    """
    if not np.all(np.isfinite(volume.values)):
        raise ValidationError("cannot normalize a volume with non-finite values")
    lo = float(volume.values.min())
    hi = float(volume.values.max())
    if hi == lo:
        raise ValidationError("cannot normalize a constant volume (max == min)")
    scaled = (volume.values.astype(np.float64) - lo) / (hi - lo)
    return VoxelVolume(volume.dims, volume.spacing, scaled.astype(volume.values.dtype))


def _axis_denoms(dims):
    # i/(n-1) per axis; a single-voxel axis maps to coordinate 0
    return np.array([max(d - 1, 1) for d in dims], dtype=np.float64)


def world_to_normalized(points_mm, grid):
    """Map world (mm) points onto the unit cube spanned by voxel centers.

    ``grid`` is anything with ``dims``/``spacing`` (VoxelVolume, LabelVolume,
    Sequence4D). Requires dims >= 2 per axis so the box is non-degenerate.
    """
    if any(d < 2 for d in grid.dims):
        raise ValidationError("normalized coordinates need dims >= 2 on each axis")
    pts = np.asarray(points_mm, dtype=np.float64)
    extent = np.array(grid.spacing) * _axis_denoms(grid.dims)
    return pts / extent


def normalized_to_world(points_norm, grid):
    """Inverse of world_to_normalized."""
    if any(d < 2 for d in grid.dims):
        raise ValidationError("normalized coordinates need dims >= 2 on each axis")
    pts = np.asarray(points_norm, dtype=np.float64)
    extent = np.array(grid.spacing) * _axis_denoms(grid.dims)
    return pts * extent


def voxel_centers_normalized(dims):
    """(nx, ny, nz, 3) array of normalized voxel-center coordinates."""
    denoms = _axis_denoms(dims)
    axes = [np.arange(d, dtype=np.float64) / denoms[i] for i, d in enumerate(dims)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


# ---------------------------------------------------------------------------
# Resampling and cropping
# ---------------------------------------------------------------------------

def _resample_coords(src_dims, src_spacing, new_dims, new_spacing):
    # Source and target grids share the same physical center; returns the
    # fractional source-index coordinate of every target voxel center.
    coords = []
    for ax in range(3):
        tgt = np.arange(new_dims[ax], dtype=np.float64) * new_spacing[ax]
        offset = (
            (src_dims[ax] - 1) * src_spacing[ax] - (new_dims[ax] - 1) * new_spacing[ax]
        ) / 2.0
        coords.append((tgt + offset) / src_spacing[ax])
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    return np.stack([gx, gy, gz], axis=0)


def resample_trilinear(volume, new_dims, new_spacing):
    """Trilinear resample onto a new centered grid; samples beyond the
    source support clamp to the border value."""
    new_dims, new_spacing = _check_geometry(new_dims, new_spacing)
    coords = _resample_coords(volume.dims, volume.spacing, new_dims, new_spacing)
    out = ndimage.map_coordinates(
        volume.values.astype(np.float64), coords, order=1, mode="nearest"
    )
    return VoxelVolume(new_dims, new_spacing, out)


def resample_nearest(labelvol, new_dims, new_spacing):
    """Nearest-neighbor resample for label grids (same centering as above)."""
    new_dims, new_spacing = _check_geometry(new_dims, new_spacing)
    coords = _resample_coords(labelvol.dims, labelvol.spacing, new_dims, new_spacing)
    out = ndimage.map_coordinates(labelvol.labels, coords, order=0, mode="nearest")
    return LabelVolume(new_dims, new_spacing, out)


def center_crop(volume, crop_dims):
    """Extract the centered sub-grid; odd remainders drop the extra voxel
    from the high side."""
    crop_dims = tuple(int(d) for d in crop_dims)
    if any(c > d for c, d in zip(crop_dims, volume.dims)):
        raise ValidationError(f"crop {crop_dims} exceeds volume dims {volume.dims}")
    if any(c < 1 for c in crop_dims):
        raise ValidationError("crop dims must be >= 1")
    lo = [(d - c) // 2 for d, c in zip(volume.dims, crop_dims)]
    sl = tuple(slice(o, o + c) for o, c in zip(lo, crop_dims))
    if isinstance(volume, LabelVolume):
        return LabelVolume(crop_dims, volume.spacing, volume.labels[sl])
    return VoxelVolume(crop_dims, volume.spacing, volume.values[sl])
