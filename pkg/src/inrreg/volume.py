"""Volumetric images, coordinate maps, differentiable sampling, point draws.

Coordinate spaces:
  * voxel: continuous index coordinates, axis i spans [0, dims[i]-1];
  * world: voxel * spacing + origin, in mm;
  * normalized: each axis mapped linearly onto [-1, 1] (the cube the INR
    operates on), voxel i -> -1 + 2*i/(n-1).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels


class VolumeError(Exception):
    pass


@dataclass
class Volume:
    """A 3-D scalar image: flat data in x-fastest order plus grid metadata."""

    dims: tuple
    spacing: tuple
    origin: tuple
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.dims) != 3 or any(d < 2 for d in self.dims):
            raise VolumeError(f"dims must be 3 axes of >= 2 voxels, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        n = self.dims[0] * self.dims[1] * self.dims[2]
        self.data = np.ascontiguousarray(self.data).reshape(-1)
        if self.data.size != n:
            raise VolumeError(
                f"data length {self.data.size} != product of dims {n}")

    @property
    def nvox(self):
        return self.data.size

    def as_array(self):
        """View as (nx, ny, nz); axis order matches the coordinate order."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx).transpose(2, 1, 0)

    def at(self, i, j, k):
        nx, ny, _ = self.dims
        return self.data[i + nx * (j + ny * k)]

    def copy(self, data=None):
        return Volume(self.dims, self.spacing, self.origin,
                      self.data.copy() if data is None else data)


def make_mask(vol: Volume) -> Volume:
    """Validate a volume as a binary mask and return it."""
    u = np.unique(vol.data)
    if not np.all(np.isin(u, [0.0, 1.0])):
        raise VolumeError(f"mask data is not binary; values {u[:8]}")
    return vol


@dataclass
class LandmarkSet:
    moving: np.ndarray  # (N, 3) voxel coordinates
    fixed: np.ndarray   # (N, 3) voxel coordinates

    def __post_init__(self):
        self.moving = np.atleast_2d(np.asarray(self.moving, dtype=np.float64))
        self.fixed = np.atleast_2d(np.asarray(self.fixed, dtype=np.float64))
        if self.moving.shape != self.fixed.shape or self.moving.shape[1] != 3:
            raise VolumeError(
                f"landmark arrays must be matching (N,3), got "
                f"{self.moving.shape} and {self.fixed.shape}")

    def __len__(self):
        return self.moving.shape[0]

    def check_in_range(self, dims):
        hi = np.array(dims, dtype=np.float64) - 1.0
        for name, arr in (("moving", self.moving), ("fixed", self.fixed)):
            if np.any(arr < 0) or np.any(arr > hi):
                raise VolumeError(f"{name} landmarks fall outside dims {dims}")


LANDMARK_HEADER = ["mx", "my", "mz", "fx", "fy", "fz"]


def load_landmarks(path, one_based=False) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != LANDMARK_HEADER:
        raise VolumeError(
            f"landmark CSV must start with header '{','.join(LANDMARK_HEADER)}'")
    vals = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
    if one_based:
        vals = vals - 1.0
    return LandmarkSet(vals[:, :3], vals[:, 3:])


def save_landmarks(lm: LandmarkSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LANDMARK_HEADER)
        for m, f in zip(lm.moving, lm.fixed):
            w.writerow([repr(float(v)) for v in (*m, *f)])


# ---------------------------------------------------------------------------
# .vh / .raw file pair

VOLUME_FORMAT = "inrreg-volume"
VOLUME_VERSION = 1


def save_volume(vol: Volume, path):
    """Write `path`.vh (text header) and `path`.raw (little-endian f32)."""
    base = _strip_vh(path)
    with open(base + ".vh", "w") as fh:
        fh.write(f"{VOLUME_FORMAT} v{VOLUME_VERSION}\n")
        fh.write("dims %d %d %d\n" % vol.dims)
        fh.write("spacing_mm %r %r %r\n" % vol.spacing)
        fh.write("origin_mm %r %r %r\n" % vol.origin)
        fh.write("dtype f32\n")
        fh.write("order x-fastest\n")
    with open(base + ".raw", "wb") as fh:
        fh.write(vol.data.astype("<f4").tobytes())


def load_volume(path) -> Volume:
    base = _strip_vh(path)
    fields = {}
    with open(base + ".vh") as fh:
        first = fh.readline().split()
        if first[:1] != [VOLUME_FORMAT]:
            raise VolumeError(f"unrecognized header format line: {first}")
        for line in fh:
            parts = line.split()
            if parts:
                fields[parts[0]] = parts[1:]
    dims = tuple(int(v) for v in fields["dims"])
    spacing = tuple(float(v) for v in fields["spacing_mm"])
    origin = tuple(float(v) for v in fields["origin_mm"])
    if fields.get("dtype") != ["f32"]:
        raise VolumeError(f"unsupported dtype {fields.get('dtype')}")
    expected = dims[0] * dims[1] * dims[2] * 4
    actual = os.path.getsize(base + ".raw")
    if actual != expected:
        raise VolumeError(
            f"raw size mismatch for {base}.raw: expected {expected} bytes "
            f"from dims {dims}, found {actual}")
    data = np.fromfile(base + ".raw", dtype="<f4")
    return Volume(dims, spacing, origin, data)


def _strip_vh(path):
    path = str(path)
    for ext in (".vh", ".raw"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def check_same_grid(a: Volume, b: Volume):
    if a.dims != b.dims or a.spacing != b.spacing:
        raise VolumeError(
            f"volumes must share dims and spacing: {a.dims}/{a.spacing} vs "
            f"{b.dims}/{b.spacing}")


# ---------------------------------------------------------------------------
# coordinate maps

def normalize_coords(vol: Volume, voxel_pts):
    """Voxel index -> normalized cube, i |-> -1 + 2*i/(n-1) per axis."""
    dims = np.asarray(vol.dims, dtype=np.float64)
    if np.any(dims < 2):
        raise VolumeError(f"degenerate axis in dims {vol.dims}")
    pts = np.asarray(voxel_pts, dtype=np.float64)
    return -1.0 + 2.0 * pts / (dims - 1.0)


def denormalize_coords(vol: Volume, norm_pts):
    dims = np.asarray(vol.dims, dtype=np.float64)
    if np.any(dims < 2):
        raise VolumeError(f"degenerate axis in dims {vol.dims}")
    pts = np.asarray(norm_pts, dtype=np.float64)
    return (pts + 1.0) * (dims - 1.0) / 2.0


def voxel_to_world(vol: Volume, voxel_pts):
    pts = np.asarray(voxel_pts, dtype=np.float64)
    return pts * np.asarray(vol.spacing) + np.asarray(vol.origin)


# ---------------------------------------------------------------------------
# differentiable sampling

def trilinear_sample_np(vol: Volume, norm_pts, dtype=np.float64):
    """Non-graph trilinear sampling; returns (values, grads wrt normalized)."""
    pts = np.asarray(norm_pts, dtype=dtype)
    nx, ny, nz = vol.dims
    scale = (np.asarray(vol.dims, dtype=dtype) - 1.0) / 2.0
    vox = (pts + 1.0) * scale
    data = np.ascontiguousarray(vol.data, dtype=dtype)
    vals, gvox = kernels.trilinear(data, nx, ny, nz, np.ascontiguousarray(vox))
    return vals, gvox * scale


def trilinear_sample(vol: Volume, points: "ad.Tensor") -> "ad.Tensor":
    """Graph op: sample `vol` at normalized points (N,3).

    The adjoint routes the interpolant's spatial gradient into the points,
    so intensity losses backpropagate into the deformation.  Out-of-cube
    queries are clamped and their clamped gradient component zeroed.
    """
    dtype = points.dtype
    vals, gnorm = trilinear_sample_np(vol, points.data, dtype=dtype.type)

    def bwd(out):
        if points.requires_grad:
            points.accumulate(out.grad[:, None] * gnorm)

    return ad.Tensor(vals.astype(dtype, copy=False), (points,), bwd,
                     op="trilinear_sample")


# ---------------------------------------------------------------------------
# masked point draws

def mask_active_indices(mask: Volume):
    return np.flatnonzero(mask.data > 0.5)


def sample_mask_points(mask: Volume, n, rng, jitter=True):
    """Draw n i.i.d. uniform voxel positions from the active mask voxels.

    Returns (points (n,3) float voxel coords, voxel index triples (n,3) int).
    With jitter (default) a continuous offset in (-0.5, 0.5) is added per
    axis, so points stay inside their source voxel.
    """
    if n < 1:
        raise VolumeError(f"need n >= 1 points, got {n}")
    active = mask_active_indices(mask)
    if active.size == 0:
        raise VolumeError("mask has no active voxels")
    nx, ny, _ = mask.dims
    flat = active[rng.integers(0, active.size, size=n)]
    i = flat % nx
    j = (flat // nx) % ny
    k = flat // (nx * ny)
    idx = np.stack([i, j, k], axis=1)
    pts = idx.astype(np.float64)
    if jitter:
        pts = pts + rng.uniform(-0.5, 0.5, size=pts.shape)
    return pts, idx
