"""Dense field extraction, warping, landmark error, Jacobian statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import volume as vol
from .nets import (ActivationParams, MainNet, forward, forward_with_derivs,
                   harmonize, standard_activation)


class EvalError(Exception):
    pass


FIELD_FORMAT = "inrreg-field"
FIELD_VERSION = 1


@dataclass
class DenseField:
    """Displacement sampled on the full voxel grid, normalized units."""

    dims: tuple
    data: np.ndarray = field(repr=False)  # (nvox, 3), x-fastest voxel order
    alpha: float = 0.0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        n = self.dims[0] * self.dims[1] * self.dims[2]
        self.data = np.ascontiguousarray(self.data).reshape(n, 3)
        if not np.all(np.isfinite(self.data)):
            raise EvalError("dense field contains non-finite displacements")


def save_field(f: DenseField, path):
    header = (f"{FIELD_FORMAT} v{FIELD_VERSION} "
              f"dims={','.join(str(d) for d in f.dims)} alpha={f.alpha!r}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(f.data.astype("<f4").tobytes())


def load_field(path) -> DenseField:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        blob = fh.read()
    if header[:2] != [FIELD_FORMAT, f"v{FIELD_VERSION}"]:
        raise EvalError(f"unrecognized field header: {header[:2]}")
    meta = dict(kv.split("=", 1) for kv in header[2:])
    dims = tuple(int(d) for d in meta["dims"].split(","))
    data = np.frombuffer(blob, dtype="<f4").reshape(-1, 3).copy()
    return DenseField(dims, data, alpha=float(meta["alpha"]))


def grid_points_normalized(dims, dtype=np.float64):
    """Normalized coordinates of every voxel, x-fastest order, (nvox, 3)."""
    nx, ny, nz = dims
    ax = [np.linspace(-1.0, 1.0, n, dtype=dtype) for n in (nx, ny, nz)]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)          # (nx, ny, nz, 3)
    return pts.transpose(2, 1, 0, 3).reshape(-1, 3)


def resolve_activation(main: MainNet, harm, mode, alpha) -> ActivationParams:
    """Activation quadruple for evaluation: harmonized in conditioned mode,
    the standard sine activation in baseline mode."""
    if mode == "conditioned":
        if harm is None:
            raise EvalError("conditioned evaluation needs the harmonizer")
        act = harmonize(float(alpha), harm)
        return ActivationParams.constant(*act.as_array(), dtype=main.dtype)
    return standard_activation(main.omega0, dtype=main.dtype)


def dense_field(main: MainNet, act: ActivationParams, dims, alpha=0.0,
                chunk=32768) -> DenseField:
    """Evaluate u at every voxel's normalized coordinate, in chunks."""
    pts = grid_points_normalized(dims, dtype=main.dtype)
    out = np.empty((pts.shape[0], 3), dtype=main.dtype)
    for lo in range(0, pts.shape[0], chunk):
        hi = min(lo + chunk, pts.shape[0])
        out[lo:hi] = forward(pts[lo:hi], act, main).data
    return DenseField(dims, out, alpha=float(alpha))


def field_sample(f: DenseField, norm_pts):
    """Trilinear interpolation of the dense displacement at normalized points."""
    pts = np.asarray(norm_pts, dtype=np.float64)
    nx, ny, nz = f.dims
    scale = (np.asarray(f.dims, dtype=np.float64) - 1.0) / 2.0
    vox = np.ascontiguousarray((pts + 1.0) * scale)
    out = np.empty_like(pts)
    for c in range(3):
        ch = np.ascontiguousarray(f.data[:, c].astype(np.float64))
        out[:, c], _ = kernels.trilinear(ch, nx, ny, nz, vox)
    return out


def invert_field(f: DenseField, y_norm, iters=10, tol=1e-4):
    """Approximate phi^{-1}(y) by fixed-point iteration x <- y - u(x)."""
    y = np.asarray(y_norm, dtype=np.float64)
    x = y.copy()
    for _ in range(iters):
        x_new = y - field_sample(f, x)
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        x = x_new
    return x


def warp_volume(moving: vol.Volume, f: DenseField, iters=10, tol=1e-4,
                binarize=False) -> vol.Volume:
    """Resample the moving image into the fixed frame.

    phi maps moving to fixed, so the moved image at a fixed voxel y is the
    moving intensity at phi^{-1}(y), approximated by fixed-point inversion.
    """
    if tuple(moving.dims) != tuple(f.dims):
        raise EvalError(f"volume dims {moving.dims} != field dims {f.dims}")
    y = grid_points_normalized(moving.dims)
    x = invert_field(f, y, iters=iters, tol=tol)
    vals, _ = vol.trilinear_sample_np(moving, x)
    if binarize:
        vals = (vals >= 0.5).astype(moving.data.dtype)
    else:
        vals = vals.astype(moving.data.dtype)
    return vol.Volume(moving.dims, moving.spacing, moving.origin, vals)


def apply_map_to_voxel_points(main: MainNet, act, ref: vol.Volume, voxel_pts):
    """phi applied to voxel-space points: voxel -> normalized -> +u -> voxel."""
    x = vol.normalize_coords(ref, voxel_pts).astype(main.dtype)
    u = forward(x, act, main).data
    return vol.denormalize_coords(ref, x.astype(np.float64) + u)


def tre(landmarks: vol.LandmarkSet, main: MainNet, act, ref: vol.Volume):
    """Target registration error in mm: per-landmark, mean, std.

    Moving landmarks are pushed through phi and compared to their fixed
    counterparts; voxel offsets are scaled per axis by the grid spacing.
    """
    mapped = apply_map_to_voxel_points(main, act, ref, landmarks.moving)
    diff = (mapped - landmarks.fixed) * np.asarray(ref.spacing)
    per = np.sqrt(np.sum(diff * diff, axis=1))
    return float(per.mean()), float(per.std()), per


def initial_tre(landmarks: vol.LandmarkSet, spacing):
    diff = (landmarks.moving - landmarks.fixed) * np.asarray(spacing)
    per = np.sqrt(np.sum(diff * diff, axis=1))
    return float(per.mean()), float(per.std()), per


def jacobian_stats(main: MainNet, act, sample_pts_norm):
    """(fraction det<=0, min det, mean |det-1|) of grad(phi) at the samples."""
    pts = np.asarray(sample_pts_norm, dtype=main.dtype)
    if pts.shape[0] < 1:
        raise EvalError("jacobian_stats needs at least one sample point")
    derivs = forward_with_derivs(pts, act, main, need_hessian=False)
    jac = derivs.jac_np().astype(np.float64)     # (N, 3, 3), [n, i, k]
    det = np.linalg.det(np.eye(3) + jac)
    return (float(np.mean(det <= 0.0)), float(det.min()),
            float(np.mean(np.abs(det - 1.0))))
