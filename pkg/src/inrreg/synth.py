"""Synthetic registration benchmark with analytic ground truth.

A procedural moving image (sum of Gaussian blobs over a smooth ramp) is
deformed by an analytic displacement field to produce the fixed image, so
moving/fixed pairs, masks, landmark pairs, and the true dense field are all
known exactly.  Everything is deterministic given the spec's seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import volume as vol
from .evaluate import DenseField, grid_points_normalized

MIN_DET = 0.05
BUMP_SIGMA = 0.45
BUMP_DIR = np.array([0.55, 0.65, 0.52])
AFFINE_DIR = np.array([1.0, 0.5, 0.25])


class SynthError(Exception):
    pass


@dataclass
class SynthSpec:
    dims: tuple = (48, 48, 48)
    kind: str = "gaussian_bump"       # gaussian_bump | sinusoid | affine
    amplitude: float = 0.2            # normalized units
    seed: int = 0
    n_landmarks: int = 50
    n_blobs: int = 12
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("gaussian_bump", "sinusoid", "affine"):
            raise SynthError(f"unknown dvf kind '{self.kind}'")
        if self.n_landmarks < 1:
            raise SynthError("need at least one landmark")


@dataclass
class SynthResult:
    moving: vol.Volume
    fixed: vol.Volume
    mask: vol.Volume
    landmarks: vol.LandmarkSet          # rounded to integer voxels
    landmarks_exact: vol.LandmarkSet    # continuous oracle pairs
    truth_field: DenseField


# ---------------------------------------------------------------------------
# analytic displacement fields (normalized coordinates)

def displacement(spec: SynthSpec, pts):
    """u(x) for the spec's field kind; pts (N, 3) normalized."""
    pts = np.asarray(pts, dtype=np.float64)
    a = spec.amplitude
    if spec.kind == "affine":
        return np.broadcast_to(a * AFFINE_DIR, pts.shape).copy()
    if spec.kind == "sinusoid":
        u = np.zeros_like(pts)
        u[:, 0] = a * np.sin(math.pi * pts[:, 0])
        return u
    s2 = BUMP_SIGMA ** 2
    r2 = np.sum(pts * pts, axis=1)
    w = a * np.exp(-r2 / (2.0 * s2))
    return w[:, None] * BUMP_DIR


def displacement_jacobian(spec: SynthSpec, pts):
    """Analytic grad(u), (N, 3, 3) with [n, i, j] = d u_i / d x_j."""
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    jac = np.zeros((n, 3, 3))
    a = spec.amplitude
    if spec.kind == "affine":
        return jac
    if spec.kind == "sinusoid":
        jac[:, 0, 0] = a * math.pi * np.cos(math.pi * pts[:, 0])
        return jac
    s2 = BUMP_SIGMA ** 2
    r2 = np.sum(pts * pts, axis=1)
    w = a * np.exp(-r2 / (2.0 * s2))
    # d u_i / d x_j = dir_i * w * (-x_j / s^2)
    jac = (BUMP_DIR[None, :, None] * (-pts / s2)[:, None, :]) * w[:, None, None]
    return jac


def forward_map(spec: SynthSpec, pts):
    return np.asarray(pts, dtype=np.float64) + displacement(spec, pts)


def inverse_map(spec: SynthSpec, pts, iters=40, tol=1e-10):
    """phi^{-1} by fixed-point iteration x <- y - u(x) (u is contractive)."""
    y = np.asarray(pts, dtype=np.float64)
    if spec.kind == "affine":
        return y - spec.amplitude * AFFINE_DIR
    x = y.copy()
    for _ in range(iters):
        x_new = y - displacement(spec, x)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def min_grid_det(spec: SynthSpec):
    pts = grid_points_normalized(spec.dims)
    jac = displacement_jacobian(spec, pts)
    det = np.linalg.det(np.eye(3) + jac)
    return float(det.min())


# ---------------------------------------------------------------------------
# procedural texture

def _texture(rng, n_blobs):
    centers = rng.uniform(-0.85, 0.85, size=(n_blobs, 3))
    sigmas = rng.uniform(0.12, 0.35, size=n_blobs)
    amps = rng.uniform(0.4, 1.0, size=n_blobs)
    ramp = rng.uniform(0.1, 0.25, size=3)

    def f(pts):
        pts = np.asarray(pts, dtype=np.float64)
        out = pts @ ramp
        for c, s, a in zip(centers, sigmas, amps):
            d = pts - c
            out = out + a * np.exp(-np.sum(d * d, axis=1) / (2.0 * s * s))
        return out

    return f


def _ellipsoid_mask(dims, semi_axes=(0.65, 0.6, 0.62)):
    pts = grid_points_normalized(dims)
    q = np.sum((pts / np.asarray(semi_axes)) ** 2, axis=1)
    return (q <= 1.0).astype(np.float32)


def generate(spec: SynthSpec) -> SynthResult:
    """Build the full synthetic problem; raises if the field risks folding."""
    mdet = min_grid_det(spec)
    if mdet <= MIN_DET:
        raise SynthError(
            f"amplitude {spec.amplitude} gives min det(grad phi) = {mdet:.4f}"
            f" <= {MIN_DET}; reduce the amplitude")
    rng = np.random.default_rng(spec.seed)
    tex = _texture(rng, spec.n_blobs)
    pts = grid_points_normalized(spec.dims)

    moving_vals = tex(pts)
    fixed_vals = tex(inverse_map(spec, pts))
    # common intensity scale so both images share [0, 1]
    lo = min(moving_vals.min(), fixed_vals.min())
    hi = max(moving_vals.max(), fixed_vals.max())
    moving_vals = (moving_vals - lo) / (hi - lo)
    fixed_vals = (fixed_vals - lo) / (hi - lo)

    moving = vol.Volume(spec.dims, spec.spacing, (0.0, 0.0, 0.0),
                        moving_vals.astype(np.float32))
    fixed = vol.Volume(spec.dims, spec.spacing, (0.0, 0.0, 0.0),
                       fixed_vals.astype(np.float32))
    mask = vol.Volume(spec.dims, spec.spacing, (0.0, 0.0, 0.0),
                      _ellipsoid_mask(spec.dims))

    truth = DenseField(spec.dims, displacement(spec, pts).astype(np.float32),
                       alpha=0.0)

    lm_norm = _sample_mask_interior(rng, spec.n_landmarks)
    lm_fixed_norm = forward_map(spec, lm_norm)
    mv = vol.denormalize_coords(moving, lm_norm)
    fv = vol.denormalize_coords(moving, lm_fixed_norm)
    exact = vol.LandmarkSet(mv, fv)
    hi_idx = np.asarray(spec.dims) - 1.0
    rounded = vol.LandmarkSet(np.clip(np.round(mv), 0, hi_idx),
                              np.clip(np.round(fv), 0, hi_idx))
    return SynthResult(moving, fixed, mask, rounded, exact, truth)


def _sample_mask_interior(rng, n, semi_axes=(0.65, 0.6, 0.62), margin=0.9):
    """Uniform continuous points inside the (shrunken) ellipsoid mask."""
    axes = np.asarray(semi_axes) * margin
    out = []
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(4 * n, 3)) * axes
        keep = np.sum((cand / axes) ** 2, axis=1) <= 1.0
        out.extend(cand[keep])
    return np.asarray(out[:n])


def analytic_bending(spec: SynthSpec):
    """Closed-form bending energy of the analytic field.

    affine: zero second derivatives.
    sinusoid u_x = A sin(pi x): the only Hessian entry is
    u_x,xx = -A pi^2 sin(pi x), so the cube-averaged penalty is
    A^2 pi^4 * mean(sin^2) = A^2 pi^4 / 2.
    """
    if spec.kind == "affine":
        return 0.0
    if spec.kind == "sinusoid":
        return spec.amplitude ** 2 * math.pi ** 4 / 2.0
    raise SynthError(f"no closed-form bending energy for kind '{spec.kind}'")
