"""Pure-numpy reference kernels (fallback when the compiled core is absent).

Conventions shared with the compiled kernels:
  * volumes are flat arrays in x-fastest order, offset = i + nx*(j + ny*k);
  * query points are continuous voxel coordinates;
  * queries are clamped to the valid cube and the gradient component of a
    clamped axis is zeroed;
  * a point exactly on a cell boundary belongs to the lower cell.
"""

import numpy as np

BACKEND = "numpy"


def trilinear(data, nx, ny, nz, pts):
    """Trilinear interpolation with per-axis derivative.

    Returns (values (N,), grads (N,3)); grads are w.r.t. voxel coordinates.
    """
    pts = np.asarray(pts)
    dims = np.array([nx, ny, nz], dtype=pts.dtype)
    inside = (pts >= 0.0) & (pts <= dims - 1.0)
    v = np.clip(pts, 0.0, dims - 1.0)
    # lower-cell rule: boundary coordinates get fractional part 1 in the
    # cell below, except at the lower edge of the cube
    c = np.ceil(v).astype(np.int64) - 1
    np.clip(c, 0, [nx - 2, ny - 2, nz - 2], out=c)
    f = v - c
    i, j, k = c[:, 0], c[:, 1], c[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    def at(di, dj, dk):
        return data[(i + di) + nx * ((j + dj) + ny * (k + dk))]

    c000, c100 = at(0, 0, 0), at(1, 0, 0)
    c010, c110 = at(0, 1, 0), at(1, 1, 0)
    c001, c101 = at(0, 0, 1), at(1, 0, 1)
    c011, c111 = at(0, 1, 1), at(1, 1, 1)

    # interpolate along x, then y, then z
    a00 = c000 + fx * (c100 - c000)
    a10 = c010 + fx * (c110 - c010)
    a01 = c001 + fx * (c101 - c001)
    a11 = c011 + fx * (c111 - c011)
    b0 = a00 + fy * (a10 - a00)
    b1 = a01 + fy * (a11 - a01)
    vals = b0 + fz * (b1 - b0)

    d00 = c100 - c000
    d10 = c110 - c010
    d01 = c101 - c001
    d11 = c111 - c011
    gx = (d00 + fy * (d10 - d00)) * (1 - fz) + (d01 + fy * (d11 - d01)) * fz
    gy = (a10 - a00) * (1 - fz) + (a11 - a01) * fz
    gz = b1 - b0

    grads = np.stack([gx, gy, gz], axis=1)
    grads *= inside
    return vals, grads


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    """In-place bias-corrected Adam step on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
