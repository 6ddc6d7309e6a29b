"""Spatial deformation: sample the source at x + u(x).

Trilinear interpolation with clamp-to-edge boundary handling. Coordinates are
voxel-lattice positions; out-of-range sample points are clamped componentwise
to [0, n-1] before interpolation, so every point is valid. At cell faces the
derivative takes the lower-cell one-sided value (i0 = ceil(p) - 1), a fixed
subgradient choice at those measure-zero points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import INTENSITY, LABEL, DisplacementField, Volume


@dataclass(frozen=True)
class WarpResult:
    warped: Volume
    sample_coords: np.ndarray  # (3, nx, ny, nz), identity grid + u


def identity_grid(dims, dtype=np.float64) -> np.ndarray:
    return np.indices(dims).astype(dtype)


def _cells(coords, dims):
    """Clamp coordinates and pick interpolation cells (lower-cell at faces).

    Returns (i0, i1, frac, in_range) per axis; in_range marks points whose
    raw coordinate was inside [0, n-1] (derivative is zero elsewhere).
    """
    i0s, i1s, fracs, masks = [], [], [], []
    for axis in range(3):
        n = dims[axis]
        raw = coords[axis]
        c = np.clip(raw, 0.0, float(n - 1))
        if n == 1:
            i0 = np.zeros(c.shape, dtype=np.intp)
            i1 = i0
            frac = np.zeros_like(c)
        else:
            i0 = np.ceil(c).astype(np.intp) - 1
            np.clip(i0, 0, n - 2, out=i0)
            i1 = i0 + 1
            frac = c - i0.astype(c.dtype)  # keep the input float width
        i0s.append(i0)
        i1s.append(i1)
        fracs.append(frac)
        masks.append((raw >= 0.0) & (raw <= float(n - 1)))
    return i0s, i1s, fracs, masks


def _gather_corners(vol: np.ndarray, i0s, i1s):
    (x0, y0, z0), (x1, y1, z1) = i0s, i1s
    return (
        vol[x0, y0, z0], vol[x1, y0, z0], vol[x0, y1, z0], vol[x1, y1, z0],
        vol[x0, y0, z1], vol[x1, y0, z1], vol[x0, y1, z1], vol[x1, y1, z1],
    )


def sample_grid(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a 3D array at coords of shape (3, ...)."""
    i0s, i1s, (fx, fy, fz), _ = _cells(coords, vol.shape)
    c000, c100, c010, c110, c001, c101, c011, c111 = _gather_corners(vol, i0s, i1s)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    return (
        c000 * (gx * gy * gz) + c100 * (fx * gy * gz)
        + c010 * (gx * fy * gz) + c110 * (fx * fy * gz)
        + c001 * (gx * gy * fz) + c101 * (fx * gy * fz)
        + c011 * (gx * fy * fz) + c111 * (fx * fy * fz)
    )


def sample_grid_grad(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Derivative of the trilinear interpolant w.r.t. each coordinate.

    Shape (3, ...); zero where the raw coordinate fell outside [0, n-1].
    """
    i0s, i1s, (fx, fy, fz), masks = _cells(coords, vol.shape)
    c000, c100, c010, c110, c001, c101, c011, c111 = _gather_corners(vol, i0s, i1s)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    dx = (
        (c100 - c000) * (gy * gz) + (c110 - c010) * (fy * gz)
        + (c101 - c001) * (gy * fz) + (c111 - c011) * (fy * fz)
    )
    dy = (
        (c010 - c000) * (gx * gz) + (c110 - c100) * (fx * gz)
        + (c011 - c001) * (gx * fz) + (c111 - c101) * (fx * fz)
    )
    dz = (
        (c001 - c000) * (gx * gy) + (c101 - c100) * (fx * gy)
        + (c011 - c010) * (gx * fy) + (c111 - c110) * (fx * fy)
    )
    grad = np.stack([dx, dy, dz])
    for axis in range(3):
        grad[axis] *= masks[axis]
    return grad


def trilinear_sample(src: Volume, p) -> float:
    """Sample an intensity volume at a single point (voxel coordinates)."""
    if src.kind != INTENSITY:
        raise ValueError("trilinear_sample expects an intensity volume")
    p = np.asarray(p, dtype=np.float64).reshape(3, 1)
    return float(sample_grid(src.data, p)[0])


def warp_image(src: Volume, u: DisplacementField) -> WarpResult:
    """Produce the warped image: warped(x) = src(x + u(x))."""
    if src.kind != INTENSITY:
        raise ValueError("warp_image expects an intensity volume")
    if src.dims != u.dims:
        raise ValueError(f"dims mismatch: source {src.dims} vs field {u.dims}")
    coords = identity_grid(src.dims, dtype=u.data.dtype) + u.data
    warped = sample_grid(src.data, coords)
    return WarpResult(Volume(warped, INTENSITY), coords)


def warp_labels(lab: Volume, u: DisplacementField) -> Volume:
    """Warp a label mask by nearest-neighbor sampling (round half up)."""
    if lab.kind != LABEL:
        raise ValueError("warp_labels expects a label volume")
    if lab.dims != u.dims:
        raise ValueError(f"dims mismatch: labels {lab.dims} vs field {u.dims}")
    coords = identity_grid(lab.dims, dtype=np.float64) + u.data
    idx = []
    for axis, n in enumerate(lab.dims):
        c = np.clip(coords[axis], 0.0, float(n - 1))
        i = np.floor(c + 0.5).astype(np.intp)
        np.clip(i, 0, n - 1, out=i)
        idx.append(i)
    return Volume(lab.data[idx[0], idx[1], idx[2]], LABEL)


def warp_backward(src: Volume, u: DisplacementField, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * warped) with respect to u, shape (3, ...)."""
    if src.dims != u.dims:
        raise ValueError(f"dims mismatch: source {src.dims} vs field {u.dims}")
    upstream = np.asarray(upstream)
    if upstream.shape != src.dims:
        raise ValueError(f"upstream shape {upstream.shape} does not match dims {src.dims}")
    coords = identity_grid(src.dims, dtype=u.data.dtype) + u.data
    return sample_grid_grad(src.data, coords) * upstream
