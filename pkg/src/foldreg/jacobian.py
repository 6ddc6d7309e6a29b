"""Discrete Jacobian of the deformation x + u(x) and the anti-folding penalty.

The Jacobian of u uses forward differences, falling back to the backward
difference on the last slice of each axis; this stencil is exact on affine
fields. The deformation Jacobian is I + Du, its determinant is expanded per
voxel with 3x3 cofactors, and the penalty is the voxel mean of
0.5 * (|det| - det) = max(-det, 0), which vanishes exactly on
orientation-preserving voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import INTENSITY, DisplacementField, Volume


@dataclass(frozen=True)
class DetMap:
    """Per-voxel determinant of the deformation Jacobian."""

    values: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)


def _check_extents(dims) -> None:
    if any(n < 2 for n in dims):
        raise ValueError(f"jacobian requires extent >= 2 per axis, got dims {dims}")


def jacobian_raw(u: np.ndarray) -> np.ndarray:
    """Du with D[c, a] = forward difference of channel c along axis a."""
    dims = u.shape[1:]
    _check_extents(dims)
    out = np.empty((3, 3) + dims, dtype=u.dtype)
    for c in range(3):
        for a in range(3):
            fd = np.diff(u[c], axis=a)
            lead = [slice(None)] * 3
            lead[a] = slice(0, dims[a] - 1)
            out[(c, a) + tuple(lead)] = fd
            last = [slice(None)] * 3
            last[a] = dims[a] - 1
            prev = [slice(None)] * 3
            prev[a] = dims[a] - 2
            # backward difference at the high boundary equals the last forward one
            out[(c, a) + tuple(last)] = fd[tuple(prev)]
    return out


def jacobian_adjoint(grad: np.ndarray) -> np.ndarray:
    """Adjoint of jacobian_raw: scatter stencil gradients back onto u."""
    dims = grad.shape[2:]
    out = np.zeros((3,) + dims, dtype=np.result_type(grad.dtype, np.float64))
    for c in range(3):
        for a in range(3):
            g = grad[c, a]
            n = dims[a]
            interior = [slice(None)] * 3
            interior[a] = slice(0, n - 1)
            shifted = [slice(None)] * 3
            shifted[a] = slice(1, n)
            gi = g[tuple(interior)]
            out[(c,) + tuple(shifted)] += gi
            out[(c,) + tuple(interior)] -= gi
            last = [slice(None)] * 3
            last[a] = n - 1
            prev = [slice(None)] * 3
            prev[a] = n - 2
            gl = g[tuple(last)]
            out[(c,) + tuple(last)] += gl
            out[(c,) + tuple(prev)] -= gl
    return out


def displacement_jacobian(u: DisplacementField) -> np.ndarray:
    """Per-voxel 3x3 matrix field Du, shape (3, 3, nx, ny, nz)."""
    return jacobian_raw(u.data)


def _det3(J: np.ndarray) -> np.ndarray:
    return (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )


def _cofactors(J: np.ndarray) -> np.ndarray:
    """C with C[c, a] = d det(J) / d J[c, a]."""
    C = np.empty_like(J)
    C[0, 0] = J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1]
    C[0, 1] = J[1, 2] * J[2, 0] - J[1, 0] * J[2, 2]
    C[0, 2] = J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]
    C[1, 0] = J[0, 2] * J[2, 1] - J[0, 1] * J[2, 2]
    C[1, 1] = J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]
    C[1, 2] = J[0, 1] * J[2, 0] - J[0, 0] * J[2, 1]
    C[2, 0] = J[0, 1] * J[1, 2] - J[0, 2] * J[1, 1]
    C[2, 1] = J[0, 2] * J[1, 0] - J[0, 0] * J[1, 2]
    C[2, 2] = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return C


def _deformation_jacobian(u_arr: np.ndarray) -> np.ndarray:
    J = jacobian_raw(u_arr)
    for d in range(3):
        J[d, d] += 1.0
    return J


def det_map(u: DisplacementField) -> DetMap:
    """det(I + Du) at every voxel."""
    return DetMap(_det3(_deformation_jacobian(u.data)))


def folding_count(d: DetMap) -> int:
    """Number of voxels with strictly negative determinant."""
    return int(np.count_nonzero(d.values < 0))


def r2_penalty(d: DetMap) -> float:
    """Voxel mean of 0.5 * (|det| - det); zero iff no negative determinants."""
    det = d.values
    return float(np.maximum(-det, 0.0).mean(dtype=np.float64))


def r2_backward(u: DisplacementField, upstream: float = 1.0) -> np.ndarray:
    """Gradient of r2_penalty(det_map(u)) w.r.t. u, shape (3, nx, ny, nz).

    Chain: d penalty / d det is -1 on folding voxels (subgradient 0 at
    det = 0), d det / d J is the cofactor matrix, and the difference stencil
    scatters back onto the two participating voxels of each difference.
    """
    J = _deformation_jacobian(u.data)
    det = _det3(J)
    scale = -upstream / det.size
    active = (det < 0.0) * scale
    grad_J = _cofactors(J) * active  # broadcasts over the (3, 3) leading axes
    return jacobian_adjoint(grad_J)


def det_volume(d: DetMap) -> Volume:
    """Determinant map as an intensity volume for export."""
    return Volume(d.values.astype(np.float32), INTENSITY)


def folding_mask(d: DetMap) -> Volume:
    """Binary mask of folding voxels (1.0 where det < 0)."""
    return Volume((d.values < 0.0).astype(np.float32), INTENSITY)
