"""Training loss: image dissimilarity plus smoothness and anti-folding terms.

total = (1 - CC) + alpha * R1 + beta * R2

Two CC modes are provided. "global" is the Pearson correlation over the whole
volume (image term in [0, 2]); "local" is the mean squared windowed
correlation coefficient with zero-padded window sums (image term in [0, 1]),
the variant used by comparable registration networks, and the default.
R1 is the voxel mean of the squared Frobenius norm of Du. All scalar
reductions accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import jacobian
from .volume import DisplacementField, Volume

EPS = 1e-5

GLOBAL = "global"
LOCAL = "local"
DEFAULT_WINDOW = 9


@dataclass(frozen=True)
class LossBreakdown:
    image: float
    r1: float
    r2: float
    total: float
    alpha: float
    beta: float


def _check_dims(a: Volume, b: Volume) -> None:
    if a.dims != b.dims:
        raise ValueError(f"dims mismatch: {a.dims} vs {b.dims}")


def _global_cc_with_grad(x: np.ndarray, y: np.ndarray):
    x = x.astype(np.float64, copy=False)
    y = y.astype(np.float64, copy=False)
    n = x.size
    zx = x - x.mean()
    zy = y - y.mean()
    sx = np.sqrt((zx * zx).mean())
    sy = np.sqrt((zy * zy).mean())
    cov = (zx * zy).mean()
    denom = (sx + EPS) * (sy + EPS)
    cc = cov / denom
    # d cov / dx_i = zy_i / n; d sx / dx_i = zx_i / (n * sx)
    gx = zy / (n * denom)
    if sx > 0.0:
        gx -= zx * (cc / (n * sx * (sx + EPS)))
    gy = zx / (n * denom)
    if sy > 0.0:
        gy -= zy * (cc / (n * sy * (sy + EPS)))
    return float(cc), gx, gy


def global_cc(a: Volume, b: Volume) -> float:
    """Pearson correlation over all voxels, epsilon-stabilized."""
    _check_dims(a, b)
    cc, _, _ = _global_cc_with_grad(a.data, b.data)
    return cc


def _box_sum(arr: np.ndarray, w: int) -> np.ndarray:
    # zero-padded sum over the w^3 neighborhood of every voxel
    return ndimage.uniform_filter(arr, size=w, mode="constant", cval=0.0) * float(w) ** 3


def _local_cc_with_grad(x: np.ndarray, y: np.ndarray, w: int):
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window size must be odd, got {w}")
    x = x.astype(np.float64, copy=False)
    y = y.astype(np.float64, copy=False)
    n = x.size
    # sums are zero-padded; means use the true in-bounds count so constant
    # volumes have exactly zero local variance at the boundary too
    count = _box_sum(np.ones_like(x), w)
    sx = _box_sum(x, w)
    sy = _box_sum(y, w)
    sxx = _box_sum(x * x, w)
    syy = _box_sum(y * y, w)
    sxy = _box_sum(x * y, w)
    cross = sxy - sx * sy / count
    var_x = sxx - sx * sx / count
    var_y = syy - sy * sy / count
    denom = var_x * var_y + EPS
    cc2 = cross * cross / denom
    value = float(cc2.mean(dtype=np.float64))

    g_cross = 2.0 * cross / (denom * n)
    g_var_x = -cc2 * var_y / (denom * n)
    g_var_y = -cc2 * var_x / (denom * n)
    # the zero-padded box sum is self-adjoint, so gradients flow through it unchanged
    g_sx = _box_sum(-g_cross * sy / count - 2.0 * g_var_x * sx / count, w)
    g_sy = _box_sum(-g_cross * sx / count - 2.0 * g_var_y * sy / count, w)
    g_sxy = _box_sum(g_cross, w)
    g_sxx = _box_sum(g_var_x, w)
    g_syy = _box_sum(g_var_y, w)
    gx = g_sx + g_sxy * y + 2.0 * g_sxx * x
    gy = g_sy + g_sxy * x + 2.0 * g_syy * y
    return value, gx, gy


def local_cc(a: Volume, b: Volume, w: int = DEFAULT_WINDOW) -> float:
    """Mean squared local correlation over w^3 windows, in [0, 1]."""
    _check_dims(a, b)
    value, _, _ = _local_cc_with_grad(a.data, b.data, w)
    return value


def _r1_with_grad(u_arr: np.ndarray):
    D = jacobian.jacobian_raw(u_arr).astype(np.float64, copy=False)
    n_vox = u_arr[0].size
    value = float((D * D).sum(dtype=np.float64) / n_vox)
    grad = jacobian.jacobian_adjoint(D * (2.0 / n_vox))
    return value, grad


def r1_smoothness(u: DisplacementField) -> float:
    """Voxel mean of the squared Frobenius norm of Du."""
    value, _ = _r1_with_grad(u.data)
    return value


def _image_term(s_arr: np.ndarray, t_arr: np.ndarray, cc_mode: str, window: int):
    if cc_mode == GLOBAL:
        cc, gs, gt = _global_cc_with_grad(s_arr, t_arr)
    elif cc_mode == LOCAL:
        cc, gs, gt = _local_cc_with_grad(s_arr, t_arr, window)
    else:
        raise ValueError(f"unknown cc mode {cc_mode!r}")
    return 1.0 - cc, -gs, -gt


def total_loss(
    s_warped: Volume,
    target: Volume,
    u: DisplacementField,
    alpha: float,
    beta: float,
    cc_mode: str = LOCAL,
    window: int = DEFAULT_WINDOW,
) -> LossBreakdown:
    _check_dims(s_warped, target)
    if s_warped.dims != u.dims:
        raise ValueError(f"dims mismatch: image {s_warped.dims} vs field {u.dims}")
    image, _, _ = _image_term(s_warped.data, target.data, cc_mode, window)
    r1, _ = _r1_with_grad(u.data)
    r2 = jacobian.r2_penalty(jacobian.det_map(u))
    total = image + alpha * r1 + beta * r2
    return LossBreakdown(image=image, r1=r1, r2=r2, total=total, alpha=alpha, beta=beta)


def loss_backward(
    s_warped: Volume,
    target: Volume,
    u: DisplacementField,
    alpha: float,
    beta: float,
    cc_mode: str = LOCAL,
    window: int = DEFAULT_WINDOW,
):
    """Gradients of the total loss w.r.t. the warped image and the field.

    Returns (grad_s, grad_u). The image term only touches grad_s; composing
    with the warp (warp_backward) is the caller's job.
    """
    _check_dims(s_warped, target)
    _, grad_s, _ = _image_term(s_warped.data, target.data, cc_mode, window)
    grad_u = np.zeros((3, *u.dims), dtype=np.float64)
    if alpha != 0.0:
        _, g1 = _r1_with_grad(u.data)
        grad_u += alpha * g1
    if beta != 0.0:
        grad_u += beta * jacobian.r2_backward(u)
    return grad_s, grad_u
