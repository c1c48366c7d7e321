"""Real spherical-harmonic radiance for N-band Gaussians.

Coefficients are ordered ``(l, m) = (0, 0), (1, -1), (1, 0), (1, 1), (2, -2), ...``
with the sign convention used by the common 3DGS CUDA kernels.  Decoded
radiance is ``sum_k c_k Y_k(dir) + 0.5`` clamped below at zero, per band.
"""
from __future__ import annotations

import numpy as np

from .core import MAX_SH_DEGREE, DomainError, GaussianCloud, num_sh_coeffs

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)
RADIANCE_OFFSET = 0.5


def _check_degree(degree: int) -> None:
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise DomainError(f"SH degree {degree} outside [0, {MAX_SH_DEGREE}]")


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values for directions of shape (..., 3); no unit-norm check."""
    _check_degree(degree)
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (2 * zz - xx - yy),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3 * xx - yy), C3[1] * x * y * z,
                C3[2] * y * (4 * zz - xx - yy), C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                C3[4] * x * (4 * zz - xx - yy), C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d basis / d dir for (..., 3) directions, shape (..., K, 3).

    Derivatives of the polynomial extension, i.e. the direction components
    are treated as independent.
    """
    _check_degree(degree)
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (-2 * C3[2] * x * y, C3[2] * (4 * zz - xx - 3 * yy), 8 * C3[2] * y * z),
            (-6 * C3[3] * x * z, -6 * C3[3] * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), -2 * C3[4] * x * y, 8 * C3[4] * x * z),
            (2 * C3[5] * x * z, -2 * C3[5] * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), -6 * C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_unit(dir_: np.ndarray) -> np.ndarray:
    dir_ = np.asarray(dir_, dtype=np.float64)
    if dir_.shape[-1] != 3 or np.any(np.abs(np.linalg.norm(dir_, axis=-1) - 1.0) > 1e-6):
        raise DomainError("direction must be a unit 3-vector")
    return dir_


def eval_sh_basis(degree: int, dir_) -> np.ndarray:
    """Real SH basis values, length ``(degree + 1) ** 2``, for a unit direction."""
    return sh_basis(degree, _check_unit(dir_))


def decode(coeffs: np.ndarray, basis_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radiance from coefficients (..., N, K) and basis (..., K).

    Returns the clamped radiance and the pre-clamp values.
    """
    raw = np.einsum("...nk,...k->...n", coeffs, basis_values) + RADIANCE_OFFSET
    return np.maximum(raw, 0), raw


def decode_vjp(coeffs, basis_values, basis_jac, raw, upstream):
    """Gradients of decode w.r.t. coefficients and (unnormalized) direction."""
    g = np.where(raw > 0, upstream, 0)
    grad_coeffs = g[..., :, None] * basis_values[..., None, :]
    grad_basis = np.einsum("...n,...nk->...k", g, coeffs)
    grad_dir = np.einsum("...k,...kj->...j", grad_basis, basis_jac)
    return grad_coeffs, grad_dir


def _gaussian_coeffs(cloud: GaussianCloud, index: int) -> np.ndarray:
    if not 0 <= index < cloud.count:
        raise IndexError(f"gaussian index {index} out of range for {cloud.count} Gaussians")
    return cloud.sh_coeffs[index]


def eval_radiance(cloud: GaussianCloud, index: int, view_dir) -> np.ndarray:
    """N-band radiance of one Gaussian seen along ``view_dir``."""
    coeffs = _gaussian_coeffs(cloud, index)
    basis = sh_basis(cloud.sh_degree, _check_unit(view_dir))
    return decode(coeffs, basis)[0]


def eval_radiance_vjp(cloud: GaussianCloud, index: int, view_dir, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`eval_radiance`.

    Returns ``(grad_sh_coeffs, grad_view_dir)`` with shapes ``(N, K)`` and ``(3,)``.
    The direction gradient is that of the polynomial extension (components
    treated as independent); project onto the tangent plane if needed.
    """
    coeffs = _gaussian_coeffs(cloud, index)
    dir_ = _check_unit(view_dir)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cloud.basis.band_count,):
        raise DomainError(f"upstream gradient must have {cloud.basis.band_count} bands")
    basis = sh_basis(cloud.sh_degree, dir_)
    _, raw = decode(coeffs, basis)
    return decode_vjp(coeffs, basis, sh_basis_jacobian(cloud.sh_degree, dir_), raw, upstream)


__all__ = [
    "C0", "C1", "C2", "C3", "RADIANCE_OFFSET", "num_sh_coeffs",
    "sh_basis", "sh_basis_jacobian", "eval_sh_basis", "decode", "decode_vjp",
    "eval_radiance", "eval_radiance_vjp",
]
