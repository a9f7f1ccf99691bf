"""Real spherical harmonics basis up to degree 3, with direction gradients."""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

MAX_DEGREE = 3


def band_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values (N, (degree+1)^2) for unit directions (N, 3)."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in [0, {MAX_DEGREE}]")
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, band_count(degree)))
    out[:, 0] = C0
    if degree >= 1:
        out[:, 1] = -C1 * y
        out[:, 2] = C1 * z
        out[:, 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = C2[0] * x * y
        out[:, 5] = C2[1] * y * z
        out[:, 6] = C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = C2[3] * x * z
        out[:, 8] = C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = C3[1] * x * y * z
        out[:, 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = C3[5] * z * (xx - yy)
        out[:, 15] = C3[6] * x * (xx - yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives (N, K, 3) of each basis value w.r.t. the direction."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    g = np.zeros((n, band_count(degree), 3))
    if degree >= 1:
        g[:, 1] = np.stack([zero, np.full(n, -C1), zero], axis=1)
        g[:, 2] = np.stack([zero, zero, np.full(n, C1)], axis=1)
        g[:, 3] = np.stack([np.full(n, -C1), zero, zero], axis=1)
    if degree >= 2:
        g[:, 4] = C2[0] * np.stack([y, x, zero], axis=1)
        g[:, 5] = C2[1] * np.stack([zero, z, y], axis=1)
        g[:, 6] = C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=1)
        g[:, 7] = C2[3] * np.stack([z, zero, x], axis=1)
        g[:, 8] = C2[4] * np.stack([2.0 * x, -2.0 * y, zero], axis=1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, zero], axis=1)
        g[:, 10] = C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        g[:, 11] = C3[2] * np.stack([-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=1)
        g[:, 12] = C3[3] * np.stack([-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=1)
        g[:, 13] = C3[4] * np.stack([4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=1)
        g[:, 14] = C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=1)
        g[:, 15] = C3[6] * np.stack([3.0 * xx - yy, -2.0 * x * y, zero], axis=1)
    return g
