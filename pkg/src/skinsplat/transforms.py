"""Rotation and rigid-transform primitives shared across the pipeline.

Quaternions are scalar-first (w, x, y, z) and kept unit-norm. Rigid
transforms are stored as batches (structure-of-arrays) since every hot
loop operates on whole sets of faces or Gaussians at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions along the last axis."""
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) -> rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) -> unit quaternions (..., 4), w >= 0.

    Uses the Shepperd branch on the largest diagonal combination so the
    result is stable for all rotations, not just small angles.
    """
    R = np.asarray(R)
    batch = R.shape[:-2]
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    # Four squared-magnitude candidates (w, x, y, z).
    qsq = np.stack(
        [
            1.0 + m00 + m11 + m22,
            1.0 + m00 - m11 - m22,
            1.0 - m00 + m11 - m22,
            1.0 - m00 - m11 + m22,
        ],
        axis=-1,
    )
    best = np.argmax(qsq, axis=-1)
    q = np.empty(batch + (4,), dtype=R.dtype)

    s = np.sqrt(np.maximum(qsq[..., 0], 0.0)) * 0.5
    d = 4.0 * np.where(s == 0, 1.0, s)
    cand0 = np.stack(
        [s, (R[..., 2, 1] - R[..., 1, 2]) / d,
         (R[..., 0, 2] - R[..., 2, 0]) / d, (R[..., 1, 0] - R[..., 0, 1]) / d],
        axis=-1,
    )
    s = np.sqrt(np.maximum(qsq[..., 1], 0.0)) * 0.5
    d = 4.0 * np.where(s == 0, 1.0, s)
    cand1 = np.stack(
        [(R[..., 2, 1] - R[..., 1, 2]) / d, s,
         (R[..., 0, 1] + R[..., 1, 0]) / d, (R[..., 0, 2] + R[..., 2, 0]) / d],
        axis=-1,
    )
    s = np.sqrt(np.maximum(qsq[..., 2], 0.0)) * 0.5
    d = 4.0 * np.where(s == 0, 1.0, s)
    cand2 = np.stack(
        [(R[..., 0, 2] - R[..., 2, 0]) / d, (R[..., 0, 1] + R[..., 1, 0]) / d,
         s, (R[..., 1, 2] + R[..., 2, 1]) / d],
        axis=-1,
    )
    s = np.sqrt(np.maximum(qsq[..., 3], 0.0)) * 0.5
    d = 4.0 * np.where(s == 0, 1.0, s)
    cand3 = np.stack(
        [(R[..., 1, 0] - R[..., 0, 1]) / d, (R[..., 0, 2] + R[..., 2, 0]) / d,
         (R[..., 1, 2] + R[..., 2, 1]) / d, s],
        axis=-1,
    )
    cands = np.stack([cand0, cand1, cand2, cand3], axis=-2)
    q = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    # Fix the sign so w >= 0 (w == 0 left untouched).
    q = np.where(q[..., :1] < 0, -q, q)
    return quat_normalize(q)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, broadcasting over leading axes."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with L(q) @ p == quat_multiply(q, p)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    L = np.empty(q.shape[:-1] + (4, 4), dtype=q.dtype)
    L[..., 0, 0], L[..., 0, 1], L[..., 0, 2], L[..., 0, 3] = w, -x, -y, -z
    L[..., 1, 0], L[..., 1, 1], L[..., 1, 2], L[..., 1, 3] = x, w, -z, y
    L[..., 2, 0], L[..., 2, 1], L[..., 2, 2], L[..., 2, 3] = y, z, w, -x
    L[..., 3, 0], L[..., 3, 1], L[..., 3, 2], L[..., 3, 3] = z, -y, x, w
    return L


def quat_right_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix R(q) with R(q) @ p == quat_multiply(p, q)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (4, 4), dtype=q.dtype)
    R[..., 0, 0], R[..., 0, 1], R[..., 0, 2], R[..., 0, 3] = w, -x, -y, -z
    R[..., 1, 0], R[..., 1, 1], R[..., 1, 2], R[..., 1, 3] = x, w, z, -y
    R[..., 2, 0], R[..., 2, 1], R[..., 2, 2], R[..., 2, 3] = y, -z, w, x
    R[..., 3, 0], R[..., 3, 1], R[..., 3, 2], R[..., 3, 3] = z, y, -x, w
    return R


def axis_angle_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) -> rotation matrices via Rodrigues."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec, axis=-1)
    safe = np.where(angle > 0, angle, 1.0)
    axis = rotvec / safe[..., None]
    return rotation_about_axis(axis, angle)


def rotation_about_axis(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """R = cos(a) I + sin(a) [u]x + (1 - cos(a)) u u^T for unit axes u."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    c = np.cos(angle)[..., None, None]
    s = np.sin(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), axis.shape[:-1] + (3, 3))
    K = cross_matrix(axis)
    outer = axis[..., :, None] * axis[..., None, :]
    return c * eye + s * K + (1.0 - c[..., 0, 0])[..., None, None] * outer


def cross_matrix(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrices [v]x with [v]x @ w == cross(v, w)."""
    v = np.asarray(v)
    K = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


@dataclass
class RigidTransformSet:
    """A batch of rigid transforms p -> R p + t.

    rotations: (K, 3, 3) orthonormal, det +1
    translations: (K, 3)
    """

    rotations: np.ndarray
    translations: np.ndarray

    def __len__(self) -> int:
        return self.rotations.shape[0]

    @classmethod
    def identity(cls, n: int) -> "RigidTransformSet":
        return cls(
            rotations=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            translations=np.zeros((n, 3)),
        )

    @classmethod
    def single(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransformSet":
        return cls(
            rotations=np.asarray(rotation, dtype=np.float64).reshape(1, 3, 3),
            translations=np.asarray(translation, dtype=np.float64).reshape(1, 3),
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (K, 3) elementwise, or broadcast a single transform."""
        return np.einsum("kij,kj->ki", self.rotations, points) + self.translations

    def inverse(self) -> "RigidTransformSet":
        rt = np.swapaxes(self.rotations, -1, -2)
        return RigidTransformSet(rt, -np.einsum("kij,kj->ki", rt, self.translations))

    def compose(self, other: "RigidTransformSet") -> "RigidTransformSet":
        """self after other: x -> self(other(x))."""
        return RigidTransformSet(
            np.einsum("kij,kjl->kil", self.rotations, other.rotations),
            np.einsum("kij,kj->ki", self.rotations, other.translations) + self.translations,
        )

    def take(self, indices: np.ndarray) -> "RigidTransformSet":
        return RigidTransformSet(self.rotations[indices], self.translations[indices])

    def validate(self, atol: float = 1e-6) -> None:
        """Check orthonormality and det +1; raises ValueError on failure."""
        RtR = np.einsum("kji,kjl->kil", self.rotations, self.rotations)
        err = np.abs(RtR - np.eye(3)).max() if len(self) else 0.0
        if err > atol:
            raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3e})")
        if len(self):
            dets = np.linalg.det(self.rotations)
            if np.abs(dets - 1.0).max() > atol:
                raise ValueError("rotation determinant != +1")
