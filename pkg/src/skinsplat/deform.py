"""Pose-driven deformation of the Gaussian cloud.

Covers the per-face rigid transform fit between the canonical and posed
mesh, applying/inverting those transforms on Gaussians, the two view
direction definitions used for spherical-harmonics evaluation, nearest-face
parent reassignment (spatial hash grid with a brute-force twin), and
human/background filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import PosedBody
from .cloud import BACKGROUND, GaussianCloud
from .container import ValidationError
from .transforms import (
    RigidTransformSet,
    matrix_to_quat,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
)


def fit_face_transforms(canonical: PosedBody, posed: PosedBody) -> RigidTransformSet:
    """Least-squares rigid transform per face from canonical to posed.

    Each face is aligned through four correspondence points: its three
    vertices plus (centroid + normal). The extra off-plane point pins the
    rotation that three coplanar points leave ambiguous up to reflection.
    Solved by centroid-subtracted SVD with a determinant fix, so the result
    is always a proper rotation; when the underlying motion is rigid the
    fit reproduces the posed vertices exactly.

    Degenerate faces get an identity rotation with a centroid translation.
    """
    if canonical.face_count != posed.face_count:
        raise ValidationError("canonical/posed bodies disagree on face count")
    src = _alignment_points(canonical)
    dst = _alignment_points(posed)

    src_mean = src.mean(axis=1, keepdims=True)
    dst_mean = dst.mean(axis=1, keepdims=True)
    H = np.einsum("fpi,fpj->fij", src - src_mean, dst - dst_mean)
    U, _, Vt = np.linalg.svd(H)
    # R = V diag(1, 1, det) U^T guards against reflections.
    det = np.linalg.det(np.einsum("fij,fjk->fik", np.swapaxes(Vt, 1, 2), np.swapaxes(U, 1, 2)))
    D = np.broadcast_to(np.eye(3), H.shape).copy()
    D[:, 2, 2] = det
    R = np.einsum("fji,fjk,flk->fil", Vt, D, U)
    t = dst_mean[:, 0] - np.einsum("fij,fj->fi", R, src_mean[:, 0])

    degen = np.union1d(canonical.degenerate_faces, posed.degenerate_faces)
    if len(degen):
        R[degen] = np.eye(3)
        t[degen] = posed.face_centers[degen] - canonical.face_centers[degen]
    return RigidTransformSet(R, t)


def _alignment_points(body: PosedBody) -> np.ndarray:
    """(F, 4, 3): triangle vertices and centroid + unit normal."""
    tri = body.vertices[body.faces]
    fourth = body.face_centers + body.face_normals
    return np.concatenate([tri, fourth[:, None, :]], axis=1)


def pose_gaussians(cloud: GaussianCloud, face_transforms: RigidTransformSet) -> GaussianCloud:
    """Move each human Gaussian by its parent face's rigid transform.

    Centers are mapped through R p + t, orientations are left-composed with
    the face rotation; scales, opacities and SH coefficients are untouched.
    Background Gaussians pass through unchanged.
    """
    out = cloud.copy()
    human = cloud.human_mask
    if not human.any():
        return out
    parents = cloud.parents[human]
    if parents.max() >= len(face_transforms):
        raise ValidationError("pose_gaussians: parent face index out of range")
    tr = face_transforms.take(parents)
    out.centers[human] = tr.apply(cloud.centers[human])
    q_face = matrix_to_quat(tr.rotations)
    out.rotations[human] = quat_normalize(quat_multiply(q_face, cloud.rotations[human]))
    return out


def unpose_gaussians(
    cloud: GaussianCloud,
    face_transforms: RigidTransformSet,
    residuals: RigidTransformSet | None = None,
) -> GaussianCloud:
    """Invert the forward deformation chain: residual first, then face transform.

    `residuals` holds one rigid transform per human Gaussian (in human row
    order); None means identity residuals. Quaternions are renormalized, so
    the round trip is exact up to that renormalization.
    """
    out = cloud.copy()
    human = cloud.human_mask
    if not human.any():
        return out
    parents = cloud.parents[human]
    chain = face_transforms.take(parents)
    if residuals is not None:
        if len(residuals) != int(human.sum()):
            raise ValidationError(
                f"unpose_gaussians: {len(residuals)} residuals for {int(human.sum())} human Gaussians"
            )
        chain = residuals.compose(chain)
    inv = chain.inverse()
    out.centers[human] = inv.apply(cloud.centers[human])
    q_inv = matrix_to_quat(inv.rotations)
    out.rotations[human] = quat_normalize(quat_multiply(q_inv, cloud.rotations[human]))
    return out


def camera_relative_directions(
    centers: np.ndarray, camera_center: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors from each Gaussian center toward the camera center.

    Returns (directions, flagged) where flagged indexes centers closer than
    1e-12 to the camera; those rows fall back to (0, 0, 1).
    """
    camera_center = np.asarray(camera_center, dtype=np.float64)
    if not np.isfinite(camera_center).all():
        raise ValidationError("camera center must be finite")
    d = camera_center[None, :] - centers
    norms = np.linalg.norm(d, axis=1)
    flagged = np.flatnonzero(norms < 1e-12)
    safe = np.where(norms[:, None] > 1e-12, norms[:, None], 1.0)
    out = d / safe
    if len(flagged):
        out[flagged] = [0.0, 0.0, 1.0]
    return out, flagged


def deformed_normal_directions(
    cloud: GaussianCloud,
    face_transforms: RigidTransformSet,
    residuals: RigidTransformSet | None = None,
) -> np.ndarray:
    """Canonical surface normals rotated through both deformation stages.

    Returns one unit vector per human Gaussian (human row order): the face
    rotation is applied first, then the per-Gaussian residual rotation.
    """
    human = cloud.human_mask
    normals = cloud.canonical_normals[human]
    if normals.size and np.abs(np.linalg.norm(normals, axis=1) - 1.0).max() > 1e-3:
        raise ValidationError("deformed_normal_directions requires unit canonical normals")
    Rt = face_transforms.rotations[cloud.parents[human]]
    d = np.einsum("nij,nj->ni", Rt, normals)
    if residuals is not None:
        d = np.einsum("nij,nj->ni", residuals.rotations, d)
    return d


def filter_background(cloud: GaussianCloud) -> GaussianCloud:
    """Keep only face-parented (human) Gaussians, order preserved."""
    return cloud.take(np.flatnonzero(cloud.human_mask))


# -- nearest-face search -----------------------------------------------------


def point_triangle_distances(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances (P, F) from points to solid triangles.

    Region-based closest-point computation (vertices / edges / interior),
    fully vectorized. Both the brute-force scan and the grid-accelerated
    search call this, so their distances agree bitwise.
    """
    p = points[:, None, :]
    a, b, c = triangles[None, :, 0], triangles[None, :, 1], triangles[None, :, 2]
    return _point_tri_dist_core(p, a, b, c)


def _point_tri_dist_core(p, a, b, c):
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_abc = va + vb + vc
    denom_abc = np.where(denom_abc != 0, denom_abc, 1.0)
    v_face = vb / denom_abc
    w_face = vc / denom_abc
    closest = a + v_face[..., None] * ab + w_face[..., None] * ac

    # Edge AC region.
    w_ac = np.clip(d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0.0, 1.0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None], a + w_ac[..., None] * ac, closest)
    # Edge BC region.
    d43 = d4 - d3
    d56 = d5 - d6
    w_bc = np.clip(d43 / np.where(d43 + d56 != 0, d43 + d56, 1.0), 0.0, 1.0)
    on_bc = (va <= 0) & (d43 >= 0) & (d56 >= 0)
    closest = np.where(on_bc[..., None], b + w_bc[..., None] * (c - b), closest)
    # Edge AB region.
    v_ab = np.clip(d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0.0, 1.0)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None], a + v_ab[..., None] * ab, closest)
    # Vertex regions win last (they are the outermost classification).
    on_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(on_a[..., None], np.broadcast_to(a, closest.shape), closest)
    on_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(on_b[..., None], np.broadcast_to(b, closest.shape), closest)
    on_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(on_c[..., None], np.broadcast_to(c, closest.shape), closest)

    return np.linalg.norm(p - closest, axis=-1)


def nearest_faces_bruteforce(
    points: np.ndarray, triangles: np.ndarray, chunk: int = 512
) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive O(P*F) scan: (face index, distance) per point.

    Ties break toward the lowest face index (argmin semantics). Kept as the
    oracle for the grid-accelerated search.
    """
    n = points.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for s in range(0, n, chunk):
        d = point_triangle_distances(points[s : s + chunk], triangles)
        idx[s : s + chunk] = np.argmin(d, axis=1)
        dist[s : s + chunk] = d[np.arange(d.shape[0]), idx[s : s + chunk]]
    return idx, dist


class FaceGrid:
    """Uniform spatial hash over face bounding boxes for nearest-face queries.

    Exact: candidate rings are expanded until no unvisited cell can contain
    a face closer than the best distance found, and distances reuse
    point_triangle_distances so results match the brute-force scan bitwise,
    including lowest-index tie-breaks.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, cell_size: float | None = None):
        self.triangles = vertices[faces]
        lo = self.triangles.min(axis=(0, 1))
        hi = self.triangles.max(axis=(0, 1))
        if cell_size is None:
            edge = np.linalg.norm(self.triangles[:, 1] - self.triangles[:, 0], axis=1)
            cell_size = max(float(edge.mean()) * 2.0, 1e-6)
        self.cell = float(cell_size)
        self.origin = lo - 0.5 * self.cell
        self.dims = np.maximum(((hi - self.origin) / self.cell).astype(np.int64) + 1, 1)

        tmin = ((self.triangles.min(axis=1) - self.origin) / self.cell).astype(np.int64)
        tmax = ((self.triangles.max(axis=1) - self.origin) / self.cell).astype(np.int64)
        buckets: dict[tuple[int, int, int], list[int]] = {}
        for f in range(self.triangles.shape[0]):
            for ix in range(tmin[f, 0], tmax[f, 0] + 1):
                for iy in range(tmin[f, 1], tmax[f, 1] + 1):
                    for iz in range(tmin[f, 2], tmax[f, 2] + 1):
                        buckets.setdefault((ix, iy, iz), []).append(f)
        self.buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    def _cells_in_ring(self, center: np.ndarray, r: int):
        cx, cy, cz = center
        if r == 0:
            yield (cx, cy, cz)
            return
        for ix in range(cx - r, cx + r + 1):
            for iy in range(cy - r, cy + r + 1):
                for iz in range(cz - r, cz + r + 1):
                    if max(abs(ix - cx), abs(iy - cy), abs(iz - cz)) == r:
                        yield (ix, iy, iz)

    def query(self, point: np.ndarray, max_distance: float = np.inf) -> tuple[int, float]:
        """Nearest face index and distance; (-1, inf) if beyond max_distance."""
        cell = np.floor((point - self.origin) / self.cell).astype(np.int64)
        best_idx, best_dist = -1, np.inf
        r = 0
        max_r = int(np.ceil(max(self.dims))) + 2
        while r <= max_r:
            # Once a candidate is known, stop when the nearest possible point
            # of the next unvisited ring exceeds it (or the cutoff).
            ring_min = (r - 1) * self.cell if r > 0 else 0.0
            bound = min(best_dist, max_distance)
            if r > 0 and ring_min > bound + 1e-12:
                break
            cand = [self.buckets[c] for c in self._cells_in_ring(cell, r) if c in self.buckets]
            if cand:
                faces = np.unique(np.concatenate(cand))
                d = point_triangle_distances(point[None], self.triangles[faces])[0]
                k = int(np.argmin(d))
                # Lowest-index tie-break: np.unique sorts, argmin takes first.
                if d[k] < best_dist or (d[k] == best_dist and faces[k] < best_idx):
                    best_idx, best_dist = int(faces[k]), float(d[k])
            r += 1
        if best_dist > max_distance:
            return -1, np.inf
        return best_idx, best_dist


def reassign_parents(
    cloud: GaussianCloud,
    canonical: PosedBody,
    tau: float,
    grid: FaceGrid | None = None,
) -> GaussianCloud:
    """Re-bind each human Gaussian to its nearest canonical face.

    Gaussians farther than `tau` from the surface are handed to the
    background; background Gaussians never come back. Ties break toward the
    lowest face index. Reassigned Gaussians also refresh their canonical
    normal from the new parent face so direction correction stays coherent.
    """
    out = cloud.copy()
    human = np.flatnonzero(cloud.human_mask)
    if len(human) == 0:
        return out
    if grid is None:
        grid = FaceGrid(canonical.vertices, canonical.faces)
    pts = cloud.centers[human]
    new_parents = np.empty(len(human), dtype=np.int64)
    for i, p in enumerate(pts):
        idx, _ = grid.query(p, max_distance=tau)
        new_parents[i] = BACKGROUND if idx < 0 else idx
    out.parents[human] = new_parents
    kept = new_parents != BACKGROUND
    if kept.any():
        out.canonical_normals[human[kept]] = canonical.face_normals[new_parents[kept]]
    return out
