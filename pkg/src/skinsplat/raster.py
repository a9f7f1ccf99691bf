"""Differentiable tile-based splatting of 3D Gaussians on the CPU.

Forward: perspective projection with a local affine (EWA) covariance
approximation, per-tile binning by the 3-sigma ellipse bound, front-to-back
alpha compositing with early termination, plus alpha and expected-depth
outputs. Backward: exact reverse-mode gradients for centers, rotations,
log-scales, opacity logits, SH coefficients and the supplied view
directions.

A fragment contributes iff its squared Mahalanobis distance is <= 9 and its
alpha is >= 1/255. The brute-force reference renderer applies the identical
predicate, so the tiled renderer and the oracle agree to float precision.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud, sigmoid
from .sh import sh_basis, sh_basis_grad
from .transforms import RigidTransformSet

ALPHA_CAP = 0.99
ALPHA_MIN = 1.0 / 255.0
MAHA_MAX = 9.0  # 3-sigma ellipse bound
T_TERMINATE = 1e-4
DEPTH_EPS = 1e-10


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int
    near: float = 0.1
    far: float = 100.0
    camera_id: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        RigidTransformSet.single(self.rotation, self.translation).validate(atol=1e-5)

    @property
    def center(self) -> np.ndarray:
        """World-space camera center."""
        return -self.rotation.T @ self.translation

    @classmethod
    def looking_at(cls, position, target, up=(0.0, 1.0, 0.0), **kw) -> "Camera":
        """Convenience constructor: +z forward, +x right, +y down."""
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=0)
        return cls(rotation=R, translation=-R @ position, **kw)


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians plus everything backward needs."""

    means2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2) after low-pass
    conics: np.ndarray  # (N, 3) packed inverse covariance (a, b, c)
    depths: np.ndarray  # (N,) view-space z
    radii: np.ndarray  # (N,) conservative pixel radius of the 3-sigma ellipse
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]
    valid: np.ndarray  # (N,) bool, False = culled
    width: int
    height: int
    cache: dict = field(default_factory=dict)

    @property
    def culled(self) -> np.ndarray:
        return np.flatnonzero(~self.valid)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    depth: np.ndarray  # (H, W) alpha-weighted expected view depth
    background: np.ndarray  # (3,)
    tile_size: int
    cache: dict | None = None  # tile traversal state for backward


@dataclass
class GaussianGrads:
    """d(loss)/d(attribute) for every Gaussian, zero where culled/invisible."""

    centers: np.ndarray
    rotations: np.ndarray  # w.r.t. the raw (pre-normalization) quaternion
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    directions: np.ndarray
    mean2d: np.ndarray  # (N, 2) screen-space center gradient, for densify stats
    visible: np.ndarray  # (N,) bool: touched at least one tile


def project_gaussians(
    cloud: GaussianCloud,
    camera: Camera,
    directions: np.ndarray,
    low_pass: float = 0.3,
) -> ProjectedGaussians:
    """Project all Gaussians into screen space and evaluate SH colors.

    `directions` supplies the per-Gaussian unit view direction (the caller
    decides between camera-relative and deformed-normal definitions). Culled
    Gaussians (outside [near, far] or fully off-image) are flagged, not
    dropped, so gradient buffers stay aligned.
    """
    n = len(cloud)
    W, d = camera.rotation, camera.translation
    q_raw = cloud.rotations
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / q_norm
    R = _quat_to_matrix(q)
    s = np.exp(cloud.log_scales)
    A = R * s[:, None, :]  # columns scaled: Sigma = A A^T
    sigma = np.einsum("nij,nkj->nik", A, A)

    t = cloud.centers @ W.T + d
    tz = t[:, 2]
    in_depth = (tz > camera.near) & (tz < camera.far)
    tz_safe = np.where(in_depth, tz, 1.0)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / tz_safe
    J[:, 0, 2] = -camera.fx * t[:, 0] / tz_safe**2
    J[:, 1, 1] = camera.fy / tz_safe
    J[:, 1, 2] = -camera.fy * t[:, 1] / tz_safe**2
    M = np.einsum("nij,jk->nik", J, W)
    cov2d = np.einsum("nij,njk,nlk->nil", M, sigma, M)
    cov2d[:, 0, 0] += low_pass
    cov2d[:, 1, 1] += low_pass

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    det_safe = np.where(det > 0, det, 1.0)
    conics = np.stack(
        [cov2d[:, 1, 1] / det_safe, -cov2d[:, 0, 1] / det_safe, cov2d[:, 0, 0] / det_safe],
        axis=1,
    )

    means2d = np.stack(
        [camera.fx * t[:, 0] / tz_safe + camera.cx, camera.fy * t[:, 1] / tz_safe + camera.cy],
        axis=1,
    )

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(3.0 * np.sqrt(np.maximum(lam_max, 0.0)))

    on_image = (
        (means2d[:, 0] + radii >= 0)
        & (means2d[:, 0] - radii <= camera.width - 1)
        & (means2d[:, 1] + radii >= 0)
        & (means2d[:, 1] - radii <= camera.height - 1)
    )
    valid = in_depth & on_image & (det > 0)

    degree = cloud.sh_degree
    basis = sh_basis(directions, degree)
    raw_colors = np.einsum("nck,nk->nc", cloud.sh_coeffs, basis) + 0.5
    colors = np.clip(raw_colors, 0.0, 1.0)

    return ProjectedGaussians(
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=tz,
        radii=radii,
        opacities=sigmoid(cloud.opacity_logits),
        colors=colors,
        valid=valid,
        width=camera.width,
        height=camera.height,
        cache=dict(
            q_raw=q_raw, q=q, q_norm=q_norm, R=R, s=s, A=A, sigma=sigma, t=t,
            J=J, M=M, W=W, fx=camera.fx, fy=camera.fy, basis=basis,
            raw_colors=raw_colors, directions=directions, degree=degree,
            sh_coeffs=cloud.sh_coeffs, opacity_logits=cloud.opacity_logits,
        ),
    )


def _quat_to_matrix(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _bin_tiles(proj: ProjectedGaussians, tile_size: int):
    """Sorted (tile, depth, index) fragment lists.

    Returns (order, tile_starts, n_tiles_x, n_tiles_y): `order` concatenates
    Gaussian indices per tile, depth-ascending with index tie-break, and
    tile_starts[t]:tile_starts[t+1] slices tile t's span.
    """
    W, H = proj.width, proj.height
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    idx = np.flatnonzero(proj.valid)
    if len(idx) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(ntx * nty + 1, dtype=np.int64), ntx, nty

    mx, my = proj.means2d[idx, 0], proj.means2d[idx, 1]
    r = proj.radii[idx]
    tx0 = np.clip(np.floor((mx - r) / tile_size).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((mx + r) / tile_size).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((my - r) / tile_size).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((my + r) / tile_size).astype(np.int64), 0, nty - 1)

    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    g_rep = np.repeat(idx, counts)
    nx_rep = np.repeat(tx1 - tx0 + 1, counts)
    offs = np.arange(len(g_rep)) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = np.repeat(tx0, counts) + offs % nx_rep
    ty = np.repeat(ty0, counts) + offs // nx_rep
    tiles = ty * ntx + tx

    order = np.lexsort((g_rep, proj.depths[g_rep], tiles))
    g_sorted = g_rep[order]
    tiles_sorted = tiles[order]
    tile_starts = np.searchsorted(tiles_sorted, np.arange(ntx * nty + 1))
    return g_sorted, tile_starts, ntx, nty


def _tile_pixels(tx, ty, tile_size, W, H):
    x0, y0 = tx * tile_size, ty * tile_size
    x1, y1 = min(x0 + tile_size, W), min(y0 + tile_size, H)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.ravel().astype(np.float64), ys.ravel().astype(np.float64), (y0, y1, x0, x1)


def _fragment_alphas(proj, gathered, xs, ys):
    """Alpha matrix (K, P) for the gathered Gaussians over tile pixels."""
    dx = xs[None, :] - proj.means2d[gathered, 0][:, None]
    dy = ys[None, :] - proj.means2d[gathered, 1][:, None]
    a = proj.conics[gathered, 0][:, None]
    b = proj.conics[gathered, 1][:, None]
    c = proj.conics[gathered, 2][:, None]
    maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    g = np.exp(-0.5 * maha)
    m = proj.opacities[gathered][:, None] * g
    alpha = np.minimum(ALPHA_CAP, m)
    live = (maha <= MAHA_MAX) & (m >= ALPHA_MIN)
    alpha = np.where(live, alpha, 0.0)
    return alpha, live, m, g, dx, dy


def _composite(alpha):
    """Transmittance before each fragment and the composited weights."""
    T_after = np.cumprod(1.0 - alpha, axis=0)
    T_before = np.vstack([np.ones((1, alpha.shape[1])), T_after[:-1]])
    include = T_before >= T_TERMINATE
    w = alpha * T_before * include
    return w, T_before, include


def rasterize_forward(
    proj: ProjectedGaussians,
    tile_size: int = 16,
    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
    need_cache: bool = False,
    workers: int = 1,
) -> RenderOutput:
    """Composite projected Gaussians into rgb / alpha / expected-depth images."""
    W, H = proj.width, proj.height
    bg = np.asarray(background, dtype=np.float64)
    rgb = np.empty((H, W, 3))
    rgb[:] = bg
    alpha_img = np.zeros((H, W))
    depth_img = np.zeros((H, W))

    order, tile_starts, ntx, nty = _bin_tiles(proj, tile_size)

    def run_tile(tid):
        s, e = tile_starts[tid], tile_starts[tid + 1]
        if s == e:
            return
        gathered = order[s:e]
        tx, ty = tid % ntx, tid // ntx
        xs, ys, (y0, y1, x0, x1) = _tile_pixels(tx, ty, tile_size, W, H)
        alpha, _, _, _, _, _ = _fragment_alphas(proj, gathered, xs, ys)
        w, _, _ = _composite(alpha)
        acc = w.sum(axis=0)
        col = np.einsum("kp,kc->pc", w, proj.colors[gathered])
        dep = (w * proj.depths[gathered][:, None]).sum(axis=0) / np.maximum(acc, DEPTH_EPS)
        shape = (y1 - y0, x1 - x0)
        rgb[y0:y1, x0:x1] = (col + (1.0 - acc)[:, None] * bg).reshape(shape + (3,))
        alpha_img[y0:y1, x0:x1] = acc.reshape(shape)
        depth_img[y0:y1, x0:x1] = dep.reshape(shape)

    tile_ids = range(ntx * nty)
    if workers > 1:
        # Tiles own disjoint pixel rectangles, so threaded writes are safe
        # and the result is independent of scheduling.
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, tile_ids))
    else:
        for tid in tile_ids:
            run_tile(tid)

    cache = dict(order=order, tile_starts=tile_starts, ntx=ntx, nty=nty) if need_cache else None
    return RenderOutput(rgb, alpha_img, depth_img, bg, tile_size, cache)


def rasterize_backward(
    proj: ProjectedGaussians,
    output: RenderOutput,
    image_grad: np.ndarray,
    workers: int = 1,
) -> GaussianGrads:
    """Exact reverse of compositing, projection, covariance and SH chains.

    `image_grad` is d(loss)/d(rgb), shape (H, W, 3). Alpha and depth outputs
    carry no upstream gradient in the training objective.
    """
    if output.cache is None:
        raise ValueError("rasterize_backward needs a forward pass with need_cache=True")
    if image_grad.shape != output.rgb.shape:
        raise ValueError("image_grad shape mismatch")
    n = proj.means2d.shape[0]
    order = output.cache["order"]
    tile_starts = output.cache["tile_starts"]
    ntx, nty = output.cache["ntx"], output.cache["nty"]
    tile_size = output.tile_size
    W, H = proj.width, proj.height
    bg = output.background

    def run_tiles(tile_ids):
        d_color = np.zeros((n, 3))
        d_conic = np.zeros((n, 3))
        d_mean = np.zeros((n, 2))
        d_opac = np.zeros(n)
        seen = np.zeros(n, dtype=bool)
        for tid in tile_ids:
            s, e = tile_starts[tid], tile_starts[tid + 1]
            if s == e:
                continue
            gathered = order[s:e]
            tx, ty = tid % ntx, tid // ntx
            xs, ys, (y0, y1, x0, x1) = _tile_pixels(tx, ty, tile_size, W, H)
            alpha, live, m, g, dx, dy = _fragment_alphas(proj, gathered, xs, ys)
            w, T_before, include = _composite(alpha)
            seen[gathered] = True

            dC = image_grad[y0:y1, x0:x1].reshape(-1, 3)  # (P, 3)
            # d w_k = (c_k - bg) . dC
            col = proj.colors[gathered]
            dw = np.einsum("kc,pc->kp", col, dC) - (dC @ bg)[None, :]
            d_color[gathered] += np.einsum("kp,pc->kc", w, dC)

            G = dw * w
            suffix = np.cumsum(G[::-1], axis=0)[::-1] - G
            d_alpha = dw * T_before * include - suffix / (1.0 - alpha)
            d_alpha = np.where(live, d_alpha, 0.0)

            dm = np.where(m < ALPHA_CAP, d_alpha, 0.0)
            opac = proj.opacities[gathered][:, None]
            d_opac_rows = (dm * g).sum(axis=1)
            dg = dm * opac
            dq = dg * (-0.5) * g
            d_conic[gathered, 0] += (dq * dx * dx).sum(axis=1)
            d_conic[gathered, 1] += (dq * 2.0 * dx * dy).sum(axis=1)
            d_conic[gathered, 2] += (dq * dy * dy).sum(axis=1)
            a = proj.conics[gathered, 0][:, None]
            b = proj.conics[gathered, 1][:, None]
            c = proj.conics[gathered, 2][:, None]
            d_mean[gathered, 0] += (dq * -(2.0 * a * dx + 2.0 * b * dy)).sum(axis=1)
            d_mean[gathered, 1] += (dq * -(2.0 * b * dx + 2.0 * c * dy)).sum(axis=1)
            d_opac[gathered] += d_opac_rows
        return d_color, d_conic, d_mean, d_opac, seen

    all_tiles = np.arange(ntx * nty)
    if workers > 1:
        chunks = np.array_split(all_tiles, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_tiles, chunks))
        # Merge in fixed chunk order for reproducibility.
        d_color = sum(p[0] for p in parts)
        d_conic = sum(p[1] for p in parts)
        d_mean = sum(p[2] for p in parts)
        d_opac = sum(p[3] for p in parts)
        seen = np.logical_or.reduce([p[4] for p in parts])
    else:
        d_color, d_conic, d_mean, d_opac, seen = run_tiles(all_tiles)

    return _projection_backward(proj, d_color, d_conic, d_mean, d_opac, seen)


def _projection_backward(proj, d_color, d_conic, d_mean, d_opac, seen):
    """Chain screen-space gradients back to the 3D Gaussian attributes."""
    cache = proj.cache
    n = proj.means2d.shape[0]
    t = cache["t"]
    J, M, W = cache["J"], cache["M"], cache["W"]
    fx, fy = cache["fx"], cache["fy"]
    sigma, A, R, s = cache["sigma"], cache["A"], cache["R"], cache["s"]
    q, q_raw, q_norm = cache["q"], cache["q_raw"], cache["q_norm"]

    live = proj.valid & seen
    mask = live[:, None]

    # conic = inv(cov2d):  dCov = -Conic dConic_sym Conic.
    dconic_full = np.empty((n, 2, 2))
    dconic_full[:, 0, 0] = d_conic[:, 0]
    dconic_full[:, 0, 1] = dconic_full[:, 1, 0] = 0.5 * d_conic[:, 1]
    dconic_full[:, 1, 1] = d_conic[:, 2]
    conic_full = np.empty((n, 2, 2))
    conic_full[:, 0, 0] = proj.conics[:, 0]
    conic_full[:, 0, 1] = conic_full[:, 1, 0] = proj.conics[:, 1]
    conic_full[:, 1, 1] = proj.conics[:, 2]
    d_cov = -np.einsum("nij,njk,nkl->nil", conic_full, dconic_full, conic_full)

    d_sigma = np.einsum("nji,njk,nkl->nil", M, d_cov, M)
    d_M = 2.0 * np.einsum("nij,njk,nkl->nil", d_cov, M, sigma)
    d_J = np.einsum("nij,kj->nik", d_M, W)

    # Screen mean -> view point (J is exactly the projection Jacobian).
    d_t = np.einsum("nji,nj->ni", J, d_mean)
    tz = np.where(live, t[:, 2], 1.0)
    d_t[:, 0] += d_J[:, 0, 2] * (-fx / tz**2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy / tz**2)
    d_t[:, 2] += (
        d_J[:, 0, 0] * (-fx / tz**2)
        + d_J[:, 1, 1] * (-fy / tz**2)
        + d_J[:, 0, 2] * (2.0 * fx * t[:, 0] / tz**3)
        + d_J[:, 1, 2] * (2.0 * fy * t[:, 1] / tz**3)
    )
    d_centers = (d_t @ W) * mask

    # Sigma = A A^T with A = R diag(s).
    d_A = 2.0 * np.einsum("nij,njk->nik", d_sigma, A)
    d_R = d_A * s[:, None, :]
    d_s = np.einsum("nij,nij->nj", R, d_A)
    d_log_scales = d_s * s * mask

    d_qhat = _quat_matrix_backward(q, d_R)
    # Through normalization of the stored quaternion.
    dot = np.einsum("ni,ni->n", d_qhat, q)
    d_q_raw = (d_qhat - dot[:, None] * q) / q_norm
    d_rotations = d_q_raw * mask

    # Colors: clamp, SH evaluation, then direction.
    clamp_live = (cache["raw_colors"] > 0.0) & (cache["raw_colors"] < 1.0)
    d_raw = d_color * clamp_live * mask
    basis = cache["basis"]
    d_sh = np.einsum("nc,nk->nck", d_raw, basis)
    dbasis = sh_basis_grad(cache["directions"], cache["degree"])
    d_dir = np.einsum("nck,nc,nkd->nd", cache["sh_coeffs"], d_raw, dbasis)

    o = proj.opacities
    d_logits = d_opac * o * (1.0 - o) * live

    return GaussianGrads(
        centers=d_centers,
        rotations=d_rotations,
        log_scales=d_log_scales,
        opacity_logits=d_logits,
        sh_coeffs=d_sh,
        directions=d_dir,
        mean2d=d_mean * mask,
        visible=live,
    )


def _quat_matrix_backward(q, d_R):
    """Contract dL/dR with the analytic dR/dq for unit quaternions."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = d_R
    dw = 2.0 * (
        -z * r[:, 0, 1] + y * r[:, 0, 2]
        + z * r[:, 1, 0] - x * r[:, 1, 2]
        - y * r[:, 2, 0] + x * r[:, 2, 1]
    )
    dx = 2.0 * (
        y * r[:, 0, 1] + z * r[:, 0, 2]
        + y * r[:, 1, 0] - 2.0 * x * r[:, 1, 1] - w * r[:, 1, 2]
        + z * r[:, 2, 0] + w * r[:, 2, 1] - 2.0 * x * r[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * r[:, 0, 0] + x * r[:, 0, 1] + w * r[:, 0, 2]
        + x * r[:, 1, 0] + z * r[:, 1, 2]
        - w * r[:, 2, 0] + z * r[:, 2, 1] - 2.0 * y * r[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * r[:, 0, 0] - w * r[:, 0, 1] + x * r[:, 0, 2]
        + w * r[:, 1, 0] - 2.0 * z * r[:, 1, 1] + y * r[:, 1, 2]
        + x * r[:, 2, 0] + y * r[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def render_reference(
    proj: ProjectedGaussians,
    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
) -> RenderOutput:
    """Brute-force oracle: per-pixel compositing over one global depth sort.

    Applies the same fragment predicate and termination rule as the tiled
    renderer; kept deliberately simple (no tiles, no bounds) for testing.
    """
    W, H = proj.width, proj.height
    bg = np.asarray(background, dtype=np.float64)
    idx = np.flatnonzero(proj.valid)
    order = idx[np.lexsort((idx, proj.depths[idx]))]
    ys, xs = np.mgrid[0:H, 0:W]
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    if len(order):
        alpha, _, _, _, _, _ = _fragment_alphas(proj, order, xs, ys)
        w, _, _ = _composite(alpha)
        acc = w.sum(axis=0)
        col = np.einsum("kp,kc->pc", w, proj.colors[order])
        dep = (w * proj.depths[order][:, None]).sum(axis=0) / np.maximum(acc, DEPTH_EPS)
    else:
        acc = np.zeros(H * W)
        col = np.zeros((H * W, 3))
        dep = np.zeros(H * W)
    rgb = (col + (1.0 - acc)[:, None] * bg).reshape(H, W, 3)
    return RenderOutput(rgb, acc.reshape(H, W), dep.reshape(H, W), bg, 0, None)


def render_mask(depth: np.ndarray, alpha: np.ndarray, threshold: float) -> np.ndarray:
    """Binary silhouette: opaque enough and nearer than the distance cutoff."""
    return (alpha > 0.5) & (depth < threshold)


def render(
    cloud: GaussianCloud,
    camera: Camera,
    directions: np.ndarray,
    tile_size: int = 16,
    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
    need_cache: bool = False,
    workers: int = 1,
) -> tuple[ProjectedGaussians, RenderOutput]:
    """Project and rasterize in one call."""
    proj = project_gaussians(cloud, camera, directions)
    out = rasterize_forward(proj, tile_size, background, need_cache=need_cache, workers=workers)
    return proj, out
