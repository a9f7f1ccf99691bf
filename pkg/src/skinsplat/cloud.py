"""Explicit scene representation: Gaussian attributes plus parent/normal features.

Attributes are stored structure-of-arrays so the rasterizer and trainer can
work on contiguous buffers. Each Gaussian carries a parent id: a mesh face
index for the human, or BACKGROUND for the environment sphere. Human
Gaussians additionally keep the canonical surface normal of their birth face.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import PosedBody
from .container import ValidationError
from .transforms import matrix_to_quat

BACKGROUND = -1  # parent sentinel for background Gaussians

SH_C0 = 0.28209479177387814  # Y_0^0

_PLY_FLOAT_NAMES = {"f8": "double", "f4": "float"}


def sh_band_count(degree: int) -> int:
    return (degree + 1) ** 2


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """Invert the DC term of the color model color = SH + 0.5."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set.

    centers (N, 3) m, rotations (N, 4) unit quaternions wxyz,
    log_scales (N, 3) log m, opacity_logits (N,), sh_coeffs (N, 3, (L+1)^2),
    parents (N,) int64 face index or BACKGROUND,
    canonical_normals (N, 3) unit for human rows (background rows unused).
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    parents: np.ndarray
    canonical_normals: np.ndarray

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[2]))) - 1

    @property
    def human_mask(self) -> np.ndarray:
        return self.parents != BACKGROUND

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.centers.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
            self.parents.copy(),
            self.canonical_normals.copy(),
        )

    def take(self, idx: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.centers[idx],
            self.rotations[idx],
            self.log_scales[idx],
            self.opacity_logits[idx],
            self.sh_coeffs[idx],
            self.parents[idx],
            self.canonical_normals[idx],
        )

    def audit(self, face_count: int | None = None, atol: float = 1e-6) -> None:
        """Re-assert the cloud invariants; raises ValidationError."""
        n = len(self)
        for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "canonical_normals"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValidationError(f"{name}: length {arr.shape[0]} != {n}")
            if not np.isfinite(arr).all():
                raise ValidationError(f"{name}: non-finite values")
        if n == 0:
            return
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.abs(qn - 1.0).max() > atol:
            raise ValidationError(f"rotations: quaternion norm off by {np.abs(qn - 1.0).max():.2e}")
        bad = (self.parents < BACKGROUND)
        if face_count is not None:
            bad |= self.parents >= face_count
        if bad.any():
            raise ValidationError(f"parents: {int(bad.sum())} invalid ids")
        human = self.human_mask
        if human.any():
            nn = np.linalg.norm(self.canonical_normals[human], axis=1)
            if np.abs(nn - 1.0).max() > atol:
                raise ValidationError("canonical_normals: human normals not unit length")


def empty_cloud(sh_degree: int) -> GaussianCloud:
    k = sh_band_count(sh_degree)
    return GaussianCloud(
        centers=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)),
        log_scales=np.zeros((0, 3)),
        opacity_logits=np.zeros(0),
        sh_coeffs=np.zeros((0, 3, k)),
        parents=np.zeros(0, dtype=np.int64),
        canonical_normals=np.zeros((0, 3)),
    )


def mean_edge_length(body: PosedBody) -> float:
    tri = body.vertices[body.faces]
    e = np.concatenate([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]])
    return float(np.linalg.norm(e, axis=1).mean())


def init_human_gaussians(
    body: PosedBody,
    sh_degree: int,
    init_scale: float | None = None,
    init_opacity: float = 0.1,
) -> GaussianCloud:
    """One Gaussian per mesh face of the canonical-pose body.

    Centers sit on face centroids, orientations follow the face frames, and
    each Gaussian remembers its parent face and the face normal. Scale
    defaults to the mean edge length so one Gaussian roughly covers its face.
    """
    F = body.face_count
    if init_scale is None:
        init_scale = mean_edge_length(body)
    k = sh_band_count(sh_degree)
    sh = np.zeros((F, 3, k))
    sh[:, :, 0] = rgb_to_sh_dc(np.full(3, 0.5))  # mid-gray DC, higher bands zero
    return GaussianCloud(
        centers=body.face_centers.copy(),
        rotations=matrix_to_quat(body.face_rotations),
        log_scales=np.full((F, 3), np.log(init_scale)),
        opacity_logits=np.full(F, logit(init_opacity)),
        sh_coeffs=sh,
        parents=np.arange(F, dtype=np.int64),
        canonical_normals=body.face_normals.copy(),
    )


def init_background_gaussians(
    count: int,
    radius: float,
    seed: int,
    sh_degree: int = 3,
    init_scale: float | None = None,
    init_opacity: float = 0.1,
) -> GaussianCloud:
    """Seeded uniform sample on a sphere around the world origin."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    centers = radius * v
    if init_scale is None:
        # Roughly tile the sphere surface with `count` discs.
        init_scale = radius * np.sqrt(4.0 / max(count, 1))
    k = sh_band_count(sh_degree)
    sh = np.zeros((count, 3, k))
    sh[:, :, 0] = rgb_to_sh_dc(rng.uniform(0.3, 0.7, size=(count, 3)))
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        centers=centers,
        rotations=quats,
        log_scales=np.full((count, 3), np.log(init_scale)),
        opacity_logits=np.full(count, logit(init_opacity)),
        sh_coeffs=sh,
        parents=np.full(count, BACKGROUND, dtype=np.int64),
        canonical_normals=np.zeros((count, 3)),
    )


def concat_clouds(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    """Order-preserving concatenation; SH degrees must match."""
    if a.sh_coeffs.shape[2] != b.sh_coeffs.shape[2]:
        raise ValidationError(
            f"SH degree mismatch: {a.sh_degree} vs {b.sh_degree}"
        )
    return GaussianCloud(
        np.concatenate([a.centers, b.centers]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.log_scales, b.log_scales]),
        np.concatenate([a.opacity_logits, b.opacity_logits]),
        np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        np.concatenate([a.parents, b.parents]),
        np.concatenate([a.canonical_normals, b.canonical_normals]),
    )


def save_ply(path: str | Path, cloud: GaussianCloud, float_dtype: str = "f8") -> None:
    """Write the cloud as a binary little-endian PLY.

    Properties follow the splatting ecosystem convention (x/y/z, nx/ny/nz,
    f_dc_*, f_rest_*, opacity, scale_*, rot_*) plus an extra int32 `parent`.
    The default double-precision floats round-trip bit-exactly; pass
    float_dtype="f4" for viewer-sized files.
    """
    if float_dtype not in _PLY_FLOAT_NAMES:
        raise ValueError("float_dtype must be 'f8' or 'f4'")
    n = len(cloud)
    k = cloud.sh_coeffs.shape[2]
    n_rest = 3 * (k - 1)
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]

    fl = "<" + float_dtype
    dtype = np.dtype([(nm, fl) for nm in names] + [("parent", "<i4")])
    rec = np.empty(n, dtype=dtype)
    for i, nm in enumerate(("x", "y", "z")):
        rec[nm] = cloud.centers[:, i]
    for i, nm in enumerate(("nx", "ny", "nz")):
        rec[nm] = cloud.canonical_normals[:, i]
    for i in range(3):
        rec[f"f_dc_{i}"] = cloud.sh_coeffs[:, i, 0]
    # f_rest is stored channel-major: all bands of R, then G, then B.
    rest = cloud.sh_coeffs[:, :, 1:].reshape(n, n_rest)
    for i in range(n_rest):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = cloud.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i]
    rec["parent"] = cloud.parents.astype(np.int32)

    float_name = _PLY_FLOAT_NAMES[float_dtype]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {float_name} {nm}" for nm in names]
    header += ["property int parent", "end_header", ""]
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path: str | Path) -> GaussianCloud:
    """Read a cloud written by save_ply (or a compatible splatting PLY).

    Raises ValidationError listing any missing required properties.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValidationError(f"{path}: not a binary PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n") :]

    count = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element" and parts[1] == "vertex":
            count = int(parts[2])
        elif parts[0] == "property" and count is not None:
            props.append((parts[2], parts[1]))
    if not fmt_ok:
        raise ValidationError(f"{path}: only binary_little_endian PLY is supported")
    if count is None:
        raise ValidationError(f"{path}: no vertex element")

    type_map = {
        "double": "<f8", "float": "<f4", "float64": "<f8", "float32": "<f4",
        "int": "<i4", "int32": "<i4", "uint": "<u4", "uchar": "|u1", "uint8": "|u1",
    }
    try:
        dtype = np.dtype([(nm, type_map[t]) for nm, t in props])
    except KeyError as exc:
        raise ValidationError(f"{path}: unsupported property type {exc}") from exc

    have = {nm for nm, _ in props}
    k_rest = sum(1 for nm in have if nm.startswith("f_rest_"))
    if k_rest % 3 != 0:
        raise ValidationError(f"{path}: f_rest property count {k_rest} not divisible by 3")
    required = {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}
    missing = sorted(required - have)
    if missing:
        raise ValidationError(f"{path}: missing required properties {missing}")

    rec = np.frombuffer(body, dtype=dtype, count=count)
    n = count
    k = 1 + k_rest // 3
    centers = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if {"nx", "ny", "nz"} <= have:
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    else:
        normals = np.zeros((n, 3))
    sh = np.zeros((n, 3, k))
    for i in range(3):
        sh[:, i, 0] = rec[f"f_dc_{i}"]
    if k > 1:
        rest = np.stack([rec[f"f_rest_{i}"] for i in range(3 * (k - 1))], axis=1)
        sh[:, :, 1:] = rest.reshape(n, 3, k - 1)
    parents = (
        rec["parent"].astype(np.int64) if "parent" in have
        else np.full(n, BACKGROUND, dtype=np.int64)
    )
    return GaussianCloud(
        centers=centers,
        rotations=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64),
        log_scales=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64),
        opacity_logits=rec["opacity"].astype(np.float64),
        sh_coeffs=sh,
        parents=parents,
        canonical_normals=normals,
    )
