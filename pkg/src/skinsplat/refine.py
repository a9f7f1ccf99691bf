"""Residual deformation refinement.

A 13-layer fully connected ReLU network maps each Gaussian's joint-offset
encoding to a 7-channel output that post-processes into a small rigid
correction (translation + axis-angle rotation) applied after the per-face
deformation. Layers 5 and 9 re-concatenate the input vector. Forward,
backward and the transform post-processing are all explicit so gradients
are exact and dependency-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import sigmoid
from .transforms import (
    cross_matrix,
    quat_left_matrix,
    quat_multiply,
    quat_right_matrix,
    rotation_about_axis,
)

SKIP_LAYERS = (5, 9)  # 1-based layers whose input is [hidden || encoding]
LAYER_COUNT = 13
OUTPUT_DIM = 7
AXIS_EPS = 1e-8


@dataclass
class OutputBounds:
    """How raw network outputs become translation metres / rotation radians.

    bounded: t = t_max (2 sigmoid(x) - 1), angle = a_max (2 sigmoid(x) - 1),
    so outputs can never leave +-t_max / +-a_max. unbounded: plain scaling
    t = t_scale x, angle = a_scale x.
    """

    mode: str = "bounded"
    max_translation: float = 0.10
    max_rotation: float = np.deg2rad(30.0)
    translation_scale: float = 0.01
    rotation_scale: float = 1.0 / np.pi

    def __post_init__(self):
        if self.mode not in ("bounded", "unbounded"):
            raise ValueError(f"unknown bounds mode {self.mode!r}")
        if min(self.max_translation, self.max_rotation,
               self.translation_scale, self.rotation_scale) <= 0:
            raise ValueError("bounds and scales must be positive")


@dataclass
class RefinerMLP:
    """Weights of the refinement network. weights[i] is (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_dim: int
    hidden_width: int
    bounds: OutputBounds = field(default_factory=OutputBounds)

    @classmethod
    def init(
        cls,
        joint_count: int,
        hidden_width: int = 256,
        bounds: OutputBounds | None = None,
        seed: int = 0,
    ) -> "RefinerMLP":
        """Kaiming-uniform hidden layers; near-zero final layer.

        The final layer starts tiny (not exactly zero) so the residual is
        effectively identity at initialization while the rotation head still
        has a defined axis and therefore a nonzero gradient.
        """
        rng = np.random.default_rng(seed)
        d_in = 3 * joint_count
        h = hidden_width
        dims = [d_in] + [h] * (LAYER_COUNT - 1) + [OUTPUT_DIM]
        weights, biases = [], []
        for i in range(LAYER_COUNT):
            fan_in = dims[i] + (d_in if (i + 1) in SKIP_LAYERS else 0)
            fan_out = dims[i + 1]
            if i == LAYER_COUNT - 1:
                w = rng.uniform(-1e-3, 1e-3, size=(fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, d_in, h, bounds or OutputBounds())

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(LAYER_COUNT):
            out[f"w{i:02d}"] = self.weights[i]
            out[f"b{i:02d}"] = self.biases[i]
        return out

    def validate(self) -> None:
        if len(self.weights) != LAYER_COUNT or len(self.biases) != LAYER_COUNT:
            raise ValueError(f"expected {LAYER_COUNT} layers")
        d_in, h = self.input_dim, self.hidden_width
        dims = [d_in] + [h] * (LAYER_COUNT - 1) + [OUTPUT_DIM]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in = dims[i] + (d_in if (i + 1) in SKIP_LAYERS else 0)
            if w.shape != (fan_in, dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i}: shape {w.shape}, expected ({fan_in}, {dims[i+1]})")


def encode_joint_offsets(centers: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Row i = flattened (center_i - joint_j) over all joints, (N, 3J)."""
    offs = centers[:, None, :] - joints[None, :, :]
    return offs.reshape(centers.shape[0], -1)


def refiner_forward(net: RefinerMLP, enc: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the network on an encoding batch (N, 3J); returns raw (N, 7) + cache."""
    if enc.ndim != 2 or enc.shape[1] != net.input_dim:
        raise ValueError(f"encoding width {enc.shape} != input dim {net.input_dim}")
    cache = []
    h = enc
    for i in range(LAYER_COUNT):
        inp = np.concatenate([h, enc], axis=1) if (i + 1) in SKIP_LAYERS else h
        z = inp @ net.weights[i] + net.biases[i]
        if i < LAYER_COUNT - 1:
            mask = z > 0
            h = z * mask
        else:
            mask = None
            h = z
        cache.append((inp, mask))
    return h, cache


def refiner_backward(
    net: RefinerMLP,
    cache: list,
    d_raw: np.ndarray,
    with_param_grads: bool = True,
) -> tuple[dict[str, np.ndarray] | None, np.ndarray]:
    """Reverse-mode through the network.

    Returns (param_grads, d_encoding); param_grads is None when
    with_param_grads is False (the Gaussian-only training phases skip it).
    """
    if len(cache) != LAYER_COUNT or cache[0][0].shape[0] != d_raw.shape[0]:
        raise ValueError("cache does not match this batch")
    grads: dict[str, np.ndarray] | None = {} if with_param_grads else None
    d_h = d_raw
    d_enc = np.zeros_like(cache[0][0])
    h = net.hidden_width
    for i in range(LAYER_COUNT - 1, -1, -1):
        inp, mask = cache[i]
        d_z = d_h if mask is None else d_h * mask
        if grads is not None:
            grads[f"w{i:02d}"] = inp.T @ d_z
            grads[f"b{i:02d}"] = d_z.sum(axis=0)
        d_inp = d_z @ net.weights[i].T
        if (i + 1) in SKIP_LAYERS:
            d_h = d_inp[:, :h]
            d_enc += d_inp[:, h:]
        else:
            d_h = d_inp
    d_enc += d_h
    return grads, d_enc


@dataclass
class ResidualTransforms:
    """Post-processed per-Gaussian corrections.

    axis_ok marks rows whose raw axis had norm >= 1e-8; the rest are
    identity rotations (and receive no rotation gradients).
    """

    translations: np.ndarray  # (N, 3)
    angles: np.ndarray  # (N,)
    axes: np.ndarray  # (N, 3) unit where axis_ok
    axis_ok: np.ndarray  # (N,) bool
    rotations: np.ndarray  # (N, 3, 3)

    def __len__(self) -> int:
        return self.translations.shape[0]

    @classmethod
    def identity(cls, n: int) -> "ResidualTransforms":
        return cls(
            translations=np.zeros((n, 3)),
            angles=np.zeros(n),
            axes=np.tile([0.0, 0.0, 1.0], (n, 1)),
            axis_ok=np.zeros(n, dtype=bool),
            rotations=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
        )

    def rigid_set(self):
        from .transforms import RigidTransformSet

        return RigidTransformSet(self.rotations.copy(), self.translations.copy())

    def quaternions(self) -> np.ndarray:
        """(cos(a/2), sin(a/2) u); identity rows give (1, 0, 0, 0)."""
        half = 0.5 * np.where(self.axis_ok, self.angles, 0.0)
        q = np.empty((len(self), 4))
        q[:, 0] = np.cos(half)
        q[:, 1:] = np.sin(half)[:, None] * np.where(self.axis_ok[:, None], self.axes, [0.0, 0.0, 1.0])
        return q


def postprocess_raw(raw: np.ndarray, bounds: OutputBounds) -> tuple[ResidualTransforms, dict]:
    """Channels 0-2 -> translation, 3 -> angle, 4-6 -> normalized axis."""
    t_raw, a_raw, u_raw = raw[:, 0:3], raw[:, 3], raw[:, 4:7]
    if bounds.mode == "bounded":
        sig_t = sigmoid(t_raw)
        sig_a = sigmoid(a_raw)
        t = bounds.max_translation * (2.0 * sig_t - 1.0)
        angle = bounds.max_rotation * (2.0 * sig_a - 1.0)
    else:
        sig_t = sig_a = None
        t = bounds.translation_scale * t_raw
        angle = bounds.rotation_scale * a_raw
    u_norm = np.linalg.norm(u_raw, axis=1)
    axis_ok = u_norm >= AXIS_EPS
    safe = np.where(axis_ok, u_norm, 1.0)
    axes = np.where(axis_ok[:, None], u_raw / safe[:, None], [0.0, 0.0, 1.0])
    R = rotation_about_axis(axes, np.where(axis_ok, angle, 0.0))
    rt = ResidualTransforms(t, np.where(axis_ok, angle, 0.0), axes, axis_ok, R)
    cache = dict(bounds=bounds, sig_t=sig_t, sig_a=sig_a, u_norm=safe, axes=axes, axis_ok=axis_ok)
    return rt, cache


def outputs_to_transforms(raw: np.ndarray, bounds: OutputBounds):
    """Spec-facing wrapper: raw network outputs -> rigid transform set."""
    rt, _ = postprocess_raw(raw, bounds)
    return rt.rigid_set()


def postprocess_backward(
    cache: dict,
    d_t: np.ndarray,
    d_angle: np.ndarray,
    d_axis: np.ndarray,
) -> np.ndarray:
    """Gradients of (translation, angle, axis) back to the raw 7 channels."""
    bounds: OutputBounds = cache["bounds"]
    axis_ok = cache["axis_ok"]
    n = d_t.shape[0]
    d_raw = np.zeros((n, OUTPUT_DIM))
    if bounds.mode == "bounded":
        sig_t, sig_a = cache["sig_t"], cache["sig_a"]
        d_raw[:, 0:3] = d_t * (2.0 * bounds.max_translation * sig_t * (1.0 - sig_t))
        d_raw[:, 3] = d_angle * (2.0 * bounds.max_rotation * sig_a * (1.0 - sig_a))
    else:
        d_raw[:, 0:3] = d_t * bounds.translation_scale
        d_raw[:, 3] = d_angle * bounds.rotation_scale
    d_raw[:, 3] *= axis_ok
    u, un = cache["axes"], cache["u_norm"]
    d_u = (d_axis - (d_axis * u).sum(axis=1, keepdims=True) * u) / un[:, None]
    d_raw[:, 4:7] = np.where(axis_ok[:, None], d_u, 0.0)
    return d_raw


def apply_residuals(
    centers: np.ndarray,
    quats: np.ndarray,
    rotated_normals: np.ndarray,
    rt: ResidualTransforms,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Apply per-Gaussian corrections after the face deformation.

    Returns refined centers, orientations (residual quaternion composed on
    the left), corrected view directions (rotated normals pushed through the
    residual rotation), and a cache for the backward pass.
    """
    R = rt.rotations
    new_centers = np.einsum("nij,nj->ni", R, centers) + rt.translations
    q_r = rt.quaternions()
    new_quats = quat_multiply(q_r, quats)
    dirs = np.einsum("nij,nj->ni", R, rotated_normals)
    cache = dict(rt=rt, centers=centers, quats=quats, rotated_normals=rotated_normals, q_r=q_r)
    return new_centers, new_quats, dirs, cache


def apply_residuals_backward(
    cache: dict,
    d_centers_out: np.ndarray,
    d_quats_out: np.ndarray,
    d_dirs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Invert the residual application for gradients.

    Returns (d_centers_in, d_quats_in, d_translation, d_angle, d_axis); the
    rotation gradients are zero wherever the axis fallback was taken.
    """
    rt: ResidualTransforms = cache["rt"]
    R, q_r = rt.rotations, cache["q_r"]
    centers, quats = cache["centers"], cache["quats"]
    m = cache["rotated_normals"]

    d_centers_in = np.einsum("nji,nj->ni", R, d_centers_out)
    d_translation = d_centers_out.copy()
    d_R = (
        d_centers_out[:, :, None] * centers[:, None, :]
        + d_dirs[:, :, None] * m[:, None, :]
    )

    # Quaternion composition q_out = q_r (x) q_in.
    L = quat_left_matrix(q_r)
    d_quats_in = np.einsum("nji,nj->ni", L, d_quats_out)
    Rm = quat_right_matrix(quats)
    d_q_r = np.einsum("nji,nj->ni", Rm, d_quats_out)

    a = rt.angles
    u = rt.axes
    # dR/da and dR/du_k contractions (Rodrigues form).
    c, s = np.cos(a), np.sin(a)
    eye = np.broadcast_to(np.eye(3), R.shape)
    K = cross_matrix(u)
    outer = u[:, :, None] * u[:, None, :]
    dR_da = -s[:, None, None] * eye + c[:, None, None] * K + s[:, None, None] * outer
    d_angle = np.einsum("nij,nij->n", d_R, dR_da)

    d_axis = np.empty_like(u)
    one_c = (1.0 - c)[:, None, None]
    for k in range(3):
        e_k = np.zeros(3)
        e_k[k] = 1.0
        dK = np.broadcast_to(cross_matrix(e_k), R.shape)
        d_outer = e_k[None, :, None] * u[:, None, :] + u[:, :, None] * e_k[None, None, :]
        dR_duk = s[:, None, None] * dK + one_c * d_outer
        d_axis[:, k] = np.einsum("nij,nij->n", d_R, dR_duk)

    # Through q_r = (cos(a/2), sin(a/2) u).
    half = 0.5 * a
    d_angle += d_q_r[:, 0] * (-0.5 * np.sin(half))
    d_angle += (d_q_r[:, 1:] * u).sum(axis=1) * (0.5 * np.cos(half))
    d_axis += d_q_r[:, 1:] * np.sin(half)[:, None]

    ok = rt.axis_ok
    d_angle = np.where(ok, d_angle, 0.0)
    d_axis = np.where(ok[:, None], d_axis, 0.0)
    return d_centers_in, d_quats_in, d_translation, d_angle, d_axis
