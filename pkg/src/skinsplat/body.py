"""Parametric skinned body: loading, synthetic generation and posing.

The mesh follows the usual SMPL-style contract (template vertices, linear
blend skinning weights, a joint regressor and a kinematic tree) but the
file format is a neutral container so no licensed model data ships with
the code. `make_synthetic_body` builds an articulated capsule figure that
stands in for a real scan in every test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import FormatError, ValidationError, read_arrays, write_arrays
from .transforms import axis_angle_to_matrix

ROOT_PARENT = -1  # sentinel for the kinematic root

_REQUIRED = (
    "template_vertices",
    "faces",
    "skinning_weights",
    "joint_regressor",
    "kinematic_parents",
)


@dataclass
class BodyModel:
    """Immutable skinned template mesh.

    template_vertices: (V, 3) meters, faces: (F, 3) vertex indices,
    skinning_weights: (V, J), joint_regressor: (J, V),
    kinematic_parents: (J,) with ROOT_PARENT at the root,
    shape_blendshapes: (V, 3, B) or None.
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    skinning_weights: np.ndarray
    joint_regressor: np.ndarray
    kinematic_parents: np.ndarray
    shape_blendshapes: np.ndarray | None = None

    @property
    def vertex_count(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_regressor.shape[0]

    @property
    def shape_count(self) -> int:
        return 0 if self.shape_blendshapes is None else self.shape_blendshapes.shape[2]

    def validate(self) -> None:
        """Check all structural invariants; raises ValidationError."""
        V, J = self.vertex_count, self.joint_count
        if self.template_vertices.shape != (V, 3):
            raise ValidationError("template_vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValidationError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValidationError("faces: vertex index out of range")
        if self.skinning_weights.shape != (V, J):
            raise ValidationError(
                f"skinning_weights: expected ({V}, {J}), got {self.skinning_weights.shape}"
            )
        if self.skinning_weights.min() < 0:
            raise ValidationError("skinning_weights: negative weight")
        row_sums = self.skinning_weights.sum(axis=1)
        bad = np.abs(row_sums - 1.0) > 1e-6
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(
                f"skinning_weights: row {i} sums to {row_sums[i]:.6f}, expected 1"
            )
        if self.joint_regressor.shape != (J, V):
            raise ValidationError(f"joint_regressor: expected ({J}, {V})")
        if self.kinematic_parents.shape != (J,):
            raise ValidationError("kinematic_parents must be (J,)")
        roots = np.flatnonzero(self.kinematic_parents == ROOT_PARENT)
        if len(roots) != 1:
            raise ValidationError(f"kinematic tree needs exactly one root, found {len(roots)}")
        # Acyclic: walking to the root must terminate from every joint.
        for j in range(J):
            seen, cur = set(), j
            while cur != ROOT_PARENT:
                if cur in seen or not (0 <= cur < J):
                    raise ValidationError(f"kinematic_parents: cycle or bad parent at joint {j}")
                seen.add(cur)
                cur = int(self.kinematic_parents[cur])
        if self.shape_blendshapes is not None and self.shape_blendshapes.shape[:2] != (V, 3):
            raise ValidationError("shape_blendshapes must be (V, 3, B)")


@dataclass
class PoseParams:
    """Per-joint axis-angle rotations (J, 3) radians + root translation (3,)."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def rest(cls, joint_count: int) -> "PoseParams":
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    def validate(self, joint_count: int) -> None:
        if self.joint_rotations.shape != (joint_count, 3):
            raise ValidationError(
                f"pose: expected ({joint_count}, 3) rotations, got {self.joint_rotations.shape}"
            )
        if not (np.isfinite(self.joint_rotations).all() and np.isfinite(self.root_translation).all()):
            raise ValidationError("pose: non-finite values")


@dataclass
class ShapeParams:
    """Shape coefficients, possibly empty."""

    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def validate(self, shape_count: int) -> None:
        if self.coefficients.shape != (shape_count,):
            raise ValidationError(
                f"shape: expected ({shape_count},) coefficients, got {self.coefficients.shape}"
            )


@dataclass
class PosedBody:
    """A posed mesh with per-face frames.

    face_rotations[i] has columns (x, y, z) where x is the normalized
    first edge and z the face normal, so it is orthonormal with det +1.
    `faces` is shared with the source BodyModel.
    """

    vertices: np.ndarray
    joints: np.ndarray
    faces: np.ndarray
    face_centers: np.ndarray
    face_normals: np.ndarray
    face_rotations: np.ndarray
    degenerate_faces: np.ndarray  # indices of area < 1e-12 faces

    @property
    def face_count(self) -> int:
        return self.face_centers.shape[0]


def save_body_model(path: str | Path, model: BodyModel) -> None:
    """Write a BodyModel to the neutral container format."""
    model.validate()
    arrays = {
        "template_vertices": model.template_vertices.astype("<f8"),
        "faces": model.faces.astype("<i8"),
        "skinning_weights": model.skinning_weights.astype("<f8"),
        "joint_regressor": model.joint_regressor.astype("<f8"),
        "kinematic_parents": model.kinematic_parents.astype("<i8"),
    }
    if model.shape_blendshapes is not None:
        arrays["shape_blendshapes"] = model.shape_blendshapes.astype("<f8")
    write_arrays(path, arrays)


def load_body_model(path: str | Path) -> BodyModel:
    """Load and validate a body model container.

    Raises FormatError for unreadable files and ValidationError when the
    arrays are present but mutually inconsistent.
    """
    arrays = read_arrays(path)
    missing = [name for name in _REQUIRED if name not in arrays]
    if missing:
        raise FormatError(f"{path}: missing required arrays {missing}")
    model = BodyModel(
        template_vertices=arrays["template_vertices"].astype(np.float64),
        faces=arrays["faces"].astype(np.int64),
        skinning_weights=arrays["skinning_weights"].astype(np.float64),
        joint_regressor=arrays["joint_regressor"].astype(np.float64),
        kinematic_parents=arrays["kinematic_parents"].astype(np.int64),
        shape_blendshapes=(
            arrays["shape_blendshapes"].astype(np.float64)
            if "shape_blendshapes" in arrays
            else None
        ),
    )
    model.validate()
    return model


def make_synthetic_body(
    joints: int,
    segments: int,
    *,
    bone_length: float = 0.25,
    radius: float = 0.09,
    weight_falloff: float = 0.0,
) -> BodyModel:
    """Deterministic articulated capsule chain along +y.

    Joint j sits at (0, j * bone_length, 0); each bone owns its own tube of
    `segments` angular divisions and max(2, segments // 2) rings, closed by
    two shallow conical caps (apexes bulge outward so faces of neighbouring
    bones never coincide). With R = max(2, segments // 2):

        V = (joints - 1) * (R * segments + 2)
        F = (joints - 1) * ((R - 1) * segments * 2 + 2 * segments)

    With weight_falloff == 0 every vertex is bound to its bone's lower joint,
    which keeps each face rigid under posing. A positive falloff (fraction of
    the bone length) blends toward the next joint near the top of each bone.
    """
    if joints < 2:
        raise ValueError("joints must be >= 2")
    if segments < 3:
        raise ValueError("segments must be >= 3")
    rings = max(2, segments // 2)
    bones = joints - 1

    verts = []
    faces = []
    weights = []
    vert_count = 0
    angles = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.stack([np.cos(angles), np.zeros(segments), np.sin(angles)], axis=1)

    for b in range(bones):
        base = vert_count
        y0 = b * bone_length
        ring_w = []
        for r in range(rings):
            s = r / (rings - 1)
            y = y0 + s * bone_length
            ring = radius * circle + np.array([0.0, y, 0.0])
            verts.append(ring)
            if weight_falloff > 0 and b + 1 < joints:
                t = np.clip((s - (1.0 - weight_falloff)) / weight_falloff, 0.0, 1.0)
                w_next = t * t * (3.0 - 2.0 * t)  # smoothstep
            else:
                w_next = 0.0
            ring_w.append(w_next)
            w_row = np.zeros((segments, joints))
            w_row[:, b] = 1.0 - w_next
            w_row[:, min(b + 1, joints - 1)] += w_next
            weights.append(w_row)
        # Cap apexes (bottom then top), bulged outward into shallow cones.
        bulge = 0.35 * radius
        verts.append(np.array([[0.0, y0 - bulge, 0.0], [0.0, y0 + bone_length + bulge, 0.0]]))
        w_cap = np.zeros((2, joints))
        w_cap[0, b] = 1.0
        w_cap[1, b] = 1.0 - ring_w[-1]
        w_cap[1, min(b + 1, joints - 1)] += ring_w[-1]
        weights.append(w_cap)
        vert_count += rings * segments + 2

        def ring_vertex(r, k):
            return base + r * segments + (k % segments)

        bot_apex = base + rings * segments
        top_apex = bot_apex + 1
        # Winding chosen so every normal points outward (caps -y / +y).
        for r in range(rings - 1):
            for k in range(segments):
                a, bq = ring_vertex(r, k), ring_vertex(r, k + 1)
                c, d = ring_vertex(r + 1, k), ring_vertex(r + 1, k + 1)
                faces.append([a, c, bq])
                faces.append([bq, c, d])
        for k in range(segments):
            faces.append([ring_vertex(0, k), ring_vertex(0, k + 1), bot_apex])
            faces.append([ring_vertex(rings - 1, k + 1), ring_vertex(rings - 1, k), top_apex])

    vertices = np.concatenate(verts, axis=0)
    skin = np.concatenate(weights, axis=0)
    faces_arr = np.asarray(faces, dtype=np.int64)

    # Joint j is regressed from the ring of vertices at its height: the first
    # ring of bone j, or the last ring of the final bone for the tip joint.
    V = vertices.shape[0]
    regressor = np.zeros((joints, V))
    per_bone = rings * segments + 2
    for j in range(joints):
        if j < bones:
            start = j * per_bone
        else:
            start = (bones - 1) * per_bone + (rings - 1) * segments
        regressor[j, start : start + segments] = 1.0 / segments

    parents = np.arange(-1, joints - 1, dtype=np.int64)
    model = BodyModel(
        template_vertices=vertices,
        faces=faces_arr,
        skinning_weights=skin,
        joint_regressor=regressor,
        kinematic_parents=parents,
        shape_blendshapes=None,
    )
    model.validate()
    return model


def expected_synthetic_counts(joints: int, segments: int) -> tuple[int, int]:
    """Closed-form (V, F) for make_synthetic_body."""
    rings = max(2, segments // 2)
    v_per = rings * segments + 2
    f_per = (rings - 1) * segments * 2 + 2 * segments
    return (joints - 1) * v_per, (joints - 1) * f_per


def _global_joint_transforms(
    model: BodyModel, rest_joints: np.ndarray, pose: PoseParams
) -> np.ndarray:
    """World 4x4 transforms per joint: rotate about each rest joint along the chain."""
    J = model.joint_count
    local_R = axis_angle_to_matrix(pose.joint_rotations)
    world = np.zeros((J, 4, 4))
    order = _topological_order(model.kinematic_parents)
    for j in order:
        # Local transform rotates about joint j's rest position:
        # x -> R_j (x - j_j) + j_j, composed down the chain.
        loc = np.eye(4)
        loc[:3, :3] = local_R[j]
        loc[:3, 3] = rest_joints[j] - local_R[j] @ rest_joints[j]
        p = int(model.kinematic_parents[j])
        if p == ROOT_PARENT:
            loc[:3, 3] += pose.root_translation
            world[j] = loc
        else:
            world[j] = world[p] @ loc
    return world


def _topological_order(parents: np.ndarray) -> list[int]:
    J = len(parents)
    order, placed = [], np.zeros(J, dtype=bool)
    pending = list(range(J))
    while pending:
        rest = []
        for j in pending:
            p = int(parents[j])
            if p == ROOT_PARENT or placed[p]:
                order.append(j)
                placed[j] = True
            else:
                rest.append(j)
        if len(rest) == len(pending):
            raise ValidationError("kinematic_parents: unreachable joints (cycle)")
        pending = rest
    return order


def pose_body(model: BodyModel, shape: ShapeParams, pose: PoseParams) -> PosedBody:
    """Linear-blend-skin the model into a pose and build per-face frames.

    Pure function; safe to call concurrently.
    """
    shape.validate(model.shape_count)
    pose.validate(model.joint_count)

    shaped = model.template_vertices
    if model.shape_count:
        shaped = shaped + np.einsum("vcb,b->vc", model.shape_blendshapes, shape.coefficients)
    rest_joints = model.joint_regressor @ shaped

    world = _global_joint_transforms(model, rest_joints, pose)
    # Blend the 3x4 part per vertex: v' = sum_j w_vj (R_j v + t_j).
    R_blend = np.einsum("vj,jab->vab", model.skinning_weights, world[:, :3, :3])
    t_blend = model.skinning_weights @ world[:, :3, 3]
    vertices = np.einsum("vab,vb->va", R_blend, shaped) + t_blend
    joints = np.einsum("jab,jb->ja", world[:, :3, :3], rest_joints) + world[:, :3, 3]

    centers, normals, rotations, degenerate = face_frames(
        vertices, model.faces, fallback_normals=_canonical_normals(model, shaped)
    )
    return PosedBody(vertices, joints, model.faces, centers, normals, rotations, degenerate)


def _canonical_normals(model: BodyModel, shaped: np.ndarray) -> np.ndarray:
    tri = shaped[model.faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    return cross / np.where(norm > 0, norm, 1.0)


def face_frames(
    vertices: np.ndarray, faces: np.ndarray, fallback_normals: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Centroids, unit normals and orthonormal frames for each triangle.

    Degenerate faces (area < 1e-12 m^2) keep the fallback normal and an
    identity-completed frame; their indices are returned for flagging.
    """
    tri = vertices[faces]
    centers = tri.mean(axis=1)
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    cross = np.cross(e1, e2)
    cross_norm = np.linalg.norm(cross, axis=1)
    degenerate = np.flatnonzero(0.5 * cross_norm < 1e-12)

    safe_cross = np.where(cross_norm[:, None] > 0, cross, [0.0, 0.0, 1.0])
    normals = safe_cross / np.linalg.norm(safe_cross, axis=1, keepdims=True)
    if fallback_normals is not None and len(degenerate):
        normals[degenerate] = fallback_normals[degenerate]

    e1_norm = np.linalg.norm(e1, axis=1, keepdims=True)
    x = np.where(e1_norm > 1e-12, e1 / np.where(e1_norm > 0, e1_norm, 1.0), [1.0, 0.0, 0.0])
    z = normals
    y = np.cross(z, x)
    rotations = np.stack([x, y, z], axis=-1)
    if len(degenerate):
        # Rebuild a valid frame around the fallback normal.
        for i in degenerate:
            n = normals[i]
            ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            xi = np.cross(ref, n)
            xi /= np.linalg.norm(xi)
            rotations[i] = np.stack([xi, np.cross(n, xi), n], axis=-1)
    return centers, normals, rotations, degenerate
