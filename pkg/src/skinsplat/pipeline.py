"""Inference chain: pose -> per-face transforms -> refine -> rasterize.

Mirrors the training forward pass but without gradient bookkeeping, with
optional background filtering and per-stage wall-clock timing. The timing
report has six stages: face-transform fitting, posing, refinement,
residual posing, rendering and image save.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .body import BodyModel, PoseParams, PosedBody, ShapeParams, pose_body
from .cloud import GaussianCloud
from .config import RunConfig
from .deform import camera_relative_directions, filter_background, fit_face_transforms, pose_gaussians
from .raster import Camera, RenderOutput, project_gaussians, rasterize_forward
from .refine import RefinerMLP, apply_residuals, encode_joint_offsets, postprocess_raw, refiner_forward

TIMING_STAGES = (
    "face_transforms",
    "posing",
    "refinement",
    "residual_posing",
    "rendering",
    "image_save",
)


@dataclass
class StageTimer:
    """Accumulates per-stage seconds over repeated frames."""

    totals: dict[str, float] = field(default_factory=lambda: {k: 0.0 for k in TIMING_STAGES})
    frames: int = 0

    def add(self, stage: str, seconds: float) -> None:
        self.totals[stage] += seconds

    def means(self) -> dict[str, float]:
        n = max(self.frames, 1)
        return {k: v / n for k, v in self.totals.items()}

    def report_rows(self) -> tuple[list[str], list[float]]:
        means = self.means()
        total_with = sum(means.values())
        total_without = total_with - means["image_save"]
        header = list(TIMING_STAGES) + ["total_with_save", "total_without_save", "fps_with_save", "fps_without_save"]
        row = [means[k] for k in TIMING_STAGES] + [
            total_with,
            total_without,
            1.0 / total_with if total_with > 0 else 0.0,
            1.0 / total_without if total_without > 0 else 0.0,
        ]
        return header, row


@dataclass
class AvatarModel:
    """Everything needed to pose and render a trained avatar."""

    body: BodyModel
    shape: ShapeParams
    canonical: PosedBody
    cloud: GaussianCloud
    refiner: RefinerMLP
    config: RunConfig


def render_avatar(
    model: AvatarModel,
    pose: PoseParams,
    camera: Camera,
    keep_background: bool = False,
    timer: StageTimer | None = None,
) -> RenderOutput:
    """Full inference: background filtering, deformation, refinement, splatting."""
    cfg = model.config
    t0 = time.perf_counter()
    posed = pose_body(model.body, model.shape, pose)
    tr = fit_face_transforms(model.canonical, posed)
    t1 = time.perf_counter()

    cloud = model.cloud if keep_background else filter_background(model.cloud)
    posed_cloud = pose_gaussians(cloud, tr)
    t2 = time.perf_counter()

    h_idx = np.flatnonzero(cloud.human_mask)
    parents = cloud.parents[h_idx]
    enc = encode_joint_offsets(posed_cloud.centers[h_idx], posed.joints)
    raw, _ = refiner_forward(model.refiner, enc)
    residuals, _ = postprocess_raw(raw, model.refiner.bounds)
    t3 = time.perf_counter()

    rotated_normals = np.einsum(
        "nij,nj->ni", tr.rotations[parents], cloud.canonical_normals[h_idx]
    )
    c_ref, q_ref, dirs_h, _ = apply_residuals(
        posed_cloud.centers[h_idx], posed_cloud.rotations[h_idx], rotated_normals, residuals
    )
    posed_cloud.centers[h_idx] = c_ref
    posed_cloud.rotations[h_idx] = q_ref
    t4 = time.perf_counter()

    directions = np.empty((len(cloud), 3))
    directions[h_idx] = dirs_h
    bg_idx = np.flatnonzero(~cloud.human_mask)
    if len(bg_idx):
        directions[bg_idx], _ = camera_relative_directions(posed_cloud.centers[bg_idx], camera.center)
    proj = project_gaussians(posed_cloud, camera, directions)
    out = rasterize_forward(proj, cfg.tile_size, cfg.background_color, workers=cfg.workers)
    t5 = time.perf_counter()

    if timer is not None:
        timer.add("face_transforms", t1 - t0)
        timer.add("posing", t2 - t1)
        timer.add("refinement", t3 - t2)
        timer.add("residual_posing", t4 - t3)
        timer.add("rendering", t5 - t4)
        timer.frames += 1
    return out
