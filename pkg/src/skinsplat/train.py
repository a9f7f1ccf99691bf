"""Training loop: alternating optimization of Gaussians and the refiner.

Each step poses the canonical cloud by the per-face transforms, refines it
with the residual network, renders, and backpropagates. Updates are applied
to the posed Gaussians and carried back to canonical space through the
inverse deformation, following the un-posing convention: the canonical
write-back rotates the update delta, so a zero update leaves the canonical
cloud bit-identical. Phases mask updates absolutely: parameters outside the
active phase are never touched.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .body import BodyModel, PoseParams, PosedBody, ShapeParams, pose_body
from .cloud import GaussianCloud, concat_clouds, init_background_gaussians, init_human_gaussians
from .config import RunConfig
from .container import read_arrays, write_arrays
from .data import FrameRecord, SceneDataset, load_frame_image
from .deform import (
    FaceGrid,
    camera_relative_directions,
    fit_face_transforms,
    pose_gaussians,
    reassign_parents,
)
from .losses import total_loss
from .raster import Camera, project_gaussians, rasterize_backward, rasterize_forward
from .refine import (
    RefinerMLP,
    apply_residuals,
    apply_residuals_backward,
    encode_joint_offsets,
    postprocess_backward,
    postprocess_raw,
    refiner_backward,
    refiner_forward,
)
from .transforms import matrix_to_quat, quat_conjugate, quat_multiply, quat_normalize

CHECKPOINT_VERSION = 1
GAUSSIAN_PARAM_NAMES = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, frame_id: str, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration} on frame {frame_id}")
        self.iteration = iteration
        self.frame_id = frame_id


class TrainPhase(Enum):
    WARMUP = "warmup"
    GAUSSIANS_ONLY = "gaussians"
    REFINER_ONLY = "refiner"

    @property
    def trains_gaussians(self) -> bool:
        return self is not TrainPhase.REFINER_ONLY

    @property
    def trains_refiner(self) -> bool:
        return self is not TrainPhase.GAUSSIANS_ONLY


def schedule_phase(iteration: int, schedule) -> TrainPhase:
    """Phase of the (0-based) iteration: warmup, then alternating blocks
    starting with the Gaussian side."""
    if iteration < schedule.warmup_iters:
        return TrainPhase.WARMUP
    block = (iteration - schedule.warmup_iters) // schedule.alternation_block
    return TrainPhase.GAUSSIANS_ONLY if block % 2 == 0 else TrainPhase.REFINER_ONLY


def should_update_parents(completed: int, schedule) -> bool:
    """Parent reassignment fires after every parent_update_every-th step."""
    return completed > 0 and completed % schedule.parent_update_every == 0


def should_densify(completed: int, schedule, phase: TrainPhase) -> bool:
    """Density control runs during Gaussian-training phases only and stops
    entirely once `densify_until` is reached."""
    return (
        phase.trains_gaussians
        and schedule.densify_start <= completed < schedule.densify_until
        and completed % schedule.densify_interval == 0
    )


@dataclass
class AdamParam:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, arr: np.ndarray) -> "AdamParam":
        return cls(np.zeros_like(arr), np.zeros_like(arr))

    def update(self, grad: np.ndarray, lr: float, b1: float, b2: float, eps: float) -> np.ndarray:
        """Advance the moments and return the additive parameter delta."""
        self.step += 1
        self.m = b1 * self.m + (1.0 - b1) * grad
        self.v = b2 * self.v + (1.0 - b2) * grad * grad
        mhat = self.m / (1.0 - b1**self.step)
        vhat = self.v / (1.0 - b2**self.step)
        return -lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class StepReport:
    iteration: int
    frame_id: str
    phase: TrainPhase
    loss: float
    parts: dict[str, float]
    gaussians: int


@dataclass
class TrainerState:
    config: RunConfig
    body: BodyModel
    shape: ShapeParams
    canonical: PosedBody
    cloud: GaussianCloud
    refiner: RefinerMLP
    adam: dict[str, AdamParam]
    rng: np.random.Generator
    iteration: int = 0
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))
    face_grid: FaceGrid | None = None
    pose_cache: dict = field(default_factory=dict)

    def grid(self) -> FaceGrid:
        if self.face_grid is None:
            self.face_grid = FaceGrid(self.canonical.vertices, self.canonical.faces)
        return self.face_grid

    def deformation_for(self, frame: FrameRecord):
        """Posed body + per-face transforms, cached per frame index."""
        key = frame.frame_index
        if key not in self.pose_cache:
            posed = pose_body(self.body, self.shape, frame.pose)
            tr = fit_face_transforms(self.canonical, posed)
            self.pose_cache[key] = (posed, tr)
        return self.pose_cache[key]


def init_trainer(
    body: BodyModel,
    config: RunConfig,
    cameras: dict[str, Camera] | None = None,
    shape: ShapeParams | None = None,
) -> TrainerState:
    config.validate()
    shape = shape or ShapeParams(np.zeros(body.shape_count))
    canonical = pose_body(body, shape, PoseParams.rest(body.joint_count))
    human = init_human_gaussians(
        canonical, config.sh_degree, init_scale=config.init_scale, init_opacity=config.init_opacity
    )
    radius = config.background.radius
    if radius is None:
        center = 0.5 * (canonical.vertices.min(axis=0) + canonical.vertices.max(axis=0))
        if cameras:
            rig = float(np.mean([np.linalg.norm(c.center - center) for c in cameras.values()]))
        else:
            rig = 2.5
        radius = 2.0 * rig
    bg = init_background_gaussians(
        config.background.count, radius, seed=config.seed,
        sh_degree=config.sh_degree, init_opacity=config.init_opacity,
    )
    cloud = concat_clouds(human, bg)
    refiner = RefinerMLP.init(
        body.joint_count, config.refiner.hidden_width, config.refiner.to_bounds(), seed=config.seed
    )
    adam = _fresh_adam(cloud, refiner)
    n = len(cloud)
    return TrainerState(
        config=config, body=body, shape=shape, canonical=canonical, cloud=cloud,
        refiner=refiner, adam=adam, rng=np.random.default_rng(config.seed),
        grad_accum=np.zeros(n), grad_count=np.zeros(n),
    )


def _fresh_adam(cloud: GaussianCloud, refiner: RefinerMLP) -> dict[str, AdamParam]:
    adam = {name: AdamParam.like(getattr(cloud, name)) for name in GAUSSIAN_PARAM_NAMES}
    for name, arr in refiner.parameter_arrays().items():
        adam[f"refiner.{name}"] = AdamParam.like(arr)
    return adam


def position_lr(config: RunConfig, iteration: int) -> float:
    o = config.optimizer
    t = min(iteration / max(config.schedule.total_iters, 1), 1.0)
    return float(o.position_lr_init * (o.position_lr_final / o.position_lr_init) ** t)


def train_step(
    state: TrainerState,
    frame: FrameRecord,
    image: np.ndarray,
    camera: Camera,
    perceptual_hook=None,
) -> StepReport:
    """One full optimization step on a single frame."""
    cfg = state.config
    phase = schedule_phase(state.iteration, cfg.schedule)
    cloud = state.cloud

    posed, tr = state.deformation_for(frame)
    posed_cloud = pose_gaussians(cloud, tr)
    human = cloud.human_mask
    h_idx = np.flatnonzero(human)
    parents = cloud.parents[h_idx]

    enc = encode_joint_offsets(posed_cloud.centers[h_idx], posed.joints)
    raw, net_cache = refiner_forward(state.refiner, enc)
    residuals, pp_cache = postprocess_raw(raw, state.refiner.bounds)
    rotated_normals = np.einsum("nij,nj->ni", tr.rotations[parents], cloud.canonical_normals[h_idx])
    c_ref, q_ref, dirs_h, app_cache = apply_residuals(
        posed_cloud.centers[h_idx], posed_cloud.rotations[h_idx], rotated_normals, residuals
    )

    render_cloud = posed_cloud
    render_cloud.centers[h_idx] = c_ref
    render_cloud.rotations[h_idx] = q_ref

    directions = np.empty((len(cloud), 3))
    directions[h_idx] = dirs_h
    bg_idx = np.flatnonzero(~human)
    cam_center = camera.center
    bg_dirs, _ = camera_relative_directions(render_cloud.centers[bg_idx], cam_center)
    directions[bg_idx] = bg_dirs

    proj = project_gaussians(render_cloud, camera, directions)
    out = rasterize_forward(
        proj, cfg.tile_size, cfg.background_color, need_cache=True, workers=cfg.workers
    )
    loss, d_img, parts = total_loss(out.rgb, image, cfg.losses, perceptual_hook)
    frame_id = f"{frame.camera_id}/{frame.frame_index}"
    if not np.isfinite(loss):
        raise TrainingDiverged(state.iteration, frame_id, loss)

    grads = rasterize_backward(proj, out, d_img, workers=cfg.workers)
    o = cfg.optimizer

    if phase.trains_refiner:
        d_c_in, d_q_in, d_t, d_a, d_u = apply_residuals_backward(
            app_cache, grads.centers[h_idx], grads.rotations[h_idx], grads.directions[h_idx]
        )
        d_raw = postprocess_backward(pp_cache, d_t, d_a, d_u)
        wgrads, _ = refiner_backward(state.refiner, net_cache, d_raw, with_param_grads=True)
        for name, arr in state.refiner.parameter_arrays().items():
            delta = state.adam[f"refiner.{name}"].update(
                wgrads[name], cfg.refiner.learning_rate, o.beta1, o.beta2, o.eps
            )
            arr += delta

    if phase.trains_gaussians:
        # Background centers also feel the view-direction dependence.
        d_centers = grads.centers
        if len(bg_idx):
            g = grads.directions[bg_idx]
            diff = cam_center[None, :] - render_cloud.centers[bg_idx]
            r = np.linalg.norm(diff, axis=1, keepdims=True)
            r = np.where(r > 1e-12, r, 1.0)
            d = diff / r
            d_centers = d_centers.copy()
            d_centers[bg_idx] += (d * (d * g).sum(axis=1, keepdims=True) - g) / r

        delta_c = state.adam["centers"].update(
            d_centers, position_lr(cfg, state.iteration), o.beta1, o.beta2, o.eps
        )
        delta_q = state.adam["rotations"].update(grads.rotations, o.rotation_lr, o.beta1, o.beta2, o.eps)
        delta_s = state.adam["log_scales"].update(grads.log_scales, o.scale_lr, o.beta1, o.beta2, o.eps)
        delta_o = state.adam["opacity_logits"].update(
            grads.opacity_logits, o.opacity_lr, o.beta1, o.beta2, o.eps
        )
        delta_sh = state.adam["sh_coeffs"].update(grads.sh_coeffs, o.sh_lr, o.beta1, o.beta2, o.eps)

        _apply_cloud_updates(
            state, h_idx, bg_idx, tr, residuals, q_ref, c_ref,
            delta_c, delta_q, delta_s, delta_o, delta_sh,
        )
        norms = np.linalg.norm(grads.mean2d, axis=1)
        state.grad_accum[grads.visible] += norms[grads.visible]
        state.grad_count[grads.visible] += 1

    state.iteration += 1
    return StepReport(state.iteration, frame_id, phase, loss, parts, len(cloud))


def _apply_cloud_updates(
    state, h_idx, bg_idx, tr, residuals, q_ref, c_ref,
    delta_c, delta_q, delta_s, delta_o, delta_sh,
):
    """Write posed-space deltas back to the canonical cloud.

    Pose-invariant attributes update in place. Posed centers/rotations carry
    the delta back through the inverse deformation exactly: rows whose delta
    is identically zero stay bit-identical.
    """
    cloud = state.cloud
    for arr, delta in (
        (cloud.log_scales, delta_s),
        (cloud.opacity_logits, delta_o),
        (cloud.sh_coeffs, delta_sh),
    ):
        if np.any(delta):
            arr += delta

    parents = cloud.parents[h_idx]
    # Centers: canonical += (R_r R_face)^T delta.
    if np.any(delta_c):
        if len(h_idx):
            chain = np.einsum("nij,njk->nik", residuals.rotations, tr.rotations[parents])
            cloud.centers[h_idx] += np.einsum("nji,nj->ni", chain, delta_c[h_idx])
        if len(bg_idx):
            cloud.centers[bg_idx] += delta_c[bg_idx]

    if np.any(delta_q):
        dq_h = delta_q[h_idx]
        rows = np.flatnonzero(np.any(dq_h != 0.0, axis=1))
        if len(rows):
            q_face = matrix_to_quat(tr.rotations[parents[rows]])
            q_chain = quat_multiply(residuals.quaternions()[rows], q_face)
            q_new = q_ref[rows] + dq_h[rows]
            cloud.rotations[h_idx[rows]] = quat_normalize(
                quat_multiply(quat_conjugate(q_chain), q_new)
            )
        dq_b = delta_q[bg_idx]
        rows = np.flatnonzero(np.any(dq_b != 0.0, axis=1))
        if len(rows):
            cloud.rotations[bg_idx[rows]] = quat_normalize(
                cloud.rotations[bg_idx[rows]] + dq_b[rows]
            )


def densify_and_prune(state: TrainerState) -> dict[str, int]:
    """Clone small / split large high-gradient Gaussians, prune weak ones.

    Children inherit the parent id and canonical normal of their source.
    Optimizer moment rows are created (zeroed) and removed alongside.
    """
    cloud = state.cloud
    cfg = state.config.schedule
    n = len(cloud)
    avg = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    hot = avg > cfg.densify_grad_threshold
    clone_mask = hot & (max_scale <= cfg.split_scale_threshold)
    split_mask = hot & (max_scale > cfg.split_scale_threshold)

    pieces = [cloud]
    adam_piece_rows: list[np.ndarray] = [np.arange(n)]
    if clone_mask.any():
        pieces.append(cloud.take(np.flatnonzero(clone_mask)))
        adam_piece_rows.append(np.full(int(clone_mask.sum()), -1))
    if split_mask.any():
        idx = np.flatnonzero(split_mask)
        children = []
        for _ in range(2):
            child = cloud.take(idx)
            xi = state.rng.standard_normal((len(idx), 3))
            from .raster import _quat_to_matrix

            R = _quat_to_matrix(quat_normalize(child.rotations))
            offs = np.einsum("nij,nj->ni", R, np.exp(child.log_scales) * xi)
            child.centers = child.centers + offs
            child.log_scales = child.log_scales - np.log(1.6)
            children.append(child)
        for child in children:
            pieces.append(child)
            adam_piece_rows.append(np.full(len(idx), -1))

    merged = pieces[0]
    for p in pieces[1:]:
        merged = concat_clouds(merged, p)
    source_rows = np.concatenate(adam_piece_rows)

    # Remove split originals, low-opacity and oversized Gaussians.
    drop = np.zeros(len(merged), dtype=bool)
    drop[:n] = split_mask
    opac = merged.opacities
    drop |= opac < cfg.opacity_prune_threshold
    drop |= np.exp(merged.log_scales).max(axis=1) > cfg.prune_scale_threshold
    keep = np.flatnonzero(~drop)

    state.cloud = merged.take(keep)
    kept_sources = source_rows[keep]
    for name in GAUSSIAN_PARAM_NAMES:
        adam = state.adam[name]
        new_m = np.zeros((len(keep),) + adam.m.shape[1:])
        new_v = np.zeros_like(new_m)
        old = kept_sources >= 0
        new_m[old] = adam.m[kept_sources[old]]
        new_v[old] = adam.v[kept_sources[old]]
        adam.m, adam.v = new_m, new_v
    state.grad_accum = np.zeros(len(keep))
    state.grad_count = np.zeros(len(keep))
    state.cloud.audit(face_count=state.canonical.face_count)
    return {
        "cloned": int(clone_mask.sum()),
        "split": int(split_mask.sum()),
        "pruned": int(drop.sum()) - int(split_mask.sum()),
        "total": len(state.cloud),
    }


def maybe_reassign_parents(state: TrainerState, completed: int) -> bool:
    """Delegate to the nearest-face reassignment on schedule."""
    if not should_update_parents(completed, state.config.schedule):
        return False
    state.cloud = reassign_parents(state.cloud, state.canonical, state.config.tau, grid=state.grid())
    state.cloud.audit(face_count=state.canonical.face_count)
    return True


# -- checkpointing ----------------------------------------------------------------


def save_checkpoint(state: TrainerState, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs",
                 "parents", "canonical_normals"):
        arrays[f"cloud.{name}"] = getattr(state.cloud, name)
    for name, arr in state.refiner.parameter_arrays().items():
        arrays[f"refiner.{name}"] = arr
    for name, adam in state.adam.items():
        arrays[f"adam.{name}.m"] = adam.m
        arrays[f"adam.{name}.v"] = adam.v
        arrays[f"adam.{name}.step"] = np.asarray([adam.step], dtype=np.int64)
    arrays["densify.grad_accum"] = state.grad_accum
    arrays["densify.grad_count"] = state.grad_count
    arrays["shape.coefficients"] = state.shape.coefficients
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "rng_state": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    write_arrays(path, arrays)


def load_checkpoint(
    path: str | Path,
    body: BodyModel,
    expected_config: RunConfig | None = None,
    allow_config_mismatch: bool = False,
) -> TrainerState:
    arrays = read_arrays(path)
    if "meta" not in arrays:
        raise ValueError(f"{path}: not a trainer checkpoint (no meta record)")
    meta = json.loads(bytes(arrays["meta"]).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
        )
    config = RunConfig.from_dict(meta["config"])
    if expected_config is not None and expected_config.hash() != meta["config_hash"]:
        if not allow_config_mismatch:
            raise ValueError(
                f"{path}: config hash {meta['config_hash']} does not match the provided "
                "config; pass allow_config_mismatch=True to override"
            )
        config = expected_config

    cloud = GaussianCloud(
        centers=arrays["cloud.centers"],
        rotations=arrays["cloud.rotations"],
        log_scales=arrays["cloud.log_scales"],
        opacity_logits=arrays["cloud.opacity_logits"],
        sh_coeffs=arrays["cloud.sh_coeffs"],
        parents=arrays["cloud.parents"],
        canonical_normals=arrays["cloud.canonical_normals"],
    )
    shape = ShapeParams(arrays["shape.coefficients"])
    canonical = pose_body(body, shape, PoseParams.rest(body.joint_count))
    refiner = RefinerMLP.init(
        body.joint_count, config.refiner.hidden_width, config.refiner.to_bounds(), seed=config.seed
    )
    for name, arr in refiner.parameter_arrays().items():
        arr[:] = arrays[f"refiner.{name}"]
    adam = _fresh_adam(cloud, refiner)
    for name, a in adam.items():
        a.m = arrays[f"adam.{name}.m"]
        a.v = arrays[f"adam.{name}.v"]
        a.step = int(arrays[f"adam.{name}.step"][0])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return TrainerState(
        config=config, body=body, shape=shape, canonical=canonical, cloud=cloud,
        refiner=refiner, adam=adam, rng=rng, iteration=int(meta["iteration"]),
        grad_accum=arrays["densify.grad_accum"], grad_count=arrays["densify.grad_count"],
    )


# -- driver -------------------------------------------------------------------------


def run_training(
    state: TrainerState,
    dataset: SceneDataset,
    out_dir: str | Path | None = None,
    log_every: int = 1,
    progress_every: int = 0,
    perceptual_hook=None,
) -> list[StepReport]:
    """Run to total_iters: steps, parent updates, density control, checkpoints.

    Emits line-delimited JSON records to <out_dir>/train_log.jsonl and writes
    checkpoint_<iter>.ckpt files every config.checkpoint_every iterations.
    """
    cfg = state.config
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "train_log.jsonl", "a")
    images: dict[tuple, np.ndarray] = {}
    reports: list[StepReport] = []
    t0 = time.perf_counter()
    try:
        while state.iteration < cfg.schedule.total_iters:
            frame = dataset.frames[int(state.rng.integers(len(dataset.frames)))]
            key = (frame.camera_id, frame.frame_index)
            if key not in images:
                images[key] = load_frame_image(frame)
            report = train_step(
                state, frame, images[key], dataset.camera_of(frame), perceptual_hook
            )
            reports.append(report)
            completed = state.iteration
            if should_densify(completed, cfg.schedule, report.phase):
                densify_and_prune(state)
            maybe_reassign_parents(state, completed)
            if log_f is not None and completed % max(log_every, 1) == 0:
                rec = {
                    "iter": completed,
                    "phase": report.phase.value,
                    "loss": report.loss,
                    **report.parts,
                    "gaussians": report.gaussians,
                    "frame": report.frame_id,
                }
                log_f.write(json.dumps(rec) + "\n")
            if progress_every and completed % progress_every == 0:
                rate = completed / max(time.perf_counter() - t0, 1e-9)
                print(
                    f"iter {completed}/{cfg.schedule.total_iters} "
                    f"phase={report.phase.value} loss={report.loss:.4f} "
                    f"gaussians={report.gaussians} ({rate:.1f} it/s)",
                    flush=True,
                )
            if out is not None and cfg.checkpoint_every and completed % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint_{completed:06d}.ckpt")
    finally:
        if log_f is not None:
            log_f.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint_final.ckpt")
    return reports
