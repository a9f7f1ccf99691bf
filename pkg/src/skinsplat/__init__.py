"""Animatable human avatars as mesh-skinned 3D Gaussians.

A body is represented by 3D Gaussians attached to the faces of a skinned
parametric mesh. Posing moves every Gaussian by its parent face's rigid
transform, a small MLP refines the result per Gaussian, and a differentiable
CPU splatting rasterizer renders (and backpropagates through) the images.
"""

from .body import (
    BodyModel,
    PoseParams,
    PosedBody,
    ShapeParams,
    load_body_model,
    make_synthetic_body,
    pose_body,
    save_body_model,
)
from .cloud import (
    BACKGROUND,
    GaussianCloud,
    concat_clouds,
    empty_cloud,
    init_background_gaussians,
    init_human_gaussians,
    load_ply,
    save_ply,
)
from .container import FormatError, ValidationError
from .deform import (
    FaceGrid,
    camera_relative_directions,
    deformed_normal_directions,
    filter_background,
    fit_face_transforms,
    nearest_faces_bruteforce,
    pose_gaussians,
    reassign_parents,
    unpose_gaussians,
)
from .losses import LossWeights, loss_l1, loss_ssim, metric_psnr, ssim_value, total_loss
from .raster import (
    Camera,
    GaussianGrads,
    ProjectedGaussians,
    RenderOutput,
    project_gaussians,
    rasterize_backward,
    rasterize_forward,
    render,
    render_mask,
    render_reference,
)
from .refine import (
    OutputBounds,
    RefinerMLP,
    ResidualTransforms,
    apply_residuals,
    encode_joint_offsets,
    outputs_to_transforms,
    postprocess_raw,
    refiner_backward,
    refiner_forward,
)
from .config import RunConfig, ScheduleConfig
from .data import (
    FrameRecord,
    SceneDataset,
    generate_synthetic_scene,
    load_dataset,
    render_mesh_reference,
)
from .pipeline import AvatarModel, StageTimer, render_avatar
from .train import (
    TrainerState,
    TrainingDiverged,
    TrainPhase,
    densify_and_prune,
    init_trainer,
    load_checkpoint,
    maybe_reassign_parents,
    run_training,
    save_checkpoint,
    schedule_phase,
    should_densify,
    should_update_parents,
    train_step,
)
from .transforms import RigidTransformSet

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
