"""Scene datasets: on-disk layout, loaders, and a synthetic scene generator.

Layout of a scene directory:

    root/
      body_model.bin        neutral body-model container
      cameras.txt           one block per camera (see write_cameras_file)
      poses.txt             one block per frame index (camera independent)
      shape.txt             one shape coefficient per line (may be empty)
      images/<cam>/<frame:05d>.png
      masks/<cam>/<frame:05d>.png    (ground truth; generator output only)

The synthetic generator renders a procedurally colored mesh with a z-buffer
triangle rasterizer that shares no code with the Gaussian renderer, so
end-to-end tests have an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyModel, PoseParams, ShapeParams, load_body_model, pose_body, save_body_model
from .config import RunConfig
from .container import FormatError, ValidationError
from .images import image_size, load_rgb, save_mask, save_rgb
from .raster import Camera


@dataclass
class FrameRecord:
    camera_id: str
    frame_index: int
    image_path: Path
    pose: PoseParams


@dataclass
class SceneDataset:
    root: Path
    cameras: dict[str, Camera]
    frames: list[FrameRecord]
    shape: ShapeParams
    body: BodyModel

    def camera_of(self, frame: FrameRecord) -> Camera:
        return self.cameras[frame.camera_id]


# -- camera file ---------------------------------------------------------------


def write_cameras_file(path: str | Path, cameras: dict[str, Camera]) -> None:
    lines = []
    for cid, cam in cameras.items():
        lines += [
            f"camera: {cid}",
            f"width: {cam.width}",
            f"height: {cam.height}",
            f"fx: {float(cam.fx)!r}",
            f"fy: {float(cam.fy)!r}",
            f"cx: {float(cam.cx)!r}",
            f"cy: {float(cam.cy)!r}",
            f"near: {float(cam.near)!r}",
            f"far: {float(cam.far)!r}",
            "world_to_camera:",
        ]
        for r in range(3):
            row = list(cam.rotation[r]) + [cam.translation[r]]
            lines.append("  " + " ".join(repr(float(v)) for v in row))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def parse_cameras_file(path: str | Path) -> dict[str, Camera]:
    """Parse the block camera format; errors carry 1-based line numbers."""
    cameras: dict[str, Camera] = {}
    block: dict = {}
    matrix_rows: list[list[float]] = []
    in_matrix = False
    start_line = 0

    def finish(line_no: int):
        nonlocal block, matrix_rows, in_matrix
        if not block:
            return
        try:
            if len(matrix_rows) != 3:
                raise ValueError(f"expected 3 world_to_camera rows, got {len(matrix_rows)}")
            M = np.asarray(matrix_rows)
            cam = Camera(
                fx=block["fx"], fy=block["fy"], cx=block["cx"], cy=block["cy"],
                rotation=M[:, :3], translation=M[:, 3],
                width=int(block["width"]), height=int(block["height"]),
                near=block.get("near", 0.1), far=block.get("far", 100.0),
                camera_id=block["camera"],
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}:{start_line}: bad camera block: {exc}") from exc
        if cam.camera_id in cameras:
            raise FormatError(f"{path}:{start_line}: duplicate camera id {cam.camera_id!r}")
        cameras[cam.camera_id] = cam
        block, matrix_rows, in_matrix = {}, [], False

    for i, rawline in enumerate(Path(path).read_text().splitlines(), start=1):
        line = rawline.strip()
        if not line:
            continue
        if line.startswith("camera:"):
            finish(i)
            start_line = i
            block = {"camera": line.split(":", 1)[1].strip()}
            in_matrix = False
        elif line.startswith("world_to_camera:"):
            in_matrix = True
        elif in_matrix and len(matrix_rows) < 3:
            try:
                row = [float(tok) for tok in line.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: bad matrix row {line!r}") from exc
            if len(row) != 4:
                raise FormatError(f"{path}:{i}: matrix row needs 4 values, got {len(row)}")
            matrix_rows.append(row)
        elif ":" in line:
            key, val = line.split(":", 1)
            try:
                block[key.strip()] = float(val.strip())
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: bad value for {key.strip()!r}") from exc
        else:
            raise FormatError(f"{path}:{i}: unexpected line {line!r}")
    finish(-1)
    if not cameras:
        raise FormatError(f"{path}: no camera blocks found")
    return cameras


# -- pose file -----------------------------------------------------------------


def write_poses_file(path: str | Path, poses: list[PoseParams]) -> None:
    lines = []
    for t, pose in enumerate(poses):
        lines.append(f"frame: {t}")
        lines.append("root_translation: " + " ".join(repr(float(v)) for v in pose.root_translation))
        lines.append("joint_rotations:")
        for row in pose.joint_rotations:
            lines.append("  " + " ".join(repr(float(v)) for v in row))
        lines.append("")
    Path(path).write_text("\n".join(lines))


def parse_poses_file(path: str | Path) -> dict[int, PoseParams]:
    poses: dict[int, PoseParams] = {}
    frame = None
    trans = None
    rows: list[list[float]] = []

    def finish(line_no):
        nonlocal frame, trans, rows
        if frame is None:
            return
        if trans is None or not rows:
            raise FormatError(f"{path}:{line_no}: frame {frame} incomplete")
        poses[frame] = PoseParams(np.asarray(rows), np.asarray(trans))
        frame, trans, rows = None, None, []

    mode = ""
    for i, rawline in enumerate(Path(path).read_text().splitlines(), start=1):
        line = rawline.strip()
        if not line:
            continue
        if line.startswith("frame:"):
            finish(i)
            try:
                frame = int(line.split(":", 1)[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: bad frame index") from exc
            mode = ""
        elif line.startswith("root_translation:"):
            vals = line.split(":", 1)[1].split()
            if len(vals) != 3:
                raise FormatError(f"{path}:{i}: root_translation needs 3 values")
            trans = [float(v) for v in vals]
        elif line.startswith("joint_rotations:"):
            mode = "rot"
        elif mode == "rot":
            try:
                row = [float(tok) for tok in line.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: bad rotation row") from exc
            if len(row) != 3:
                raise FormatError(f"{path}:{i}: rotation rows need 3 values")
            rows.append(row)
        else:
            raise FormatError(f"{path}:{i}: unexpected line {line!r}")
    finish(-1)
    return poses


def parse_shape_file(path: Path) -> ShapeParams:
    if not path.exists():
        return ShapeParams()
    vals = [float(line) for line in path.read_text().split()]
    return ShapeParams(np.asarray(vals))


# -- dataset loading -------------------------------------------------------------


def load_dataset(root: str | Path, config: RunConfig, split: str = "train") -> SceneDataset:
    """Load and validate a scene directory.

    split: "train", "heldout" or "all". The heldout split takes frames with
    index % k == k // 2 for k = config.dataset.heldout_every (mirroring the
    midpoint-between-training-frames evaluation convention); k == 0 means no
    holdout. Camera subsets come from config.dataset.{train,test}_cameras.
    """
    root = Path(root)
    if split not in ("train", "heldout", "all"):
        raise ValueError(f"unknown split {split!r}")
    cameras = parse_cameras_file(root / "cameras.txt")
    poses = parse_poses_file(root / "poses.txt")
    shape = parse_shape_file(root / "shape.txt")
    body = load_body_model(root / "body_model.bin")
    for idx, pose in poses.items():
        if pose.joint_rotations.shape[0] != body.joint_count:
            raise ValidationError(
                f"poses.txt frame {idx}: {pose.joint_rotations.shape[0]} joints, body has {body.joint_count}"
            )

    cam_filter = config.dataset.train_cameras if split == "train" else config.dataset.test_cameras
    if cam_filter:
        missing = [c for c in cam_filter if c not in cameras]
        if missing:
            raise ValidationError(f"config references unknown cameras {missing}")
        use_cams = {c: cameras[c] for c in cam_filter}
    else:
        use_cams = cameras

    k = config.dataset.heldout_every
    stride = config.dataset.frame_stride

    def in_split(idx: int) -> bool:
        held = k > 0 and idx % k == k // 2
        if split == "heldout":
            return held
        if split == "train":
            return not held and idx % stride == 0
        return True

    frames: list[FrameRecord] = []
    errors: list[str] = []
    for cid, cam in use_cams.items():
        img_dir = root / "images" / cid
        if not img_dir.is_dir():
            errors.append(f"missing image directory {img_dir}")
            continue
        for img_path in sorted(img_dir.glob("*.png")):
            idx = int(img_path.stem)
            if not in_split(idx):
                continue
            if idx not in poses:
                errors.append(f"{img_path}: no pose for frame {idx}")
                continue
            w, h = image_size(img_path)
            if (w, h) != (cam.width, cam.height):
                errors.append(f"{img_path}: {w}x{h} does not match camera {cid} ({cam.width}x{cam.height})")
                continue
            frames.append(FrameRecord(cid, idx, img_path, poses[idx]))
    if errors:
        raise ValidationError("dataset problems:\n  " + "\n  ".join(errors))
    if not frames:
        raise ValidationError(f"dataset split {split!r} is empty")
    return SceneDataset(root, use_cams, frames, shape, body)


# -- reference triangle rasterizer (independent oracle) ---------------------------


def render_mesh_reference(
    vertices: np.ndarray,
    faces: np.ndarray,
    face_colors: np.ndarray,
    camera: Camera,
    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffered flat-shaded triangle render: (rgb, coverage mask, depth).

    Perspective-correct depth via linear interpolation of 1/z. Deliberately
    independent of the Gaussian splatting pipeline.
    """
    Wp, Hp = camera.width, camera.height
    rgb = np.empty((Hp, Wp, 3))
    rgb[:] = np.asarray(background, dtype=np.float64)
    zbuf = np.full((Hp, Wp), np.inf)
    covered = np.zeros((Hp, Wp), dtype=bool)

    cam_pts = vertices @ camera.rotation.T + camera.translation
    z = cam_pts[:, 2]
    px = camera.fx * cam_pts[:, 0] / z + camera.cx
    py = camera.fy * cam_pts[:, 1] / z + camera.cy
    inv_z = 1.0 / z

    tri_ok = (z[faces] > camera.near).all(axis=1)
    for f in np.flatnonzero(tri_ok):
        i0, i1, i2 = faces[f]
        x0, y0, x1, y1, x2, y2 = px[i0], py[i0], px[i1], py[i1], px[i2], py[i2]
        xmin = max(int(np.floor(min(x0, x1, x2))), 0)
        xmax = min(int(np.ceil(max(x0, x1, x2))), Wp - 1)
        ymin = max(int(np.floor(min(y0, y1, y2))), 0)
        ymax = min(int(np.ceil(max(y0, y1, y2))), Hp - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        ys, xs = np.mgrid[ymin : ymax + 1, xmin : xmax + 1]
        w0 = ((x1 - xs) * (y2 - ys) - (x2 - xs) * (y1 - ys)) / area
        w1 = ((x2 - xs) * (y0 - ys) - (x0 - xs) * (y2 - ys)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_depth = w0 * inv_z[i0] + w1 * inv_z[i1] + w2 * inv_z[i2]
        depth = 1.0 / inv_depth
        sub_z = zbuf[ymin : ymax + 1, xmin : xmax + 1]
        win = inside & (depth < sub_z)
        sub_z[win] = depth[win]
        rgb[ymin : ymax + 1, xmin : xmax + 1][win] = face_colors[f]
        covered[ymin : ymax + 1, xmin : xmax + 1] |= win

    depth_img = np.where(np.isfinite(zbuf), zbuf, 0.0)
    return rgb, covered, depth_img


def procedural_face_colors(body_canonical, seed: int = 0) -> np.ndarray:
    """Deterministic vivid per-face palette from canonical face positions."""
    centers = body_canonical.face_centers
    ang = np.arctan2(centers[:, 2], centers[:, 0]) / (2.0 * np.pi)
    band = centers[:, 1] * 4.0
    hue = (ang + band) % 1.0
    phases = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    colors = 0.5 + 0.42 * np.cos(2.0 * np.pi * (hue[:, None] + phases[None, :]))
    rng = np.random.default_rng(seed)
    colors = np.clip(colors + rng.uniform(-0.05, 0.05, size=colors.shape), 0.03, 0.97)
    return colors


def camera_ring(
    count: int,
    radius: float,
    target: np.ndarray,
    width: int,
    height: int,
    focal: float,
    near: float = 0.1,
    far: float = 100.0,
) -> dict[str, Camera]:
    """Cameras evenly spaced on a horizontal circle, all looking at `target`."""
    cams = {}
    for i in range(count):
        ang = 2.0 * np.pi * i / count
        pos = target + np.array([radius * np.cos(ang), 0.0, radius * np.sin(ang)])
        cid = f"cam{i:02d}"
        cams[cid] = Camera.looking_at(
            pos, target, fx=focal, fy=focal,
            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height, near=near, far=far, camera_id=cid,
        )
    return cams


def pose_trajectory(joint_count: int, frames: int, seed: int, amplitude: float = 0.45) -> list[PoseParams]:
    """Smooth seeded joint-angle trajectory (sinusoids per joint axis)."""
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.1, amplitude, size=(joint_count, 3))
    amp[0] *= 0.3  # keep the root mostly steady so the figure stays framed
    freq = rng.uniform(0.5, 2.0, size=(joint_count, 3))
    phase = rng.uniform(0, 2 * np.pi, size=(joint_count, 3))
    poses = []
    for t in range(frames):
        s = t / max(frames, 1)
        rot = amp * np.sin(2.0 * np.pi * freq * s + phase)
        poses.append(PoseParams(rot, np.zeros(3)))
    return poses


def generate_synthetic_scene(
    body: BodyModel,
    cams: int,
    frames: int,
    seed: int,
    out_dir: str | Path,
    width: int = 128,
    height: int = 128,
    rig_radius: float = 2.5,
    background=(0.16, 0.18, 0.22),
) -> None:
    """Write a complete synthetic capture: body, cameras, poses, images, masks."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    save_body_model(out / "body_model.bin", body)

    canonical = pose_body(body, ShapeParams(), PoseParams.rest(body.joint_count))
    target = 0.5 * (canonical.vertices.min(axis=0) + canonical.vertices.max(axis=0))
    extent = np.linalg.norm(canonical.vertices - target, axis=1).max()
    focal = 0.42 * min(width, height) * rig_radius / extent
    cameras = camera_ring(cams, rig_radius, target, width, height, focal)
    write_cameras_file(out / "cameras.txt", cameras)

    poses = pose_trajectory(body.joint_count, frames, seed)
    write_poses_file(out / "poses.txt", poses)
    (out / "shape.txt").write_text("")

    colors = procedural_face_colors(canonical, seed=seed)
    for cid, cam in cameras.items():
        (out / "images" / cid).mkdir(exist_ok=True)
        (out / "masks" / cid).mkdir(exist_ok=True)
        for t, pose in enumerate(poses):
            posed = pose_body(body, ShapeParams(), pose)
            rgb, mask, _ = render_mesh_reference(posed.vertices, posed.faces, colors, cam, background)
            save_rgb(out / "images" / cid / f"{t:05d}.png", rgb)
            save_mask(out / "masks" / cid / f"{t:05d}.png", mask)


def load_frame_image(frame: FrameRecord) -> np.ndarray:
    return load_rgb(frame.image_path)
