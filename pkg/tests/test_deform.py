import numpy as np
import pytest

from skinsplat import (
    BACKGROUND,
    FaceGrid,
    PoseParams,
    ShapeParams,
    camera_relative_directions,
    deformed_normal_directions,
    filter_background,
    fit_face_transforms,
    init_background_gaussians,
    init_human_gaussians,
    make_synthetic_body,
    nearest_faces_bruteforce,
    pose_body,
    pose_gaussians,
    reassign_parents,
    unpose_gaussians,
)
from skinsplat.refine import ResidualTransforms
from skinsplat.transforms import RigidTransformSet, axis_angle_to_matrix, quat_normalize

from conftest import random_pose


def make_random_residuals(n, rng, angle=0.4, trans=0.05):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(-angle, angle, size=n)
    from skinsplat.transforms import rotation_about_axis

    return ResidualTransforms(
        translations=rng.uniform(-trans, trans, size=(n, 3)),
        angles=angles,
        axes=axes,
        axis_ok=np.ones(n, dtype=bool),
        rotations=rotation_about_axis(axes, angles),
    )


# -- per-face rigid fit -------------------------------------------------------


def test_pvd_self_alignment(small_canonical):
    tr = fit_face_transforms(small_canonical, small_canonical)
    assert np.abs(tr.rotations - np.eye(3)).max() <= 1e-9
    assert np.abs(tr.translations).max() <= 1e-9


def test_pvd_recovers_global_rigid(small_body, small_canonical):
    pose = PoseParams.rest(small_body.joint_count)
    pose.joint_rotations[0] = [0.4, 0.8, -0.3]
    pose.root_translation = [0.2, -0.1, 0.6]
    posed = pose_body(small_body, ShapeParams(), pose)
    tr = fit_face_transforms(small_canonical, posed)
    R0 = axis_angle_to_matrix(np.array(pose.joint_rotations[0])[None])[0]
    assert np.abs(tr.rotations - R0).max() <= 1e-9
    src = small_canonical.vertices[small_canonical.faces]
    dst = posed.vertices[posed.faces]
    mapped = np.einsum("fij,fvj->fvi", tr.rotations, src) + tr.translations[:, None, :]
    assert np.abs(mapped - dst).max() <= 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_pvd_exact_on_random_poses(tube_body, tube_canonical, seed):
    rng = np.random.default_rng(seed)
    posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, rng, angle_scale=0.9))
    tr = fit_face_transforms(tube_canonical, posed)
    tr.validate(atol=1e-9)
    src = tube_canonical.vertices[tube_canonical.faces]
    dst = posed.vertices[posed.faces]
    mapped = np.einsum("fij,fvj->fvi", tr.rotations, src) + tr.translations[:, None, :]
    assert np.abs(mapped - dst).max() <= 1e-6


def test_pvd_left_equivariance(tube_body, tube_canonical):
    rng = np.random.default_rng(42)
    posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, rng))
    tr = fit_face_transforms(tube_canonical, posed)

    R0 = axis_angle_to_matrix(np.array([0.3, -0.5, 0.2])[None])[0]
    t0 = np.array([0.5, 0.1, -0.4])
    rotated = pose_body(tube_body, ShapeParams(), random_pose(tube_body, np.random.default_rng(42)))
    rotated.vertices[:] = rotated.vertices @ R0.T + t0
    import skinsplat.body as body_mod

    centers, normals, rots, degen = body_mod.face_frames(rotated.vertices, rotated.faces)
    rotated.face_centers, rotated.face_normals, rotated.face_rotations = centers, normals, rots
    tr2 = fit_face_transforms(tube_canonical, rotated)
    expected_R = np.einsum("ij,fjk->fik", R0, tr.rotations)
    assert np.abs(tr2.rotations - expected_R).max() <= 1e-6


# -- posing / unposing Gaussians ---------------------------------------------


def test_pose_gaussians_identity(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=1)
    out = pose_gaussians(cloud, RigidTransformSet.identity(small_canonical.face_count))
    assert np.array_equal(out.centers, cloud.centers)
    # Left-multiplying by the identity quaternion keeps components bit-exact
    # up to the normalization applied on the way out.
    assert np.abs(out.rotations - cloud.rotations).max() <= 1e-12
    assert np.array_equal(out.sh_coeffs, cloud.sh_coeffs)
    assert np.array_equal(out.log_scales, cloud.log_scales)


def test_pose_gaussians_centroid_tracks_face(tube_body, tube_canonical):
    rng = np.random.default_rng(5)
    posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, rng))
    tr = fit_face_transforms(tube_canonical, posed)
    cloud = init_human_gaussians(tube_canonical, sh_degree=0)
    moved = pose_gaussians(cloud, tr)
    assert np.abs(moved.centers - posed.face_centers).max() <= 1e-9


def test_pose_gaussians_global_isometry(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    R0 = axis_angle_to_matrix(np.array([0.1, 0.9, -0.4])[None])[0]
    t0 = np.array([1.0, 2.0, 3.0])
    tr = RigidTransformSet(
        np.broadcast_to(R0, (small_canonical.face_count, 3, 3)).copy(),
        np.broadcast_to(t0, (small_canonical.face_count, 3)).copy(),
    )
    moved = pose_gaussians(cloud, tr)
    d_before = np.linalg.norm(cloud.centers[:30, None] - cloud.centers[None, :30], axis=-1)
    d_after = np.linalg.norm(moved.centers[:30, None] - moved.centers[None, :30], axis=-1)
    assert np.abs(d_before - d_after).max() <= 1e-9


def test_pose_gaussians_background_untouched(small_canonical):
    human = init_human_gaussians(small_canonical, sh_degree=1)
    from skinsplat import concat_clouds

    bg = init_background_gaussians(20, radius=8.0, seed=0, sh_degree=1)
    cloud = concat_clouds(human, bg)
    tr = RigidTransformSet(
        np.broadcast_to(np.eye(3), (small_canonical.face_count, 3, 3)).copy(),
        np.full((small_canonical.face_count, 3), 5.0),
    )
    moved = pose_gaussians(cloud, tr)
    assert np.array_equal(moved.centers[~moved.human_mask], bg.centers)
    assert np.abs(moved.centers[moved.human_mask] - (human.centers + 5.0)).max() <= 1e-12


def test_unpose_roundtrip_identity_residuals(tube_body, tube_canonical):
    rng = np.random.default_rng(8)
    cloud = init_human_gaussians(tube_canonical, sh_degree=1)
    for seed in range(3):
        posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, np.random.default_rng(seed)))
        tr = fit_face_transforms(tube_canonical, posed)
        fwd = pose_gaussians(cloud, tr)
        back = unpose_gaussians(fwd, tr)
        assert np.abs(back.centers - cloud.centers).max() <= 1e-7
        dots = np.abs(np.einsum("ni,ni->n", quat_normalize(back.rotations), cloud.rotations))
        assert (dots >= 1.0 - 1e-9).all()


def test_unpose_roundtrip_random_residuals(tube_body, tube_canonical):
    rng = np.random.default_rng(21)
    cloud = init_human_gaussians(tube_canonical, sh_degree=0)
    posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, rng))
    tr = fit_face_transforms(tube_canonical, posed)
    fwd = pose_gaussians(cloud, tr)
    res = make_random_residuals(len(cloud), rng)
    refined = fwd.copy()
    refined.centers = res.rigid_set().apply(fwd.centers)
    from skinsplat.transforms import matrix_to_quat, quat_multiply

    refined.rotations = quat_normalize(quat_multiply(matrix_to_quat(res.rotations), fwd.rotations))
    back = unpose_gaussians(refined, tr, res.rigid_set())
    assert np.abs(back.centers - cloud.centers).max() <= 1e-6


def test_unpose_residual_length_mismatch(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    tr = RigidTransformSet.identity(small_canonical.face_count)
    with pytest.raises(Exception):
        unpose_gaussians(cloud, tr, RigidTransformSet.identity(3))


# -- view directions ----------------------------------------------------------


def test_relative_directions_basic():
    dirs, flagged = camera_relative_directions(np.zeros((1, 3)), np.array([0.0, 0.0, 1.0]))
    assert np.allclose(dirs[0], [0, 0, 1])
    assert len(flagged) == 0


def test_relative_directions_unit_and_reference():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(10, 3))
    c = np.array([0.5, -1.0, 2.0])
    dirs, _ = camera_relative_directions(pts, c)
    assert np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() <= 1e-12
    for i in range(10):
        v = c - pts[i]
        assert np.allclose(dirs[i], v / np.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2))


def test_relative_directions_degenerate_flagged():
    c = np.array([1.0, 2.0, 3.0])
    dirs, flagged = camera_relative_directions(np.array([c, [0, 0, 0]]), c)
    assert list(flagged) == [0]
    assert np.allclose(dirs[0], [0, 0, 1])


def test_normal_directions_identity(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    tr = RigidTransformSet.identity(small_canonical.face_count)
    d = deformed_normal_directions(cloud, tr)
    assert np.abs(d - cloud.canonical_normals).max() <= 1e-12


def test_normal_directions_unit_norm(tube_body, tube_canonical):
    rng = np.random.default_rng(17)
    cloud = init_human_gaussians(tube_canonical, sh_degree=0)
    posed = pose_body(tube_body, ShapeParams(), random_pose(tube_body, rng))
    tr = fit_face_transforms(tube_canonical, posed)
    res = make_random_residuals(len(cloud), rng)
    d = deformed_normal_directions(cloud, tr, res)
    assert np.abs(np.linalg.norm(d, axis=1) - 1.0).max() <= 1e-6


def test_normal_directions_hand_composed():
    # One Gaussian whose normal is +x; the face transform rotates 90 deg
    # about z; the residual stays identity: the direction must become +y.
    from skinsplat.cloud import empty_cloud

    cloud = empty_cloud(sh_degree=0)
    cloud.centers = np.zeros((1, 3))
    cloud.rotations = np.array([[1.0, 0, 0, 0]])
    cloud.log_scales = np.zeros((1, 3))
    cloud.opacity_logits = np.zeros(1)
    cloud.sh_coeffs = np.zeros((1, 3, 1))
    cloud.parents = np.array([0], dtype=np.int64)
    cloud.canonical_normals = np.array([[1.0, 0.0, 0.0]])
    Rz = axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2])[None])
    tr = RigidTransformSet(Rz, np.zeros((1, 3)))
    d = deformed_normal_directions(cloud, tr, ResidualTransforms.identity(1))
    assert np.abs(d[0] - np.array([0.0, 1.0, 0.0])).max() <= 1e-9


# -- parent reassignment ------------------------------------------------------


def test_reassign_centroid_keeps_face(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    out = reassign_parents(cloud, small_canonical, tau=0.10)
    assert np.array_equal(out.parents, cloud.parents)


def test_reassign_far_gaussian_to_background(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0).take(np.arange(3))
    # Push one Gaussian 0.15 m along its normal: above tau = 0.10.
    cloud.centers[1] += 0.15 * small_canonical.face_normals[1]
    out = reassign_parents(cloud, small_canonical, tau=0.10)
    assert out.parents[1] == BACKGROUND
    assert out.parents[0] != BACKGROUND and out.parents[2] != BACKGROUND


def test_reassign_matches_bruteforce(tube_canonical):
    rng = np.random.default_rng(33)
    n = 500
    lo = tube_canonical.vertices.min(axis=0) - 0.2
    hi = tube_canonical.vertices.max(axis=0) + 0.2
    pts = rng.uniform(lo, hi, size=(n, 3))

    from skinsplat.cloud import empty_cloud

    cloud = empty_cloud(sh_degree=0)
    cloud.centers = pts
    cloud.rotations = np.tile([1.0, 0, 0, 0], (n, 1))
    cloud.log_scales = np.zeros((n, 3))
    cloud.opacity_logits = np.zeros(n)
    cloud.sh_coeffs = np.zeros((n, 3, 1))
    cloud.parents = np.zeros(n, dtype=np.int64)
    cloud.canonical_normals = np.tile([0.0, 1.0, 0.0], (n, 1))

    tau = 0.10
    out = reassign_parents(cloud, tube_canonical, tau=tau)
    tris = tube_canonical.vertices[tube_canonical.faces]
    idx, dist = nearest_faces_bruteforce(pts, tris)
    expected = np.where(dist <= tau, idx, BACKGROUND)
    assert np.array_equal(out.parents, expected)


def test_background_is_absorbing(small_canonical):
    cloud = init_background_gaussians(10, radius=0.01, seed=0, sh_degree=0)
    # Background Gaussians sit basically on the mesh but must stay background.
    out = reassign_parents(cloud, small_canonical, tau=10.0)
    assert (out.parents == BACKGROUND).all()


def test_grid_query_matches_bruteforce_ties(tube_canonical):
    grid = FaceGrid(tube_canonical.vertices, tube_canonical.faces)
    tris = tube_canonical.vertices[tube_canonical.faces]
    rng = np.random.default_rng(7)
    pts = rng.uniform(tris.min(axis=(0, 1)), tris.max(axis=(0, 1)), size=(200, 3))
    idx_b, dist_b = nearest_faces_bruteforce(pts, tris)
    for i, p in enumerate(pts):
        idx_g, dist_g = grid.query(p)
        assert idx_g == idx_b[i]
        assert dist_g == dist_b[i]


# -- background filtering -----------------------------------------------------


def test_filter_background_mixed(small_canonical):
    from skinsplat import concat_clouds

    human = init_human_gaussians(small_canonical, sh_degree=1).take(np.arange(10))
    bg = init_background_gaussians(5, radius=3.0, seed=0, sh_degree=1)
    cloud = concat_clouds(human, bg)
    kept = filter_background(cloud)
    assert len(kept) == 10
    assert np.array_equal(kept.centers, human.centers)


def test_filter_background_all_background():
    bg = init_background_gaussians(5, radius=3.0, seed=0, sh_degree=1)
    assert len(filter_background(bg)) == 0


def test_filter_background_idempotent(small_canonical):
    from skinsplat import concat_clouds

    human = init_human_gaussians(small_canonical, sh_degree=1)
    bg = init_background_gaussians(5, radius=3.0, seed=0, sh_degree=1)
    once = filter_background(concat_clouds(human, bg))
    twice = filter_background(once)
    assert np.array_equal(once.centers, twice.centers)
    assert np.array_equal(once.parents, twice.parents)
