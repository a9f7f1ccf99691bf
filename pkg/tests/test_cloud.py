import numpy as np
import pytest

from skinsplat import (
    BACKGROUND,
    ValidationError,
    concat_clouds,
    empty_cloud,
    init_background_gaussians,
    init_human_gaussians,
    load_ply,
    save_ply,
)
from skinsplat.cloud import sigmoid


def test_init_human_one_per_face(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=1)
    F = small_canonical.face_count
    assert len(cloud) == F
    assert np.array_equal(np.sort(cloud.parents), np.arange(F))
    cloud.audit(face_count=F)


def test_init_human_centers_on_face_plane(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    tri = small_canonical.vertices[small_canonical.faces]
    # Point-plane distance via the unit face normal.
    d = np.einsum("fi,fi->f", cloud.centers - tri[:, 0], small_canonical.face_normals)
    assert np.abs(d).max() <= 1e-9


def test_init_human_deterministic(small_canonical):
    a = init_human_gaussians(small_canonical, sh_degree=2)
    b = init_human_gaussians(small_canonical, sh_degree=2)
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "parents"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_init_human_opacity_and_color(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=2, init_opacity=0.1)
    assert np.allclose(sigmoid(cloud.opacity_logits), 0.1)
    assert np.allclose(cloud.sh_coeffs[:, :, 1:], 0.0)


def test_background_sphere_radius_and_seed():
    a = init_background_gaussians(1000, radius=5.0, seed=3, sh_degree=1)
    assert np.abs(np.linalg.norm(a.centers, axis=1) - 5.0).max() <= 1e-6
    assert (a.parents == BACKGROUND).all()
    b = init_background_gaussians(1000, radius=5.0, seed=3, sh_degree=1)
    assert np.array_equal(a.centers, b.centers)
    c = init_background_gaussians(1000, radius=5.0, seed=4, sh_degree=1)
    assert not np.array_equal(a.centers, c.centers)


def test_background_count_zero_concat_identity(small_canonical):
    human = init_human_gaussians(small_canonical, sh_degree=1)
    bg = init_background_gaussians(0, radius=5.0, seed=0, sh_degree=1)
    both = concat_clouds(human, bg)
    assert len(both) == len(human)
    assert np.array_equal(both.centers, human.centers)


def test_concat_sizes_and_order(small_canonical):
    human = init_human_gaussians(small_canonical, sh_degree=1)
    a = human.take(np.arange(10))
    b = init_background_gaussians(5, radius=2.0, seed=1, sh_degree=1)
    both = concat_clouds(a, b)
    assert len(both) == 15
    # Element-wise index audit across every attribute.
    for i in range(10):
        assert np.array_equal(both.centers[i], a.centers[i])
        assert np.array_equal(both.sh_coeffs[i], a.sh_coeffs[i])
    for i in range(5):
        assert np.array_equal(both.centers[10 + i], b.centers[i])
        assert both.parents[10 + i] == BACKGROUND


def test_concat_sh_mismatch(small_canonical):
    a = init_human_gaussians(small_canonical, sh_degree=1)
    b = init_background_gaussians(5, radius=2.0, seed=1, sh_degree=2)
    with pytest.raises(ValidationError):
        concat_clouds(a, b)


def test_ply_roundtrip_bit_exact(tmp_path, small_canonical):
    human = init_human_gaussians(small_canonical, sh_degree=2)
    rng = np.random.default_rng(0)
    cloud = concat_clouds(
        human.take(np.arange(60)),
        init_background_gaussians(40, radius=3.0, seed=9, sh_degree=2),
    )
    cloud.sh_coeffs += rng.normal(scale=0.05, size=cloud.sh_coeffs.shape)
    path = tmp_path / "cloud.ply"
    save_ply(path, cloud)
    back = load_ply(path)
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs", "canonical_normals"):
        assert np.array_equal(getattr(back, name), getattr(cloud, name)), name
    assert np.array_equal(back.parents, cloud.parents)


def test_ply_empty_cloud(tmp_path):
    path = tmp_path / "empty.ply"
    save_ply(path, empty_cloud(sh_degree=1))
    back = load_ply(path)
    assert len(back) == 0
    assert back.sh_degree == 1


def test_ply_missing_rotation_errors(tmp_path, small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0).take(np.arange(4))
    path = tmp_path / "c.ply"
    save_ply(path, cloud)
    text = path.read_bytes()
    broken = text.replace(b"property double rot_0\n", b"")
    path.write_bytes(broken)
    with pytest.raises(ValidationError, match="rot_0"):
        load_ply(path)


def test_audit_catches_bad_quat(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    cloud.rotations[3] *= 2.0
    with pytest.raises(ValidationError):
        cloud.audit()


def test_audit_catches_bad_parent(small_canonical):
    cloud = init_human_gaussians(small_canonical, sh_degree=0)
    cloud.parents[0] = small_canonical.face_count + 5
    with pytest.raises(ValidationError):
        cloud.audit(face_count=small_canonical.face_count)


def test_human_background_partition_recoverable(small_canonical):
    human = init_human_gaussians(small_canonical, sh_degree=1)
    bg = init_background_gaussians(17, radius=4.0, seed=2, sh_degree=1)
    both = concat_clouds(human, bg)
    assert int(both.human_mask.sum()) == len(human)
    assert int((~both.human_mask).sum()) == 17
