import numpy as np

from skinsplat.transforms import (
    RigidTransformSet,
    axis_angle_to_matrix,
    matrix_to_quat,
    quat_conjugate,
    quat_left_matrix,
    quat_multiply,
    quat_normalize,
    quat_right_matrix,
    quat_to_matrix,
    rotation_about_axis,
)


def random_quats(n, seed=0):
    rng = np.random.default_rng(seed)
    return quat_normalize(rng.normal(size=(n, 4)))


def test_quat_matrix_roundtrip():
    q = random_quats(200)
    R = quat_to_matrix(q)
    q2 = matrix_to_quat(R)
    # Same rotation up to sign; matrix_to_quat fixes w >= 0.
    dots = np.abs(np.einsum("ni,ni->n", q, q2))
    assert np.all(dots >= 1.0 - 1e-12)
    assert np.allclose(quat_to_matrix(q2), R, atol=1e-12)


def test_quat_matrix_orthonormal():
    R = quat_to_matrix(random_quats(100, seed=1))
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_quat_multiply_matches_matrix_product():
    qa, qb = random_quats(50, 2), random_quats(50, 3)
    Rab = quat_to_matrix(quat_multiply(qa, qb))
    assert np.allclose(Rab, quat_to_matrix(qa) @ quat_to_matrix(qb), atol=1e-12)


def test_quat_left_right_matrices():
    qa, qb = random_quats(20, 4), random_quats(20, 5)
    prod = quat_multiply(qa, qb)
    assert np.allclose(np.einsum("nij,nj->ni", quat_left_matrix(qa), qb), prod, atol=1e-14)
    assert np.allclose(np.einsum("nij,nj->ni", quat_right_matrix(qb), qa), prod, atol=1e-14)


def test_quat_conjugate_inverts():
    q = random_quats(20, 6)
    ident = quat_multiply(q, quat_conjugate(q))
    assert np.allclose(ident, [1, 0, 0, 0], atol=1e-12)


def test_axis_angle_basic():
    R = axis_angle_to_matrix(np.array([[0.0, 0.0, np.pi / 2]]))[0]
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert np.allclose(axis_angle_to_matrix(np.zeros((1, 3)))[0], np.eye(3))


def test_rotation_about_axis_matches_axis_angle():
    rng = np.random.default_rng(7)
    axes = rng.normal(size=(30, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(-np.pi, np.pi, size=30)
    R1 = rotation_about_axis(axes, angles)
    R2 = axis_angle_to_matrix(axes * angles[:, None])
    assert np.allclose(R1, R2, atol=1e-12)


def test_rigid_set_compose_inverse():
    rng = np.random.default_rng(8)
    R = quat_to_matrix(random_quats(10, 9))
    t = rng.normal(size=(10, 3))
    a = RigidTransformSet(R, t)
    ident = a.compose(a.inverse())
    assert np.allclose(ident.rotations, np.eye(3), atol=1e-12)
    assert np.allclose(ident.translations, 0, atol=1e-12)
    pts = rng.normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(pts)), pts, atol=1e-12)
    a.validate()
