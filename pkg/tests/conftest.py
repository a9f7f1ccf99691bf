import numpy as np
import pytest

from skinsplat import PoseParams, ShapeParams, make_synthetic_body, pose_body


@pytest.fixture(scope="session")
def small_body():
    return make_synthetic_body(joints=3, segments=6)


@pytest.fixture(scope="session")
def tube_body():
    return make_synthetic_body(joints=8, segments=12)


@pytest.fixture(scope="session")
def small_canonical(small_body):
    return pose_body(small_body, ShapeParams(), PoseParams.rest(small_body.joint_count))


@pytest.fixture(scope="session")
def tube_canonical(tube_body):
    return pose_body(tube_body, ShapeParams(), PoseParams.rest(tube_body.joint_count))


def random_pose(model, rng, angle_scale=0.5, translate_scale=0.3):
    rot = rng.uniform(-angle_scale, angle_scale, size=(model.joint_count, 3))
    trans = rng.uniform(-translate_scale, translate_scale, size=3)
    return PoseParams(rot, trans)
