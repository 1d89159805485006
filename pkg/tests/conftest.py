import numpy as np
import pytest

from catpose.config import ForestConfig, PartConfig
from catpose.generate import box
from catpose.geometry import CameraIntrinsics, Mesh


@pytest.fixture
def cube():
    return box((0, 0, 0), (1, 1, 1))


@pytest.fixture
def small_cam():
    return CameraIntrinsics.kinect(64, 64, 60.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quad(z, half=10.0):
    """Square at depth ``z`` facing the camera, large enough to fill the view."""
    v = [(-half, -half, z), (half, -half, z), (half, half, z), (-half, half, z)]
    return Mesh(v, [(0, 1, 2), (0, 2, 3)])


TINY_PARTS = PartConfig(patch_size=12, stride=6, min_foreground=0.5)
TINY_FOREST = ForestConfig(n_trees=2, max_depth=6, min_samples=4, n_candidates=20, leaf_votes=10, seed=0)


def build_training_set(n_inst=2, n_views=8, seed=0, cam=None, cfg=TINY_PARTS):
    """Small privileged training set from procedural tables."""
    from catpose.dataset import PartSet, TrainingSet, extract_training_parts
    from catpose.generate import generate_category
    from catpose.geometry import PointCloud, model_diameter
    from catpose.render import render_depth, sample_viewpoints
    from catpose.skeleton import compute_ssc, project_skeleton

    insts = generate_category("table", n_inst, seed)
    cam = cam or CameraIntrinsics.kinect(96, 72, 86.0)
    ssc = compute_ssc([(i.mesh, i.skeleton) for i in insts])
    sets = []
    for k, inst in enumerate(insts):
        diam = model_diameter(PointCloud(inst.mesh.vertices))
        for v in sample_viewpoints(n_views, 2 * diam):
            d = render_depth(inst.mesh, v, cam)
            sets.append(extract_training_parts(d, v, ssc.points[k], project_skeleton(inst.skeleton, v, cam),
                                               cam, cfg, k))
    return TrainingSet("table", [i.name for i in insts], PartSet.concatenate(sets), cfg,
                       insts[0].skeleton.links, insts[0].skeleton.node_count, ssc.labels, "test")


@pytest.fixture(scope="session")
def tiny_set():
    return build_training_set()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
