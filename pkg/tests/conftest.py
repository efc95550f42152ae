import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from boardtruth.geometry import CameraIntrinsics, RigidPose

settings.register_profile("repo", derandomize=True, deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pinhole():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@pytest.fixture
def distorted():
    return CameraIntrinsics(420.0, 410.0, 321.0, 239.0, -0.12, 0.03, -0.002, 0.0007, -0.0004)


def random_pose(rng, rot_scale=1.0, trans_scale=1.0):
    return RigidPose.exp(np.concatenate([rng.normal(0, trans_scale, 3), rng.normal(0, rot_scale, 3)]))


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)):
    """camera_from_world for a camera at ``center`` looking at ``target``."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])                 # rows: camera axes in world
    return RigidPose.from_rt(R, -R @ np.asarray(center, float))


def board_scene(n, rows=3, cols=3, size=0.05, spacing=0.01):
    from boardtruth.scene_data import BoardLayout, Scene
    per = rows * cols
    return Scene([BoardLayout(b, rows, cols, size, spacing, range(b * per, (b + 1) * per)) for b in range(n)])


def grid_nodes(n, pitch=0.3, rng=None, jitter=0.0, tilt=0.0):
    """world_from_board poses on a square grid in the z = 0 plane (board 0 at the origin)."""
    side = int(np.ceil(np.sqrt(n)))
    nodes = {}
    for b in range(n):
        r, c = divmod(b, side)
        xi = np.zeros(6)
        xi[:2] = c * pitch, r * pitch
        if b and rng is not None:
            xi[:2] += rng.normal(0, jitter, 2)
            xi[5] = rng.normal(0, 0.3)
            xi[3:5] = rng.normal(0, tilt, 2)
        nodes[b] = RigidPose.exp(xi) if b else RigidPose.identity()
    return nodes


def render(scene, nodes, cam_from_world, intr, noise=0.0, rng=None, frame_index=0, timestamp=0.0, boards=None):
    """Detections of every visible corner of ``boards`` (default: all nodes)."""
    from boardtruth.geometry import project_points
    from boardtruth.scene_data import FrameDetections
    mids, cis, pxs = [], [], []
    for b in sorted(nodes if boards is None else boards):
        lay = scene[b]
        X = (cam_from_world @ nodes[b]).apply(lay.all_corners())
        if np.any(X[:, 2] <= 0.05):
            continue
        uv = project_points(X, intr)
        if noise:
            uv = uv + rng.normal(0, noise, uv.shape)
        mids.append(np.repeat(lay.marker_ids, 4))
        cis.append(np.tile(np.arange(4), len(lay.marker_ids)))
        pxs.append(uv)
    if not mids:
        return FrameDetections(frame_index, timestamp)
    return FrameDetections.from_arrays(frame_index, timestamp, np.concatenate(mids), np.concatenate(cis),
                                       np.concatenate(pxs))


# acceptance results, printed once at the end of the run
ACCEPTANCE = {}


def record(key, title, passed, detail=""):
    ACCEPTANCE[key] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
