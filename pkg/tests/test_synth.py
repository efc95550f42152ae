import numpy as np
import pytest

from boardtruth.errors import EmptyVisibility
from boardtruth.geometry import pose_distance, project_points
from boardtruth.pipeline import StageFlags, board_pose_error, construct_graph, solve_trajectory, trajectory_ate
from boardtruth.pose_graph import load_pose_graph
from boardtruth.scene_data import load_detections, load_intrinsics, load_scene, load_trajectory
from boardtruth.synth import TRAJECTORY_KINDS, SynthConfig, generate

SMALL = dict(num_boards=6, duration=2.0, closeup_frames=40)


def _truth_pixels(s, frames, camera=0):
    """Ground-truth projections for every observation, recomputed from the truth poses."""
    out = []
    by_frame = dict(zip(range(len(s.trajectory)), s.trajectory.poses))
    for fr in frames:
        cam = s.extrinsics[camera] @ by_frame[fr.frame_index].inverse()
        for ob in fr.observations:
            b = s.scene.board_of(ob.marker_id)
            X = s.board_poses[b].apply(s.scene[b].all_corners()[4 * s.scene[b].marker_ids.index(ob.marker_id)
                                                                 + ob.corner_index])
            out.append((project_points(cam.apply(X)[None], s.intrinsics[camera])[0], ob.pixel))
    return np.array([a for a, _ in out]), np.array([b for _, b in out])


def test_same_seed_writes_identical_files(tmp_path):
    cfg = SynthConfig(seed=4, pixel_noise=0.5, outlier_fraction=0.05, occlusion_probability=0.1,
                      rig={"extrinsics": [[0.05, 0, 0, 0, 0.2588190451, 0, 0.9659258263]]}, **SMALL)
    generate(cfg).write(tmp_path / "a")
    generate(cfg).write(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 8
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_different_seed_differs():
    a = generate(SynthConfig(seed=1, pixel_noise=0.5, **SMALL))
    b = generate(SynthConfig(seed=2, pixel_noise=0.5, **SMALL))
    assert not np.array_equal(a.frames[0].pixels, b.frames[0].pixels)


def test_noiseless_detections_are_exact_projections():
    s = generate(SynthConfig(seed=0, **SMALL))
    truth, det = _truth_pixels(s, s.frames)
    assert len(det) > 100
    assert np.abs(truth - det).max() < 1e-9


def test_pixel_noise_standard_deviation():
    s = generate(SynthConfig(seed=5, pixel_noise=0.5, num_boards=9, duration=8.0, closeup_frames=0))
    truth, det = _truth_pixels(s, s.frames)
    assert len(det) >= 1e5 // 2
    r = (det - truth).ravel()
    assert r.size >= 1e5
    assert abs(np.std(r) - 0.5) < 0.025
    assert abs(np.mean(r)) < 0.01


def test_outliers_and_occlusion():
    base = generate(SynthConfig(seed=6, **SMALL))
    occ = generate(SynthConfig(seed=6, occlusion_probability=0.3, **SMALL))
    n0 = sum(len(fr.observations) for fr in base.frames)
    n1 = sum(len(fr.observations) for fr in occ.frames)
    assert 0.6 < n1 / n0 < 0.8
    out = generate(SynthConfig(seed=6, outlier_fraction=0.2, **SMALL))
    truth, det = _truth_pixels(out, out.frames)
    frac = np.mean(np.linalg.norm(det - truth, axis=1) > 1e-6)
    assert 0.17 < frac < 0.23


def test_detections_stay_inside_image():
    s = generate(SynthConfig(seed=7, trajectory="random-walk", **SMALL))
    px = np.concatenate([fr.pixels for fr in s.frames + s.closeup_frames])
    intr = s.intrinsics[0]
    assert px.min() >= 0 and np.all(px[:, 0] <= intr.width - 1) and np.all(px[:, 1] <= intr.height - 1)


@pytest.mark.parametrize("kind", TRAJECTORY_KINDS)
def test_every_trajectory_kind_sees_boards(kind):
    s = generate(SynthConfig(seed=8, trajectory=kind, **SMALL))
    assert len(s.frames) >= 0.9 * s.config.num_frames
    assert len(s.trajectory) == s.config.num_frames


def test_truth_round_trips_through_loaders(tmp_path):
    s = generate(SynthConfig(seed=9, pixel_noise=0.3, **SMALL))
    s.write(tmp_path)
    scene = load_scene(tmp_path / "scene.json")
    assert [lay.to_dict() for lay in scene] == [lay.to_dict() for lay in s.scene]
    assert load_detections(tmp_path / "trajectory_detections.txt") == s.frames
    assert load_detections(tmp_path / "closeup_detections.txt") == s.closeup_frames
    assert load_intrinsics(tmp_path / "camera.json") == s.intrinsics[0]
    traj = load_trajectory(tmp_path / "truth" / "trajectory.txt")
    assert traj.timestamps == s.trajectory.timestamps
    for a, b in zip(traj.poses, s.trajectory.poses):
        ang, dist = pose_distance(a, b)
        assert ang < 1e-12 and dist == 0.0
    graph = load_pose_graph(tmp_path / "truth" / "board_poses.json")
    for b, p in s.board_poses.items():
        ang, dist = pose_distance(graph.nodes[b], p)
        assert ang < 1e-12 and dist == 0.0


def test_empty_visibility():
    with pytest.raises(EmptyVisibility):
        generate(SynthConfig(seed=0, trajectory_height=-1.0, closeup_height=-0.5, **SMALL))


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        SynthConfig(outlier_fraction=1.5)
    with pytest.raises(ValueError):
        SynthConfig(occlusion_probability=-0.1)
    with pytest.raises(ValueError):
        SynthConfig(trajectory="spiral")
    cfg = SynthConfig(seed=3, pixel_noise=0.25, rig={"extrinsics": [[0, 0, 0, 0, 0, 0, 1]]})
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_noiseless_pipeline_recovers_truth():
    s = generate(SynthConfig(seed=10, num_boards=9, duration=2.0, closeup_frames=80))
    intr = s.intrinsics[0]
    graph = construct_graph(s.closeup_frames, s.scene, intr, StageFlags())
    assert board_pose_error(graph.nodes, s.board_poses) < 1e-6
    traj, problem, _ = solve_trajectory(s.frames, graph, s.scene, intr, StageFlags())
    assert trajectory_ate(s.trajectory, traj) < 1e-6
    assert board_pose_error(problem.board_poses, s.board_poses) < 1e-6
