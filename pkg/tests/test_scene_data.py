import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boardtruth.errors import DuplicateObservation, NonMonotoneTimestamps, ParseError, UnknownMarker
from boardtruth.geometry import RigidPose
from boardtruth.scene_data import (BoardLayout, FrameDetections, MarkerObservation, Scene, Trajectory,
                                   corner_local_coords, load_depth_samples, load_detections, load_scene,
                                   load_trajectory, save_depth_samples, save_detections, save_scene,
                                   save_trajectory)


@pytest.fixture
def layout():
    return BoardLayout(0, 2, 3, 0.1, 0.02, range(6))


def test_corner_coords_grid_arithmetic(layout):
    np.testing.assert_allclose(corner_local_coords(layout, 0, 0), [0, 0, 0])
    # marker 1 sits at row 0, column 1; marker 3 at row 1, column 0
    np.testing.assert_allclose(corner_local_coords(layout, 1, 0), [0.12, 0, 0], atol=1e-15)
    np.testing.assert_allclose(corner_local_coords(layout, 3, 2), [0.1, 0.22, 0], atol=1e-15)


def test_corner_coords_match_all_corners(layout):
    allc = layout.all_corners()
    for m in layout.marker_ids:
        for c in range(4):
            np.testing.assert_array_equal(corner_local_coords(layout, m, c), allc[4 * m + c])
    assert np.all(allc[:, 2] == 0.0)


def test_corner_coords_unknown_marker(layout):
    with pytest.raises(UnknownMarker):
        corner_local_coords(layout, 99, 0)
    with pytest.raises(ValueError):
        corner_local_coords(layout, 0, 4)


def test_layout_rejects_bad_geometry():
    with pytest.raises(ValueError):
        BoardLayout(0, 2, 2, 0.1, 0.0, [1, 2, 3])
    with pytest.raises(ValueError):
        BoardLayout(0, 1, 2, 0.1, 0.0, [1, 1])


def test_scene_rejects_shared_marker_ids():
    with pytest.raises(ValueError):
        Scene([BoardLayout(0, 1, 2, 0.1, 0.0, [0, 1]), BoardLayout(1, 1, 2, 0.1, 0.0, [1, 2])])


def test_scene_lookup_and_round_trip(tmp_path):
    scene = Scene([BoardLayout(0, 1, 2, 0.1, 0.01, [5, 7]), BoardLayout(3, 1, 1, 0.2, 0.0, [2])])
    assert scene.board_of(7) == 0 and scene.board_of(2) == 3
    save_scene(tmp_path / "scene.json", scene, {0: "b0.json", 3: "b3.json"})
    back = load_scene(tmp_path / "scene.json")
    assert [lay.to_dict() for lay in back] == [lay.to_dict() for lay in scene]


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_empty_detection_file(tmp_path):
    assert load_detections(_write(tmp_path / "d.txt", "")) == []
    assert load_detections(_write(tmp_path / "c.txt", "# only a comment\n")) == []


def test_load_one_frame_four_corners(tmp_path):
    text = "".join(f"0 0.0 5 {c} {10.0 + c} 20.5\n" for c in range(4))
    frames = load_detections(_write(tmp_path / "d.txt", text))
    assert len(frames) == 1
    assert len(frames[0].observations) == 4
    assert frames[0].observations[2] == MarkerObservation(5, 2, (12.0, 20.5))


def test_detections_save_load_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    frames = [FrameDetections(i, 0.04 * i + 0.1,
                              [MarkerObservation(m, c, tuple(rng.uniform(0, 640, 2))) for m in (3, 9) for c in range(4)])
              for i in range(5)]
    a = tmp_path / "a.txt"
    save_detections(a, frames)
    loaded = load_detections(a)
    assert loaded == frames
    b = tmp_path / "b.txt"
    save_detections(b, loaded)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("text, err, line", [
    ("0 0.0 1 0 1.0\n", ParseError, 1),
    ("0 0.0 1 0 1.0 2.0\n0 0.0 1 x 1.0 2.0\n", ParseError, 2),
    ("0 0.0 1 7 1.0 2.0\n", ParseError, 1),
    ("0 0.0 1 0 nan 2.0\n", ParseError, 1),
    ("0 0.0 1 0 1.0 2.0\n0 0.0 1 0 3.0 4.0\n", DuplicateObservation, None),
    ("0 1.0 1 0 1.0 2.0\n1 0.5 1 0 1.0 2.0\n", NonMonotoneTimestamps, None),
    ("3 1.0 1 0 1.0 2.0\n2 2.0 1 0 1.0 2.0\n", ParseError, 2),
])
def test_detection_loader_rejects(tmp_path, text, err, line):
    with pytest.raises(err) as info:
        load_detections(_write(tmp_path / "d.txt", text))
    if line is not None:
        assert info.value.line == line


def test_frame_detections_reject_duplicates():
    with pytest.raises(DuplicateObservation):
        FrameDetections(0, 0.0, [MarkerObservation(1, 0, (0, 0)), MarkerObservation(1, 0, (1, 1))])


def _traj(n, rng):
    return Trajectory([0.1 * i for i in range(n)],
                      [RigidPose(rng.normal(size=4), rng.normal(size=3)) for _ in range(n)])


def test_trajectory_round_trip(tmp_path, rng):
    traj = _traj(20, rng)
    save_trajectory(tmp_path / "t.txt", traj)
    back = load_trajectory(tmp_path / "t.txt")
    assert back.timestamps == traj.timestamps
    for p, q in zip(back.poses, traj.poses):
        np.testing.assert_allclose(p.quat, q.quat, atol=1e-15)
        np.testing.assert_array_equal(p.translation, q.translation)
    save_trajectory(tmp_path / "u.txt", back)
    assert (tmp_path / "t.txt").read_bytes() == (tmp_path / "u.txt").read_bytes()


def test_trajectory_tum_line_layout(tmp_path):
    pose = RigidPose(np.array([0.0, 1.0, 0.0, 0.0]), [1.0, 2.0, 3.0])
    save_trajectory(tmp_path / "t.txt", Trajectory([1.5], [pose]))
    body = [ln for ln in (tmp_path / "t.txt").read_text().splitlines() if not ln.startswith("#")]
    assert body == ["1.5 1.0 2.0 3.0 1.0 0.0 0.0 0.0"]


def test_trajectory_frame_count_total_round_trip(tmp_path, rng):
    traj = _traj(3, rng)
    traj.frame_count_total = 10
    save_trajectory(tmp_path / "t.txt", traj)
    assert load_trajectory(tmp_path / "t.txt").frame_count_total == 10


def test_trajectory_loader_rejects(tmp_path):
    with pytest.raises(NonMonotoneTimestamps):
        load_trajectory(_write(tmp_path / "a.txt", "1.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 0 1\n"))
    with pytest.raises(ParseError) as info:
        load_trajectory(_write(tmp_path / "b.txt", "# c\n1.0 0 0 0 0 0 0\n"))
    assert info.value.line == 2


def test_depth_samples_round_trip_and_reject(tmp_path):
    d = np.array([0.5, 1.25, 3.0000000001])
    save_depth_samples(tmp_path / "d.txt", d)
    np.testing.assert_array_equal(load_depth_samples(tmp_path / "d.txt"), d)
    with pytest.raises(ParseError):
        load_depth_samples(_write(tmp_path / "bad.txt", "1.0\n-2.0\n"))


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 3),
                          st.floats(-1e4, 1e4, allow_nan=False), st.floats(-1e4, 1e4, allow_nan=False)),
                max_size=12, unique_by=lambda r: (r[0], r[1])))
def test_detections_round_trip_property(tmp_path_factory, rows):
    fr = FrameDetections(3, 0.125, [MarkerObservation(m, c, (u, v)) for m, c, u, v in rows])
    path = tmp_path_factory.mktemp("rt") / "d.txt"
    save_detections(path, [fr] if rows else [])
    back = load_detections(path)
    assert back == ([fr] if rows else [])
