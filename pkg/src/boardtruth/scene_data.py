"""Board layouts, detections, trajectories and their file formats.

Detections file, one observed marker corner per line::

    # frame_index timestamp marker_id corner_index u v
    0 0.0 17 0 312.25 240.5

Trajectory file (TUM RGB-D convention, camera-to-world poses)::

    # timestamp tx ty tz qx qy qz qw
    0.0 0.1 0.2 0.5 0 0 0 1

Board layouts and scenes are JSON.  Floats are written with ``repr`` so
that ``save(load(f))`` reproduces a canonical file byte for byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateObservation, NonMonotoneTimestamps, ParseError, UnknownMarker
from .geometry import CameraIntrinsics, RigidPose

# corner offsets in marker units, in corner_index order
CORNER_OFFSETS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def fmt(x: float) -> str:
    """Shortest exact decimal for ``x`` (integral floats keep a ``.0``)."""
    return repr(float(x))


@dataclass(frozen=True)
class BoardLayout:
    """A planar grid of markers; marker ``k`` sits at row ``k // cols``, column ``k % cols``."""

    board_id: int
    rows: int
    cols: int
    marker_size: float
    marker_spacing: float
    marker_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "marker_ids", tuple(int(m) for m in self.marker_ids))
        if len(self.marker_ids) != self.rows * self.cols:
            raise ValueError(f"board {self.board_id}: expected {self.rows * self.cols} marker ids, "
                             f"got {len(self.marker_ids)}")
        if len(set(self.marker_ids)) != len(self.marker_ids):
            raise ValueError(f"board {self.board_id}: marker ids repeat")
        if self.marker_size <= 0 or self.marker_spacing < 0:
            raise ValueError(f"board {self.board_id}: bad marker geometry")

    @property
    def pitch(self) -> float:
        return self.marker_size + self.marker_spacing

    @property
    def extent(self) -> tuple[float, float]:
        """(width, height) of the printed marker area in meters."""
        return (self.cols * self.pitch - self.marker_spacing, self.rows * self.pitch - self.marker_spacing)

    def marker_index(self, marker_id: int) -> int:
        try:
            return self._index[marker_id]
        except KeyError:
            raise UnknownMarker(f"marker {marker_id} is not on board {self.board_id}") from None

    @property
    def _index(self):
        cache = self.__dict__.get("_index_cache")
        if cache is None:
            cache = {m: i for i, m in enumerate(self.marker_ids)}
            object.__setattr__(self, "_index_cache", cache)
        return cache

    def all_corners(self) -> np.ndarray:
        """Corners of every marker, shape (rows*cols*4, 3), marker-major."""
        idx = np.arange(self.rows * self.cols)
        origin = np.stack([(idx % self.cols) * self.pitch, (idx // self.cols) * self.pitch], axis=1)
        xy = origin[:, None, :] + CORNER_OFFSETS[None] * self.marker_size
        out = np.zeros((len(idx) * 4, 3))
        out[:, :2] = xy.reshape(-1, 2)
        return out

    def to_dict(self) -> dict:
        return {"board_id": self.board_id, "rows": self.rows, "cols": self.cols,
                "marker_size": self.marker_size, "marker_spacing": self.marker_spacing,
                "marker_ids": list(self.marker_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> BoardLayout:
        try:
            return cls(int(d["board_id"]), int(d["rows"]), int(d["cols"]), float(d["marker_size"]),
                       float(d["marker_spacing"]), tuple(d["marker_ids"]))
        except KeyError as exc:
            raise ParseError(f"board layout is missing field {exc.args[0]!r}") from None


def corner_local_coords(layout: BoardLayout, marker_id: int, corner_index: int) -> np.ndarray:
    """Board-frame position of one marker corner (z = 0).

    Corner 0 is the marker origin; corners 1..3 follow (+x), (+x+y), (+y).
    """
    if corner_index not in (0, 1, 2, 3):
        raise ValueError(f"corner_index must be 0..3, got {corner_index}")
    k = layout.marker_index(marker_id)
    r, c = divmod(k, layout.cols)
    x = c * layout.pitch + CORNER_OFFSETS[corner_index, 0] * layout.marker_size
    y = r * layout.pitch + CORNER_OFFSETS[corner_index, 1] * layout.marker_size
    return np.array([x, y, 0.0])


class Scene:
    """All boards of a scene with a global marker-id lookup."""

    def __init__(self, layouts):
        self.layouts = {lay.board_id: lay for lay in sorted(layouts, key=lambda b: b.board_id)}
        self._marker_board = {}
        self._marker_index = {}
        for lay in self.layouts.values():
            for k, m in enumerate(lay.marker_ids):
                if m in self._marker_board:
                    raise ValueError(f"marker id {m} appears on boards {self._marker_board[m]} "
                                     f"and {lay.board_id}")
                self._marker_board[m] = lay.board_id
                self._marker_index[m] = k
        self._corners = {b: lay.all_corners().reshape(-1, 4, 3) for b, lay in self.layouts.items()}
        self._lut_keys = None

    def __iter__(self):
        return iter(self.layouts.values())

    def __len__(self):
        return len(self.layouts)

    def __getitem__(self, board_id) -> BoardLayout:
        return self.layouts[board_id]

    @property
    def board_ids(self) -> list:
        return list(self.layouts)

    def board_of(self, marker_id: int) -> int:
        try:
            return self._marker_board[marker_id]
        except KeyError:
            raise UnknownMarker(f"marker {marker_id} belongs to no board") from None

    def has_marker(self, marker_id: int) -> bool:
        return marker_id in self._marker_board

    def corner(self, marker_id: int, corner_index: int) -> np.ndarray:
        if corner_index not in (0, 1, 2, 3):
            raise ValueError(f"corner_index must be 0..3, got {corner_index}")
        b = self.board_of(marker_id)
        return self._corners[b][self._marker_index[marker_id], corner_index].copy()

    def lookup(self, marker_ids):
        """Vectorized (board id, index on board); -1 for markers of no board."""
        m = np.asarray(marker_ids, dtype=np.int64)
        if self._lut_keys is None:
            keys = np.array(sorted(self._marker_board), dtype=np.int64)
            self._lut_keys = keys
            self._lut_board = np.array([self._marker_board[k] for k in keys], dtype=np.int64)
            self._lut_index = np.array([self._marker_index[k] for k in keys], dtype=np.int64)
        keys = self._lut_keys
        pos = np.minimum(np.searchsorted(keys, m), max(len(keys) - 1, 0))
        hit = (keys[pos] == m) if len(keys) else np.zeros(len(m), bool)
        return np.where(hit, self._lut_board[pos] if len(keys) else -1, -1), \
            np.where(hit, self._lut_index[pos] if len(keys) else 0, 0)

    def corners(self, board_id: int, marker_ids, corner_indices) -> np.ndarray:
        """Board-frame corner positions, vectorized over observations of one board."""
        k = np.array([self._marker_index[m] for m in marker_ids], dtype=np.int64)
        return self._corners[board_id][k, np.asarray(corner_indices, dtype=np.int64)].reshape(-1, 3)


@dataclass(frozen=True)
class MarkerObservation:
    marker_id: int
    corner_index: int
    pixel: tuple

    def __post_init__(self):
        if self.corner_index not in (0, 1, 2, 3):
            raise ValueError(f"corner_index must be 0..3, got {self.corner_index}")
        u, v = (float(p) for p in self.pixel)
        if not (math.isfinite(u) and math.isfinite(v)):
            raise ValueError("pixel must be finite")
        object.__setattr__(self, "pixel", (u, v))


class FrameDetections:
    """Corner detections of one frame, stored column-wise.

    Built either from a list of :class:`MarkerObservation` or, via
    :meth:`from_arrays`, from parallel marker / corner / pixel arrays.
    """

    def __init__(self, frame_index: int, timestamp: float, observations=()):
        obs = list(observations)
        self._init(frame_index, timestamp, np.array([o.marker_id for o in obs], dtype=np.int64),
                   np.array([o.corner_index for o in obs], dtype=np.int64),
                   np.array([o.pixel for o in obs], dtype=float).reshape(-1, 2))

    @classmethod
    def from_arrays(cls, frame_index, timestamp, marker_ids, corner_indices, pixels) -> FrameDetections:
        self = cls.__new__(cls)
        self._init(frame_index, timestamp, np.asarray(marker_ids, dtype=np.int64).reshape(-1),
                   np.asarray(corner_indices, dtype=np.int64).reshape(-1),
                   np.asarray(pixels, dtype=float).reshape(-1, 2))
        return self

    def _init(self, frame_index, timestamp, markers, corners, pixels):
        self.frame_index = int(frame_index)
        self.timestamp = float(timestamp)
        if not (len(markers) == len(corners) == len(pixels)):
            raise ValueError("marker, corner and pixel columns differ in length")
        if np.any((corners < 0) | (corners > 3)):
            raise ValueError("corner_index must be 0..3")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("pixel must be finite")
        key = markers * 4 + corners
        if len(np.unique(key)) != len(key):
            _, first = np.unique(key, return_index=True)
            dup = np.setdiff1d(np.arange(len(key)), first)[0]
            raise DuplicateObservation(f"frame {self.frame_index}: marker {markers[dup]} "
                                       f"corner {corners[dup]} observed twice")
        for a in (markers, corners, pixels):
            a.flags.writeable = False
        self.marker_ids, self.corner_indices, self.pixels = markers, corners, pixels

    @property
    def observations(self) -> list:
        return [MarkerObservation(int(m), int(c), (float(p[0]), float(p[1])))
                for m, c, p in zip(self.marker_ids, self.corner_indices, self.pixels)]

    def __len__(self):
        return len(self.marker_ids)

    def __eq__(self, other):
        if not isinstance(other, FrameDetections):
            return NotImplemented
        return (self.frame_index == other.frame_index and self.timestamp == other.timestamp
                and np.array_equal(self.marker_ids, other.marker_ids)
                and np.array_equal(self.corner_indices, other.corner_indices)
                and np.array_equal(self.pixels, other.pixels))

    def __repr__(self):
        return f"FrameDetections(frame_index={self.frame_index}, timestamp={self.timestamp}, n={len(self)})"

    def board_columns(self, scene: Scene):
        """Per observation: board id (-1 for unknown markers) and board-frame corner (n, 3)."""
        board, idx = scene.lookup(self.marker_ids)
        pts = np.zeros((len(board), 3))
        for b in np.unique(board[board >= 0]):
            sel = board == b
            pts[sel] = scene._corners[int(b)][idx[sel], self.corner_indices[sel]]
        return board, pts

    def by_board(self, scene: Scene) -> dict:
        """Group observations per board: board_id -> (local corners (n,3), pixels (n,2), marker ids)."""
        board, pts = self.board_columns(scene)
        out = {}
        for b in np.unique(board[board >= 0]):
            sel = board == b
            out[int(b)] = (pts[sel], self.pixels[sel], self.marker_ids[sel].tolist())
        return out


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    frame_count_total: int | None = None

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        self.timestamps = [float(t) for t in self.timestamps]
        for i in range(1, len(self.timestamps)):
            if not self.timestamps[i] > self.timestamps[i - 1]:
                raise NonMonotoneTimestamps(f"timestamp {self.timestamps[i]} at index {i} "
                                            f"does not increase")
        if self.frame_count_total is None:
            self.frame_count_total = len(self.poses)

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3, 3)


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _load_detections_checked(path) -> list:
    """Line-by-line reader; slow, but names the first offending line."""
    rows, frames = [], []
    current = None
    seen = set()

    def close():
        if current is not None:
            frames.append(FrameDetections.from_arrays(current[0], current[1], *_columns(rows)))

    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", path, lineno)
        try:
            fi, mid, ci = int(parts[0]), int(parts[2]), int(parts[3])
            ts, u, v = float(parts[1]), float(parts[4]), float(parts[5])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        if not all(math.isfinite(x) for x in (ts, u, v)):
            raise ParseError("non-finite value", path, lineno)
        if ci not in (0, 1, 2, 3):
            raise ParseError(f"corner index {ci} out of range", path, lineno)
        if current is None or fi != current[0]:
            if current is not None:
                if fi <= current[0]:
                    raise ParseError(f"frame index {fi} after {current[0]}", path, lineno)
                if ts <= current[1]:
                    raise NonMonotoneTimestamps(f"{path}:{lineno}: timestamp {ts} does not increase")
            close()
            current, rows, seen = (fi, ts), [], set()
        elif ts != current[1]:
            raise ParseError(f"frame {fi} has inconsistent timestamps", path, lineno)
        if (mid, ci) in seen:
            raise DuplicateObservation(f"{path}:{lineno}: marker {mid} corner {ci} repeated in frame {fi}")
        seen.add((mid, ci))
        rows.append((mid, ci, u, v))
    close()
    return frames


def _columns(rows):
    a = np.array(rows, dtype=float).reshape(-1, 4)
    return a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2:]


def load_detections(path) -> list:
    """Read a detections file.

    The whole file is parsed column-wise; if any check fails the line reader
    reruns to report the first bad line.
    """
    with open(path, encoding="utf-8") as fh:
        data = [ln for ln in (raw.strip() for raw in fh) if ln and not ln.startswith("#")]
    if not data:
        return []
    tok = " ".join(data).split()
    if len(tok) != 6 * len(data):
        return _load_detections_checked(path)
    try:
        fi = np.array(tok[0::6], dtype=np.int64)
        mid = np.array(tok[2::6], dtype=np.int64)
        ci = np.array(tok[3::6], dtype=np.int64)
        ts = np.array(tok[1::6], dtype=float)
        px = np.stack([np.array(tok[4::6], dtype=float), np.array(tok[5::6], dtype=float)], axis=1)
    except (ValueError, OverflowError):
        return _load_detections_checked(path)
    new = np.r_[True, fi[1:] != fi[:-1]]
    starts = np.flatnonzero(new)
    seg = np.cumsum(new) - 1
    ok = (np.all(np.isfinite(ts)) and np.all(np.isfinite(px)) and np.all((ci >= 0) & (ci <= 3))
          and np.all(np.diff(fi[starts]) > 0) and np.all(np.diff(ts[starts]) > 0)
          and np.all(ts == ts[starts][seg]))
    if ok:
        key = np.stack([seg, mid, ci], axis=1)
        ok = len(np.unique(key, axis=0)) == len(key)
    if not ok:
        return _load_detections_checked(path)
    bounds = np.r_[starts, len(fi)]
    return [FrameDetections.from_arrays(fi[a], ts[a], mid[a:b], ci[a:b], px[a:b])
            for a, b in zip(bounds[:-1], bounds[1:])]


def save_detections(path, frames) -> None:
    lines = ["# frame_index timestamp marker_id corner_index u v"]
    for fr in frames:
        head = f"{fr.frame_index} {fmt(fr.timestamp)} "
        lines.extend(f"{head}{m} {c} {fmt(u)} {fmt(v)}"
                     for m, c, (u, v) in zip(fr.marker_ids.tolist(), fr.corner_indices.tolist(), fr.pixels.tolist()))
    _write_text(path, "\n".join(lines) + "\n")


def pose_to_tum(pose: RigidPose) -> list:
    """(tx ty tz qx qy qz qw)."""
    w, x, y, z = pose.quat
    return [*pose.translation.tolist(), float(x), float(y), float(z), float(w)]


def pose_from_tum(vals) -> RigidPose:
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in vals)
    return RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def load_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    total = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("# frame_count_total:"):
                try:
                    total = int(line.split(":", 1)[1])
                except ValueError:
                    raise ParseError("bad frame_count_total", path, lineno) from None
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise ParseError(f"expected 8 fields, got {len(parts)}", path, lineno)
            try:
                vals = [float(p) for p in parts]
                pose = pose_from_tum(vals[1:])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if stamps and not vals[0] > stamps[-1]:
                raise NonMonotoneTimestamps(f"{path}:{lineno}: timestamp {vals[0]} does not increase")
            stamps.append(vals[0])
            poses.append(pose)
    return Trajectory(stamps, poses, total)


def save_trajectory(path, traj: Trajectory) -> None:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    if traj.frame_count_total is not None and traj.frame_count_total != len(traj):
        lines.append(f"# frame_count_total: {traj.frame_count_total}")
    for ts, pose in zip(traj.timestamps, traj.poses):
        lines.append(" ".join([fmt(ts)] + [fmt(v) for v in pose_to_tum(pose)]))
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None


def load_layout(path) -> BoardLayout:
    return BoardLayout.from_dict(read_json(path))


def save_layout(path, layout: BoardLayout) -> None:
    write_json(path, layout.to_dict())


def load_scene(path) -> Scene:
    """Scene file: ``{"boards": [...]}`` whose entries are layout dicts or paths relative to the file."""
    data = read_json(path)
    if "boards" not in data:
        raise ParseError("scene file has no 'boards' list", path)
    base = os.path.dirname(os.path.abspath(path))
    layouts = []
    for entry in data["boards"]:
        if isinstance(entry, str):
            layouts.append(load_layout(os.path.join(base, entry)))
        else:
            layouts.append(BoardLayout.from_dict(entry))
    return Scene(layouts)


def save_scene(path, scene: Scene, layout_files=None) -> None:
    """Write a scene; with ``layout_files`` (board_id -> relative path) layouts go to separate files."""
    if layout_files:
        base = os.path.dirname(os.path.abspath(path))
        for lay in scene:
            save_layout(os.path.join(base, layout_files[lay.board_id]), lay)
        entries = [layout_files[b] for b in scene.board_ids]
    else:
        entries = [lay.to_dict() for lay in scene]
    write_json(path, {"boards": entries})


def load_intrinsics(path) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.from_dict(read_json(path))
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), path) from None


def save_intrinsics(path, intr: CameraIntrinsics) -> None:
    write_json(path, intr.to_dict())


def load_depth_samples(path) -> np.ndarray:
    vals = []
    for lineno, line in _data_lines(path):
        try:
            d = float(line)
        except ValueError:
            raise ParseError(f"not a number: {line!r}", path, lineno) from None
        if not (math.isfinite(d) and d > 0):
            raise ParseError(f"depth must be positive, got {line}", path, lineno)
        vals.append(d)
    return np.array(vals)


def save_depth_samples(path, depths) -> None:
    _write_text(path, "".join(f"{fmt(d)}\n" for d in depths))
