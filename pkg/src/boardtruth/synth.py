"""Synthetic calibration-board scenes with exact ground truth.

Boards lie on (or near) a floor plane with their z-axis pointing up; the
world frame is the frame of board 0.  Two sequences are rendered as marker
detections: a close-up sweep used to build the pose graph and a trajectory
sequence (orbit, scan or random walk).  An optional rig adds cameras with
fixed ``camera_from_rig`` extrinsics, the rig frame being camera 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyVisibility
from .geometry import CameraIntrinsics, RigidPose, matrix_to_quat, project_points, so3_exp
from .scene_data import (BoardLayout, FrameDetections, Scene, Trajectory,
                         read_json, save_depth_samples, save_detections, save_intrinsics, save_scene,
                         save_trajectory, write_json, pose_to_tum, pose_from_tum)

log = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("orbit", "scan", "random-walk")


@dataclass
class SynthConfig:
    seed: int = 0
    num_boards: int = 16
    board_rows: int = 4
    board_cols: int = 4
    marker_size: float = 0.04
    marker_spacing: float = 0.01
    coplanar: bool = True
    board_spacing: float = 0.3           # centre-to-centre grid pitch, m
    placement_jitter: float = 0.03       # m
    tilt_deg: float = 10.0               # non-coplanar boards only
    height_jitter: float = 0.05          # non-coplanar boards only, m
    trajectory: str = "orbit"
    duration: float = 20.0               # s
    frame_rate: float = 25.0             # Hz
    trajectory_height: float = 1.0       # m
    trajectory_seed: int | None = None
    closeup_frames: int = 200
    closeup_height: float = 0.5          # m
    pixel_noise: float = 0.0             # px, std
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 0.0       # px; 0 -> uniform over the image
    occlusion_probability: float = 0.0
    intrinsics: dict = field(default_factory=lambda: {"fu": 400.0, "fv": 400.0, "cu": 320.0,
                                                      "cv": 240.0, "width": 640, "height": 480})
    rig: dict | None = None              # {"extrinsics": [[tx,ty,tz,qx,qy,qz,qw], ...], "intrinsics": [...]}
    depth_frame_stride: int = 10
    depth_pixel_stride: int = 32

    def __post_init__(self):
        for name in ("outlier_fraction", "occlusion_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ValueError(f"trajectory must be one of {TRAJECTORY_KINDS}")
        if self.num_boards < 1:
            raise ValueError("need at least one board")

    @property
    def grid_shape(self) -> tuple:
        cols = int(math.ceil(math.sqrt(self.num_boards)))
        return int(math.ceil(self.num_boards / cols)), cols

    @property
    def area(self) -> tuple:
        rows, cols = self.grid_shape
        return (cols - 1) * self.board_spacing, (rows - 1) * self.board_spacing

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> SynthConfig:
        return cls.from_dict(read_json(path))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthScene:
    config: SynthConfig
    scene: Scene
    intrinsics: list                 # per camera
    board_poses: dict                # board_id -> world_from_board
    closeup_frames: list
    closeup_trajectory: Trajectory
    trajectory_frames: list          # per camera: list of FrameDetections
    trajectory: Trajectory           # camera 0 (= rig), camera-to-world
    extrinsics: list                 # per camera: camera_from_rig
    depth_samples: np.ndarray

    @property
    def frames(self):
        return self.trajectory_frames[0]

    def write(self, outdir) -> dict:
        """Write the scene in the file formats of :mod:`boardtruth.scene_data`."""
        out = Path(outdir)
        truth = out / "truth"
        layout_files = {b: f"boards/board_{b:03d}.json" for b in self.scene.board_ids}
        save_scene(out / "scene.json", self.scene, layout_files)
        files = {"scene": "scene.json", "closeup_detections": "closeup_detections.txt",
                 "depth_samples": "depth_samples.txt"}
        for c, intr in enumerate(self.intrinsics):
            name = "camera.json" if c == 0 else f"camera_{c}.json"
            save_intrinsics(out / name, intr)
        save_detections(out / "closeup_detections.txt", self.closeup_frames)
        for c, frames in enumerate(self.trajectory_frames):
            name = "trajectory_detections.txt" if c == 0 else f"trajectory_detections_cam{c}.txt"
            save_detections(out / name, frames)
        save_depth_samples(out / "depth_samples.txt", self.depth_samples)
        save_trajectory(truth / "trajectory.txt", self.trajectory)
        save_trajectory(truth / "closeup_trajectory.txt", self.closeup_trajectory)
        write_json(truth / "board_poses.json", {
            "reference_board": self.scene.board_ids[0],
            "nodes": [{"board_id": b, "pose": pose_to_tum(p)} for b, p in sorted(self.board_poses.items())],
            "edges": []})
        write_json(truth / "extrinsics.json", {"cameras": [
            {"camera": c, "camera_from_rig": pose_to_tum(e)} for c, e in enumerate(self.extrinsics)]})
        write_json(out / "synth_config.json", self.config.to_dict())
        return files


# --------------------------------------------------------------------------
# geometry helpers
# --------------------------------------------------------------------------

def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """world_from_camera rotation with the optical axis towards ``target``."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    up = np.asarray(up, float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _smooth_noise(rng, n, dims, knots=8):
    """Smooth zero-mean noise in [-1, 1] sampled at ``n`` points."""
    freqs = np.arange(1, knots + 1)
    amps = rng.normal(size=(dims, knots)) / freqs
    phases = rng.uniform(0, 2 * np.pi, size=(dims, knots))
    s = np.linspace(0.0, 1.0, n)
    out = np.sum(amps[:, :, None] * np.sin(2 * np.pi * freqs[None, :, None] * s + phases[:, :, None]), axis=1)
    scale = np.abs(out).max(axis=1, keepdims=True, initial=0.0)
    return (out / np.where(scale > 0, scale, 1.0)).T


def _board_layouts(cfg: SynthConfig) -> Scene:
    per = cfg.board_rows * cfg.board_cols
    return Scene([BoardLayout(b, cfg.board_rows, cfg.board_cols, cfg.marker_size, cfg.marker_spacing,
                              tuple(range(b * per, (b + 1) * per))) for b in range(cfg.num_boards)])


def _place_boards(cfg: SynthConfig, scene: Scene, rng) -> dict:
    """floor_from_board poses on a near-square grid."""
    n = cfg.num_boards
    rows, cols = cfg.grid_shape
    w, h = scene[0].extent
    out = {}
    for b in range(n):
        r, c = divmod(b, cols)
        cx = (c - (cols - 1) / 2) * cfg.board_spacing
        cy = (r - (rows - 1) / 2) * cfg.board_spacing
        center = np.array([cx, cy, 0.0]) + np.r_[rng.uniform(-1, 1, 2) * cfg.placement_jitter, 0.0]
        yaw = rng.uniform(-np.pi, np.pi)
        R = so3_exp(np.array([0.0, 0.0, yaw]))
        if not cfg.coplanar:
            tilt = np.radians(cfg.tilt_deg) * rng.uniform(-1, 1, 2)
            R = R @ so3_exp(np.array([tilt[0], tilt[1], 0.0]))
            center[2] += rng.uniform(-1, 1) * cfg.height_jitter
        # board origin sits at its first marker corner
        t = center - R @ np.array([w / 2, h / 2, 0.0])
        out[b] = RigidPose(matrix_to_quat(R), t)
    return out


def _trajectory_centers(kind, n, cfg: SynthConfig, rng, height):
    ax, ay = cfg.area[0] / 2 + 0.2, cfg.area[1] / 2 + 0.2
    s = np.linspace(0.0, 1.0, n)
    wob = _smooth_noise(rng, n, 3)
    if kind == "orbit":
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * s
        radius = 0.45 * min(ax, ay)
        C = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.full(n, height)], axis=1)
        C += wob * np.array([0.08, 0.08, 0.1 * height])
        T = np.stack([0.25 * radius * np.cos(ang + 0.5), 0.25 * radius * np.sin(ang + 0.5), np.zeros(n)], axis=1)
    elif kind == "scan":
        passes = max(2, int(round(2 * ay / max(height, 0.2))))
        u = s * passes
        k = np.minimum(np.floor(u), passes - 1)
        frac = u - k
        x = np.where(k % 2 == 0, -ax + 2 * ax * frac, ax - 2 * ax * frac) * 0.8
        y = (-ay + (k + 0.5) * 2 * ay / passes) * 0.8
        C = np.stack([x, y, np.full(n, height)], axis=1) + wob * np.array([0.03, 0.03, 0.05 * height])
        T = C * np.array([1.0, 1.0, 0.0]) + wob[:, [1, 2, 0]] * np.array([0.1, 0.1, 0.0]) * height
    else:  # random-walk
        steps = rng.normal(size=(n, 2))
        walk = np.cumsum(steps, axis=0)
        walk -= walk.mean(axis=0)
        walk /= max(np.abs(walk).max(), 1e-9)
        C = np.c_[walk * np.array([0.6 * ax, 0.6 * ay]), np.full(n, height)]
        k = max(3, n // 40)
        kernel = np.ones(k) / k
        C[:, 0] = np.convolve(np.pad(C[:, 0], k, mode="edge"), kernel, mode="same")[k:-k]
        C[:, 1] = np.convolve(np.pad(C[:, 1], k, mode="edge"), kernel, mode="same")[k:-k]
        C[:, 2] += wob[:, 2] * 0.1 * height
        T = C * np.array([0.7, 0.7, 0.0])
    return C, T


def _camera_poses(C, T, rng, roll_amp=0.15):
    """world_from_camera poses looking from ``C`` at ``T`` with a smooth roll."""
    roll = _smooth_noise(rng, len(C), 1)[:, 0] * roll_amp
    poses = []
    for c, t, r in zip(C, T, roll):
        R = look_at(c, t, up=(0.0, 1.0, 0.0)) @ so3_exp(np.array([0.0, 0.0, r]))
        poses.append(RigidPose(matrix_to_quat(R), c))
    return poses


def render_frames(cam_from_world_poses, timestamps, board_points, board_normals, board_centers,
                  scene: Scene, intr: CameraIntrinsics, cfg: SynthConfig, rng, frame_indices=None):
    """Detections of every marker whose four corners are visible."""
    frames = []
    board_ids = scene.board_ids
    marker_ids = np.array([scene[b].marker_ids for b in board_ids])       # (B, M)
    B, M = marker_ids.shape
    pts = board_points.reshape(-1, 3)
    for k, (pose, ts) in enumerate(zip(cam_from_world_poses, timestamps)):
        Xc = pose.apply(pts).reshape(B, M, 4, 3)
        center = -(pose.rotation.T @ pose.translation)
        view = center - board_centers                                     # (B, 3)
        cosang = np.sum(view * board_normals, axis=1) / np.linalg.norm(view, axis=1)
        facing = cosang > math.cos(math.radians(80.0))
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = project_points(Xc, intr)
        inside = ((z > 0.05) & (uv[..., 0] >= 0) & (uv[..., 0] <= intr.width - 1)
                  & (uv[..., 1] >= 0) & (uv[..., 1] <= intr.height - 1))
        visible = np.all(inside, axis=2) & facing[:, None]                # (B, M)
        if cfg.occlusion_probability > 0:
            visible &= rng.uniform(size=visible.shape) >= cfg.occlusion_probability
        bi, mi = np.nonzero(visible)
        if len(bi) == 0:
            continue
        obs_px = uv[bi, mi] + rng.normal(0.0, 1.0, size=(len(bi), 4, 2)) * cfg.pixel_noise
        if cfg.outlier_fraction > 0:
            mask = rng.uniform(size=(len(bi), 4)) < cfg.outlier_fraction
            if cfg.outlier_magnitude > 0:
                repl = obs_px + rng.uniform(-1, 1, size=obs_px.shape) * cfg.outlier_magnitude
            else:
                repl = rng.uniform(size=obs_px.shape) * np.array([intr.width - 1, intr.height - 1])
            obs_px = np.where(mask[..., None], repl, obs_px)
        fi = k if frame_indices is None else frame_indices[k]
        frames.append(FrameDetections.from_arrays(int(fi), float(ts), np.repeat(marker_ids[bi, mi], 4),
                                                  np.tile(np.arange(4), len(bi)), obs_px.reshape(-1, 2)))
    return frames


def _depth_samples(cam_from_world_poses, intr, cfg: SynthConfig, floor_z=0.0):
    """Depths of the floor plane seen through a pixel grid."""
    us = np.arange(cfg.depth_pixel_stride / 2, intr.width, cfg.depth_pixel_stride)
    vs = np.arange(cfg.depth_pixel_stride / 2, intr.height, cfg.depth_pixel_stride)
    uu, vv = np.meshgrid(us, vs)
    rays = np.stack([(uu.ravel() - intr.cu) / intr.fu, (vv.ravel() - intr.cv) / intr.fv,
                     np.ones(uu.size)], axis=1)
    out = []
    for pose in cam_from_world_poses[::cfg.depth_frame_stride]:
        Rwc = pose.rotation.T
        center = -(Rwc @ pose.translation)
        dirs = rays @ Rwc.T
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (floor_z - center[2]) / dirs[:, 2]
        ok = np.isfinite(lam) & (lam > 0) & (lam < 20.0)
        out.append(lam[ok])  # rays have unit z in the camera, so lam is the z-depth
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def generate(cfg: SynthConfig) -> SynthScene:
    ss = np.random.SeedSequence(cfg.seed)
    board_ss, closeup_ss, noise_ss = ss.spawn(3)
    traj_ss = (np.random.SeedSequence(cfg.trajectory_seed) if cfg.trajectory_seed is not None
               else np.random.SeedSequence([cfg.seed, 1]))
    traj_rng, traj_noise_ss = np.random.default_rng(traj_ss.spawn(1)[0]), traj_ss.spawn(2)[1]
    board_rng = np.random.default_rng(board_ss)
    closeup_rng = np.random.default_rng(closeup_ss)

    scene = _board_layouts(cfg)
    floor_from_board = _place_boards(cfg, scene, board_rng)
    world_from_floor = floor_from_board[0].inverse()
    board_poses = {b: world_from_floor @ p for b, p in floor_from_board.items()}

    intr0 = CameraIntrinsics.from_dict(cfg.intrinsics)
    intrinsics = [intr0]
    extrinsics = [RigidPose.identity()]
    if cfg.rig:
        for k, e in enumerate(cfg.rig.get("extrinsics", [])):
            extrinsics.append(pose_from_tum(e))
            cams = cfg.rig.get("intrinsics") or []
            intrinsics.append(CameraIntrinsics.from_dict(cams[k]) if k < len(cams) else intr0)

    local = scene[0].all_corners()
    board_points = np.stack([board_poses[b].apply(local) for b in scene.board_ids]).reshape(
        len(scene), -1, 4, 3)
    w, h = scene[0].extent
    board_centers = np.array([board_poses[b].apply([w / 2, h / 2, 0.0]) for b in scene.board_ids])
    board_normals = np.array([board_poses[b].rotation[:, 2] for b in scene.board_ids])

    def to_world(world_from_cam_floor):
        return [world_from_floor @ p for p in world_from_cam_floor]

    # close-up sweep over the boards
    n_close = cfg.closeup_frames
    Cc, Tc = _trajectory_centers("scan", n_close, cfg, closeup_rng, cfg.closeup_height)
    close_poses = to_world(_camera_poses(Cc, Tc, closeup_rng))
    close_stamps = np.arange(n_close) / cfg.frame_rate
    closeup_frames = render_frames([p.inverse() for p in close_poses], close_stamps, board_points,
                                   board_normals, board_centers, scene, intr0, cfg,
                                   np.random.default_rng(noise_ss.spawn(1)[0]))

    # trajectory sequence
    n = cfg.num_frames
    C, T = _trajectory_centers(cfg.trajectory, n, cfg, traj_rng, cfg.trajectory_height)
    rig_poses = to_world(_camera_poses(C, T, traj_rng))       # world_from_rig
    stamps = np.arange(n) / cfg.frame_rate
    noise_rng = np.random.default_rng(traj_noise_ss)
    traj_frames = []
    for c, (ext, intr) in enumerate(zip(extrinsics, intrinsics)):
        cam_from_world = [ext @ p.inverse() for p in rig_poses]
        traj_frames.append(render_frames(cam_from_world, stamps, board_points, board_normals,
                                         board_centers, scene, intr, cfg, noise_rng))
    if not any(traj_frames) and not closeup_frames:
        raise EmptyVisibility("no frame of the synthetic scene sees any board")
    for c, frames in enumerate(traj_frames):
        if not frames:
            raise EmptyVisibility(f"camera {c} never sees a board")

    depths = _depth_samples([p.inverse() for p in rig_poses], intr0, cfg)
    return SynthScene(cfg, scene, intrinsics, board_poses, closeup_frames,
                      Trajectory(list(close_stamps), close_poses), traj_frames,
                      Trajectory(list(stamps), rig_poses), extrinsics, depths)
