"""Perspective-n-Point for one board and for all boards visible in a frame.

``solve_pnp`` initializes with a DLT on undistorted normalized coordinates
(homography decomposition when the points are coplanar) and refines the
pose by Levenberg-Marquardt on the full distorted camera model.  Poses
returned here are ``camera_from_world``.

Three ways of turning a multi-board frame into a camera pose are offered:
``camera_pose_closest_board`` (method 0), ``camera_pose_weighted_fusion``
(method 1) and ``camera_pose_multiboard`` (method 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, Divergence, NoKnownBoards
from .geometry import (CameraIntrinsics, RigidPose, average_quaternions, cross_rows, pixels_to_normalized,
                       project_points, se3_exp)
from .lm import DenseLinearization, LMOptions, lm_minimize

PLANAR_RATIO = 1e-6
NEAR_PLANAR_RATIO = 0.05
COLLINEAR_RATIO = 1e-6
MIN_REPROJ_WEIGHT_ERROR = 0.01  # px


@dataclass(frozen=True)
class Correspondence:
    world_point: tuple
    pixel: tuple


@dataclass(frozen=True)
class PnPResult:
    pose: RigidPose          # camera_from_world
    rms_reproj_error: float  # px
    num_points: int


def reprojection_rms(pose: RigidPose, points, pixels, intr: CameraIntrinsics) -> float:
    uv = project_points(pose.apply(points), intr)
    return float(np.sqrt(np.mean(np.sum((uv - pixels) ** 2, axis=1))))


# --------------------------------------------------------------------------
# linear initialization
# --------------------------------------------------------------------------

def _normalize_2d(m):
    c = m.mean(axis=0)
    s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(m - c, axis=1)), 1e-12)
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T


def _homography(src, dst):
    """DLT homography with ``dst ~ H src`` on 2-D point sets."""
    Ts, Td = _normalize_2d(src), _normalize_2d(dst)
    s = np.c_[src, np.ones(len(src))] @ Ts.T
    d = np.c_[dst, np.ones(len(dst))] @ Td.T
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = s
    A[0::2, 6:9] = -d[:, [0]] * s
    A[1::2, 3:6] = s
    A[1::2, 6:9] = -d[:, [1]] * s
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    Hn = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ Hn @ Ts


def _plane_frame(points):
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c, full_matrices=False)
    E = Vt.copy()
    if np.linalg.det(E) < 0:
        E[2] = -E[2]
    return c, E


def _init_planar(points, m):
    """Homography decomposition on the best-fit plane of ``points``."""
    c, E = _plane_frame(points)
    ab = (points - c) @ E[:2].T
    H = _homography(ab, m)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    scale = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * scale < 0:  # plane centroid must lie in front of the camera
        scale = -scale
    r1, r2, t = h1 * scale, h2 * scale, h3 * scale
    U, _, Vt = np.linalg.svd(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R_cp = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    R = R_cp @ E
    return R, t - R @ c


def _init_general(points, m):
    """Six-point DLT for non-coplanar points."""
    c = points.mean(axis=0)
    sigma = max(np.sqrt(np.mean(np.sum((points - c) ** 2, axis=1))), 1e-12)
    X = (points - c) / sigma
    n = len(points)
    Xh = np.c_[X, np.ones(n)]
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -m[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -m[:, [1]] * Xh
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    P = Vt[-1].reshape(3, 4)
    M, p = P[:, :3], P[:, 3]
    if np.linalg.det(M) < 0:
        M, p = -M, -p
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    k = S.mean() / sigma
    t = p / (k * sigma) - R @ c
    return R, t


def _distinct_rows(points):
    key = np.round(points, 12)
    order = np.lexsort(key.T)
    k = key[order]
    return 1 + int(np.count_nonzero(np.any(k[1:] != k[:-1], axis=1)))


def _initial_pose(points, pixels, intr):
    n = len(points)
    if n < 4 or _distinct_rows(points) < 4:
        raise DegenerateConfiguration(f"PnP needs at least 4 distinct points, got {n}")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[1] / sv[0] < COLLINEAR_RATIO:
        raise DegenerateConfiguration("PnP points are collinear")
    m = pixels_to_normalized(pixels, intr)
    ratio = sv[2] / sv[0]
    candidates = []
    if ratio < NEAR_PLANAR_RATIO or n < 6:
        candidates.append(_init_planar(points, m))
    if ratio >= PLANAR_RATIO and n >= 6:
        candidates.append(_init_general(points, m))
    best, best_err = None, np.inf
    for R, t in candidates:
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            continue
        Xc = points @ R.T + t
        if np.any(Xc[:, 2] <= 0):
            continue
        err = np.sum((Xc[:, :2] / Xc[:, 2:3] - m) ** 2)
        if err < best_err:
            best, best_err = (R, t), err
    if best is None:
        raise DegenerateConfiguration("no valid linear PnP initialization")
    return best


# --------------------------------------------------------------------------
# nonlinear refinement
# --------------------------------------------------------------------------

class _PnPProblem:
    def __init__(self, points, pixels, intr):
        self.points = points
        self.pixels = pixels
        self.intr = intr

    def residuals(self, x):
        R, t = x
        return (project_points(self.points @ R.T + t, self.intr) - self.pixels).ravel()

    def linearize(self, x):
        R, t = x
        uv, Jp = project_points(self.points @ R.T + t, self.intr, with_jacobian=True)
        A = Jp @ R
        # right perturbation: [A | -A skew(p)], and -a^T skew(p) = (p x a)^T
        J = np.concatenate([A, cross_rows(self.points, A)], axis=2).reshape(-1, 6)
        r = (uv - self.pixels).ravel()
        return DenseLinearization(J, r)

    def retract(self, x, delta):
        R, t = x
        dR, dt = se3_exp(delta)
        return R @ dR, R @ dt + t


def refine_pose(R, t, points, pixels, intr, options: LMOptions | None = None):
    prob = _PnPProblem(points, pixels, intr)
    (R, t), report = lm_minimize(prob, (R, t), options)
    return R, t, report


def solve_pnp_arrays(points, pixels, intr: CameraIntrinsics, options: LMOptions | None = None) -> PnPResult:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(points) != len(pixels):
        raise ValueError("points and pixels differ in length")
    R, t = _initial_pose(points, pixels, intr)
    R, t, report = refine_pose(R, t, points, pixels, intr, options)
    depth = points @ R[2] + t[2]
    if not np.isfinite(report.final_cost) or np.any(depth <= 0):
        raise Divergence("PnP refinement moved points behind the camera")
    pose = RigidPose.from_rt(R, t)
    return PnPResult(pose, reprojection_rms(pose, points, pixels, intr), len(points))


def solve_pnp(corrs, intr: CameraIntrinsics, options: LMOptions | None = None) -> PnPResult:
    """Camera pose from 2D-3D correspondences (>= 4, not collinear)."""
    corrs = list(corrs)
    if len(corrs) < 4:
        raise DegenerateConfiguration(f"PnP needs at least 4 correspondences, got {len(corrs)}")
    pts = np.array([c.world_point for c in corrs], dtype=float)
    px = np.array([c.pixel for c in corrs], dtype=float)
    return solve_pnp_arrays(pts, px, intr, options)


# --------------------------------------------------------------------------
# multi-board strategies
# --------------------------------------------------------------------------

def _known_boards(frame, nodes, scene, min_points):
    groups = {b: g for b, g in frame.by_board(scene).items() if b in nodes and len(g[0]) >= min_points}
    if not groups:
        raise NoKnownBoards(f"frame {frame.frame_index} sees no board of the pose graph")
    return groups


def _world_points(groups, nodes):
    pts = np.concatenate([nodes[b].apply(g[0]) for b, g in groups.items()])
    px = np.concatenate([g[1] for g in groups.values()])
    return pts, px


def _result(pose, groups, nodes, intr):
    pts, px = _world_points(groups, nodes)
    return PnPResult(pose, reprojection_rms(pose, pts, px, intr), len(pts))


def _nodes(graph):
    return graph.nodes if hasattr(graph, "nodes") else graph


def camera_pose_multiboard(frame, graph, scene, intr, min_points: int = 4, cache=None) -> PnPResult:
    """Joint PnP over every visible board expressed in one local reference board.

    The best-observed visible board serves as local reference; its global
    pose then chains the result into the world frame.  ``cache`` is accepted
    for a uniform strategy signature and unused.
    """
    nodes = _nodes(graph)
    groups = _known_boards(frame, nodes, scene, min_points)
    ref = max(groups, key=lambda b: (len(groups[b][0]), -b))
    ref_from_world = nodes[ref].inverse()
    pts = np.concatenate([(ref_from_world @ nodes[b]).apply(g[0]) for b, g in groups.items()])
    px = np.concatenate([g[1] for g in groups.values()])
    cam_from_ref = solve_pnp_arrays(pts, px, intr).pose
    return _result(cam_from_ref @ ref_from_world, groups, nodes, intr)


def per_board_pnp(frame, graph, scene, intr, min_points: int = 4, cache=None) -> dict:
    """board_id -> (PnPResult in the board frame, markers detected on it).

    The board-frame solutions do not depend on the graph poses, so runs over
    the same detections may share a ``cache`` dict keyed by (frame, board).
    """
    nodes = _nodes(graph)
    groups = _known_boards(frame, nodes, scene, min_points)
    out = {}
    for b, (pts, px, mids) in groups.items():
        key = (frame.frame_index, b)
        if cache is not None and key in cache:
            sol = cache[key]
        else:
            try:
                sol = (solve_pnp_arrays(pts, px, intr), len(set(mids)))
            except (DegenerateConfiguration, Divergence):
                sol = None
            if cache is not None:
                cache[key] = sol
        if sol is not None:
            out[b] = sol
    if not out:
        raise NoKnownBoards(f"frame {frame.frame_index}: no board yields a PnP solution")
    return out


def camera_pose_closest_board(frame, graph, scene, intr, min_points: int = 4, cache=None) -> PnPResult:
    """Pose from the single board nearest to the camera."""
    nodes = _nodes(graph)
    sols = per_board_pnp(frame, nodes, scene, intr, min_points, cache)
    b = min(sols, key=lambda k: (float(np.linalg.norm(sols[k][0].pose.translation)), k))
    pose = sols[b][0].pose @ nodes[b].inverse()
    groups = {b: frame.by_board(scene)[b]}
    return _result(pose, groups, nodes, intr)


def fusion_weights(rms_errors, markers_detected, markers_total) -> np.ndarray:
    """Normalized confidence weights: 1/reprojection error times detected fraction."""
    err = np.maximum(np.asarray(rms_errors, dtype=float), MIN_REPROJ_WEIGHT_ERROR)
    w = (1.0 / err) * (np.asarray(markers_detected, dtype=float) / np.asarray(markers_total, dtype=float))
    return w / w.sum()


def fuse_camera_poses(cam_from_world_poses, weights) -> RigidPose:
    """Weighted average of camera poses (positions averaged in the world frame)."""
    world_from_cam = [p.inverse() for p in cam_from_world_poses]
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    pos = np.sum(w[:, None] * np.array([p.translation for p in world_from_cam]), axis=0)
    q = average_quaternions([p.quat for p in world_from_cam], w)
    return RigidPose(q, pos).inverse()


def camera_pose_weighted_fusion(frame, graph, scene, intr, min_points: int = 4, cache=None) -> PnPResult:
    """Confidence-weighted fusion of per-board camera poses."""
    nodes = _nodes(graph)
    sols = per_board_pnp(frame, nodes, scene, intr, min_points, cache)
    boards = sorted(sols)
    poses = [sols[b][0].pose @ nodes[b].inverse() for b in boards]
    w = fusion_weights([sols[b][0].rms_reproj_error for b in boards],
                       [sols[b][1] for b in boards],
                       [len(scene[b].marker_ids) for b in boards])
    groups = {b: g for b, g in frame.by_board(scene).items() if b in sols}
    return _result(fuse_camera_poses(poses, w), groups, nodes, intr)


STRATEGIES = {
    0: camera_pose_closest_board,
    1: camera_pose_weighted_fusion,
    2: camera_pose_multiboard,
}
