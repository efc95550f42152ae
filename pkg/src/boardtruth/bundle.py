"""Joint refinement of board poses and camera poses by reprojection error.

One engine serves both solvers.  Every observation is a board corner ``X``
seen by camera ``c`` at time ``t``::

    x_world = B_b X,   x_rig = P_t x_world,   x_cam = E_c x_rig

with ``B_b`` the ``world_from_board`` pose, ``P_t`` the ``rig_from_world``
pose and ``E_c`` the ``camera_from_rig`` extrinsic.  Bundle PnP is the
single-camera case with ``E_0`` pinned to the identity, so ``P_t`` is the
``camera_from_world`` pose.  Per-time poses are the local blocks of the
normal equations; free boards and extrinsics are the global blocks.  When
there are many frames the local blocks are eliminated by a Schur complement.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NoKnownBoards, UnconstrainedExtrinsic
from .geometry import (CameraIntrinsics, RigidPose, average_quaternions, cross_rows,
                       project_points, se3_exp_batch)
from .lm import LMOptions, SolverReport, lm_minimize
from .pnp import STRATEGIES
from .scene_data import Trajectory, pose_from_tum, pose_to_tum, read_json, write_json

__all__ = ["BundleObservations", "BundleProblem", "RigCalibration", "SolverReport", "LMOptions",
           "lm_minimize", "make_bundle_problem", "bundle_pnp", "bundle_rig_pnp", "reprojection_residuals"]

log = logging.getLogger(__name__)

SCHUR_FRAME_THRESHOLD = 200
MIN_OBSERVATIONS_PER_FRAME = 6


@dataclass
class BundleObservations:
    """Flat observation table; row k is one corner seen in one frame by one camera."""

    frame: np.ndarray        # frame index
    board: np.ndarray
    marker: np.ndarray
    corner: np.ndarray
    pixel: np.ndarray        # (n, 2)
    points: np.ndarray       # (n, 3) board-frame corner positions
    camera: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.frame)
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(n)
        self.board = np.asarray(self.board, dtype=np.int64).reshape(n)
        self.marker = np.asarray(self.marker, dtype=np.int64).reshape(n)
        self.corner = np.asarray(self.corner, dtype=np.int64).reshape(n)
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(n, 2)
        self.points = np.asarray(self.points, dtype=float).reshape(n, 3)
        self.camera = (np.zeros(n, dtype=np.int64) if self.camera is None
                       else np.asarray(self.camera, dtype=np.int64).reshape(n))

    def __len__(self):
        return len(self.frame)

    def __iter__(self):
        for k in range(len(self)):
            yield (int(self.frame[k]), int(self.board[k]), int(self.marker[k]), int(self.corner[k]),
                   (float(self.pixel[k, 0]), float(self.pixel[k, 1])))

    def subset(self, mask) -> BundleObservations:
        return BundleObservations(self.frame[mask], self.board[mask], self.marker[mask],
                                  self.corner[mask], self.pixel[mask], self.points[mask], self.camera[mask])

    @classmethod
    def from_frames(cls, frames, scene, boards, camera: int = 0) -> BundleObservations:
        cols = ([], [], [], [], [], [])
        allowed = np.array(sorted(boards), dtype=np.int64)
        for fr in frames:
            board, pts = fr.board_columns(scene)
            keep = np.isin(board, allowed)
            cols[0].append(np.full(int(keep.sum()), fr.frame_index, dtype=np.int64))
            cols[1].append(board[keep])
            cols[2].append(fr.marker_ids[keep])
            cols[3].append(fr.corner_indices[keep])
            cols[4].append(fr.pixels[keep])
            cols[5].append(pts[keep])
        if not frames:
            return cls(*(np.zeros((0,) + sh) for sh in ((), (), (), (), (2,), (3,))), np.zeros(0, np.int64))
        out = [np.concatenate(c) for c in cols]
        return cls(*out, np.full(len(out[0]), camera, dtype=np.int64))

    @staticmethod
    def concatenate(parts) -> BundleObservations:
        parts = list(parts)
        return BundleObservations(*(np.concatenate([getattr(p, f) for p in parts])
                                    for f in ("frame", "board", "marker", "corner", "pixel", "points", "camera")))


@dataclass
class BundleProblem:
    board_poses: dict            # board_id -> world_from_board
    camera_poses: dict           # frame_index -> camera_from_world
    observations: BundleObservations
    intrinsics: CameraIntrinsics
    reference_board: int
    timestamps: dict = field(default_factory=dict)   # frame_index -> seconds

    def __post_init__(self):
        obs = self.observations
        if self.reference_board not in self.board_poses:
            raise ValueError("reference board has no pose")
        if not set(np.unique(obs.board).tolist()) <= set(self.board_poses):
            raise ValueError("observation references a board without a pose")
        if not set(np.unique(obs.frame).tolist()) <= set(self.camera_poses):
            raise ValueError("observation references a frame without a camera pose")

    def trajectory(self, frame_count_total: int | None = None) -> Trajectory:
        frames = sorted(self.camera_poses)
        stamps = [self.timestamps.get(f, float(f)) for f in frames]
        return Trajectory(stamps, [self.camera_poses[f].inverse() for f in frames], frame_count_total)


@dataclass
class RigCalibration:
    rig_poses: dict              # frame_index -> world_from_rig
    camera_extrinsics: dict      # camera -> camera_from_rig
    intrinsics: dict             # camera -> CameraIntrinsics
    board_poses: dict = field(default_factory=dict)
    reference_board: int = 0
    timestamps: dict = field(default_factory=dict)

    def trajectory(self, camera: int = 0, frame_count_total: int | None = None) -> Trajectory:
        """Camera-to-world trajectory of one rig camera."""
        rig_from_cam = self.camera_extrinsics[camera].inverse()
        frames = sorted(self.rig_poses)
        return Trajectory([self.timestamps.get(f, float(f)) for f in frames],
                          [self.rig_poses[f] @ rig_from_cam for f in frames], frame_count_total)

    def to_dict(self) -> dict:
        return {
            "cameras": [{"camera": c, "camera_from_rig": pose_to_tum(self.camera_extrinsics[c]),
                         "intrinsics": self.intrinsics[c].to_dict()} for c in sorted(self.camera_extrinsics)],
            "reference_board": self.reference_board,
            "boards": [{"board_id": b, "pose": pose_to_tum(p)} for b, p in sorted(self.board_poses.items())],
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> RigCalibration:
        d = read_json(path)
        ext = {int(c["camera"]): pose_from_tum(c["camera_from_rig"]) for c in d["cameras"]}
        intr = {int(c["camera"]): CameraIntrinsics.from_dict(c["intrinsics"]) for c in d["cameras"]}
        boards = {int(b["board_id"]): pose_from_tum(b["pose"]) for b in d.get("boards", [])}
        return cls({}, ext, intr, boards, int(d.get("reference_board", 0)))


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------

def _poses_to_arrays(poses):
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.array([p.rotation for p in poses]), np.array([p.translation for p in poses])


def _block_diag_floor(diag):
    return max(1e-12 * float(diag.max(initial=0.0)), 1e-300)


class _Linearization:
    """Block normal equations ``H = J^T J``, ``g = J^T r``.

    Local blocks (one per frame) form the block-diagonal ``Hll``; ``Hlg``
    couples them to the global blocks.
    """

    def __init__(self, Hll, Hlg, Hgg, gl, gg, use_schur):
        self.Hll, self.Hlg, self.Hgg = Hll, Hlg, Hgg
        self.gl, self.gg = gl, gg
        self.use_schur = use_schur
        self.gradient = np.concatenate([gl.ravel(), gg.ravel()])
        T, G = Hll.shape[0], Hgg.shape[0]
        dl = np.diagonal(Hll, axis1=1, axis2=2).ravel()
        dg = np.diagonal(Hgg.transpose(0, 2, 1, 3).reshape(6 * G, 6 * G)) if G else np.zeros(0)
        d = np.concatenate([dl, dg])
        d = np.maximum(d, _block_diag_floor(d))
        self.dl, self.dg = d[:6 * T].reshape(T, 6), d[6 * T:]

    def dense_matrix(self):
        T, G = self.Hll.shape[0], self.Hgg.shape[0]
        n = 6 * (T + G)
        H = np.zeros((n, n))
        for t in range(T):
            H[6 * t:6 * t + 6, 6 * t:6 * t + 6] = self.Hll[t]
        if G:
            Hlg = self.Hlg.transpose(0, 2, 1, 3).reshape(6 * T, 6 * G)
            H[:6 * T, 6 * T:] = Hlg
            H[6 * T:, :6 * T] = Hlg.T
            H[6 * T:, 6 * T:] = self.Hgg.transpose(0, 2, 1, 3).reshape(6 * G, 6 * G)
        return H

    def solve_dense(self, lam):
        H = self.dense_matrix()
        A = H + lam * np.diag(np.concatenate([self.dl.ravel(), self.dg]))
        c = cho_factor(A, lower=True, check_finite=False)
        return -cho_solve(c, self.gradient, check_finite=False)

    def solve_schur(self, lam):
        T, G = self.Hll.shape[0], self.Hgg.shape[0]
        All = self.Hll + lam * self.dl[:, :, None] * np.eye(6)
        Lll = np.linalg.cholesky(All)              # raises LinAlgError if not positive definite
        if G == 0:
            y = np.linalg.solve(Lll, -self.gl[:, :, None])
            return np.linalg.solve(np.swapaxes(Lll, 1, 2), y)[:, :, 0].ravel()
        Hlg = self.Hlg.transpose(0, 2, 1, 3).reshape(T, 6, 6 * G)
        rhs = np.concatenate([Hlg, self.gl[:, :, None]], axis=2)
        Y = np.linalg.solve(np.swapaxes(Lll, 1, 2), np.linalg.solve(Lll, rhs))   # All^-1 [Hlg | gl]
        Hgg = self.Hgg.transpose(0, 2, 1, 3).reshape(6 * G, 6 * G)
        S = Hgg + lam * np.diag(self.dg) - np.einsum("tia,tib->ab", Hlg, Y[:, :, :-1])
        b = -self.gg.ravel() + np.einsum("tia,ti->a", Hlg, Y[:, :, -1])
        c = cho_factor(S, lower=True, check_finite=False)
        dg = cho_solve(c, b, check_finite=False)
        dl = -Y[:, :, -1] - Y[:, :, :-1] @ dg
        return np.concatenate([dl.ravel(), dg])

    def solve(self, lam):
        return self.solve_schur(lam) if self.use_schur else self.solve_dense(lam)


class _Groups:
    """Observations grouped by an integer key, for block sums of ``J_a^T J_b``.

    Sums run over contiguous rows of the key-sorted Jacobians, one BLAS
    product per group, in a fixed order.
    """

    def __init__(self, keys, mask, n_keys=None):
        idx = np.nonzero(mask)[0]
        order = idx[np.argsort(keys[idx], kind="stable")]
        k = keys[order]
        self.order = order
        self.empty = len(order) == 0
        starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]]) if len(k) else np.zeros(0, np.int64)
        self.keys = k[starts]
        self.bounds = np.r_[starts, len(k)]
        if n_keys is not None and len(self.keys) != n_keys:
            raise ValueError("every frame needs at least one observation")

    def gram(self, A, B):
        As = A[self.order].reshape(-1, A.shape[-1])
        Bs = B[self.order].reshape(-1, B.shape[-1])
        out = np.empty((len(self.keys), A.shape[-1], B.shape[-1]))
        bd = 2 * self.bounds
        for g in range(len(self.keys)):
            out[g] = As[bd[g]:bd[g + 1]].T @ Bs[bd[g]:bd[g + 1]]
        return out

    def vec(self, A, r):
        v = np.einsum("nki,nk->ni", A[self.order], r[self.order])
        return np.add.reduceat(v, self.bounds[:-1], axis=0) if len(v) else np.zeros((0, A.shape[-1]))


def _pose_block(A, p):
    """``A @ [I | -skew(p)]`` for stacked (n, 2, 3) ``A``: the right-perturbation pose Jacobian."""
    J = np.empty(A.shape[:-1] + (6,))
    J[..., :3] = A
    J[..., 3:] = cross_rows(p, A)
    return J


class BundleEngine:
    """Residuals, block Jacobians and retraction for the joint problem.

    ``x`` is a tuple ``(PR, Pt, BR, Bt, ER, Et)`` of stacked rotations and
    translations for frames, boards and cameras.
    """

    def __init__(self, obs: BundleObservations, frame_ids, board_ids, intrinsics, free_boards,
                 free_cameras, schur: bool | None = None):
        self.obs = obs
        self.frame_ids = list(frame_ids)
        self.board_ids = list(board_ids)
        self.intrinsics = list(intrinsics)
        fpos = {f: k for k, f in enumerate(self.frame_ids)}
        bpos = {b: k for k, b in enumerate(self.board_ids)}
        self.f = np.array([fpos[f] for f in obs.frame], dtype=np.int64)
        self.b = np.array([bpos[b] for b in obs.board], dtype=np.int64)
        self.c = obs.camera
        self.X = obs.points
        self.pixels = obs.pixel
        G = 0
        self.gb = np.full(len(self.board_ids), -1, dtype=np.int64)
        for k, b in enumerate(self.board_ids):
            if b in free_boards:
                self.gb[k] = G
                G += 1
        self.gc = np.full(len(self.intrinsics), -1, dtype=np.int64)
        for c in range(len(self.intrinsics)):
            if c in free_cameras:
                self.gc[c] = G
                G += 1
        self.n_global = G
        self.n_board_free = int(np.sum(self.gb >= 0))
        self.n_cam_free = int(np.sum(self.gc >= 0))
        self.use_schur = (len(self.frame_ids) > SCHUR_FRAME_THRESHOLD) if schur is None else bool(schur)
        gb, gc = self.gb[self.b], self.gc[self.c]
        mb, mc = gb >= 0, gc >= 0
        T = len(self.frame_ids)
        self._g_frame = _Groups(self.f, np.ones(len(self.f), bool), T)
        self._g_board = _Groups(gb, mb)
        self._g_cam = _Groups(gc, mc)
        self._g_frame_board = _Groups(self.f * G + gb, mb)
        self._g_frame_cam = _Groups(self.f * G + gc, mc)
        self._g_board_cam = _Groups(gb * G + gc, mb & mc)
        self._cam_masks = [np.nonzero(self.c == c)[0] for c in range(len(self.intrinsics))]

    # chain -----------------------------------------------------------------
    def _chain(self, x):
        PR, Pt, BR, Bt, ER, Et = x
        f, b, c = self.f, self.b, self.c
        Xw = np.einsum("nij,nj->ni", BR[b], self.X) + Bt[b]
        Xr = np.einsum("nij,nj->ni", PR[f], Xw) + Pt[f]
        Xc = np.einsum("nij,nj->ni", ER[c], Xr) + Et[c]
        return Xw, Xr, Xc

    def _project(self, Xc, with_jacobian):
        uv = np.empty((len(Xc), 2))
        J = np.empty((len(Xc), 2, 3)) if with_jacobian else None
        for c, idx in enumerate(self._cam_masks):
            if len(idx) == 0:
                continue
            if with_jacobian:
                uv[idx], J[idx] = project_points(Xc[idx], self.intrinsics[c], with_jacobian=True)
            else:
                uv[idx] = project_points(Xc[idx], self.intrinsics[c])
        return uv, J

    def residuals(self, x):
        _, _, Xc = self._chain(x)
        uv, _ = self._project(Xc, False)
        return (uv - self.pixels).ravel()

    def jacobians(self, x):
        """Residuals (n,2) and Jacobians (n,2,6) w.r.t. frame, board and camera blocks."""
        PR, Pt, BR, Bt, ER, Et = x
        f, b, c = self.f, self.b, self.c
        Xw, Xr, Xc = self._chain(x)
        uv, Jpi = self._project(Xc, True)
        A = np.einsum("nij,njk->nik", Jpi, ER[c])
        JE = _pose_block(A, Xr) if self.n_cam_free else None
        A = np.einsum("nij,njk->nik", A, PR[f])
        JP = _pose_block(A, Xw)
        JB = _pose_block(np.einsum("nij,njk->nik", A, BR[b]), self.X) if self.n_board_free else None
        return uv - self.pixels, JP, JB, JE

    def linearize(self, x):
        r, JP, JB, JE = self.jacobians(x)
        T, G = len(self.frame_ids), self.n_global
        Hll = self._g_frame.gram(JP, JP)
        gl = self._g_frame.vec(JP, r)
        Hlg = np.zeros((T, G, 6, 6))
        Hgg = np.zeros((G, G, 6, 6))
        gg = np.zeros((G, 6))
        for J, grp, pair in ((JB, self._g_board, self._g_frame_board), (JE, self._g_cam, self._g_frame_cam)):
            if J is None or grp.empty:
                continue
            u = grp.keys
            Hgg[u, u] += grp.gram(J, J)
            gg[u] += grp.vec(J, r)
            fk, gk = divmod(pair.keys, G)
            Hlg[fk, gk] += pair.gram(JP, J)
        if not self._g_board_cam.empty:
            bk, ck = divmod(self._g_board_cam.keys, G)
            cross = self._g_board_cam.gram(JB, JE)
            Hgg[bk, ck] += cross
            Hgg[ck, bk] += np.swapaxes(cross, 1, 2)
        return _Linearization(Hll, Hlg, Hgg, gl, gg, self.use_schur)

    def retract(self, x, delta):
        PR, Pt, BR, Bt, ER, Et = x
        T = len(self.frame_ids)
        dl = delta[:6 * T].reshape(T, 6)
        dg = delta[6 * T:].reshape(self.n_global, 6)
        dR, dt = se3_exp_batch(dl)
        PR2, Pt2 = PR @ dR, np.einsum("nij,nj->ni", PR, dt) + Pt
        BR2, Bt2 = BR.copy(), Bt.copy()
        ER2, Et2 = ER.copy(), Et.copy()
        if self.n_global:
            gR, gt = se3_exp_batch(dg)
            kb = np.nonzero(self.gb >= 0)[0]
            if len(kb):
                g = self.gb[kb]
                BR2[kb] = BR[kb] @ gR[g]
                Bt2[kb] = np.einsum("nij,nj->ni", BR[kb], gt[g]) + Bt[kb]
            kc = np.nonzero(self.gc >= 0)[0]
            if len(kc):
                g = self.gc[kc]
                ER2[kc] = ER[kc] @ gR[g]
                Et2[kc] = np.einsum("nij,nj->ni", ER[kc], gt[g]) + Et[kc]
        return PR2, Pt2, BR2, Bt2, ER2, Et2

    def solve(self, x0, options: LMOptions | None = None):
        x, report = lm_minimize(self, x0, options)
        report.rms_reproj = float(np.sqrt(report.final_cost / max(len(self.obs), 1)))
        return x, report


def reprojection_residuals(board_poses, camera_poses, obs: BundleObservations, intrinsics,
                           extrinsics=None) -> np.ndarray:
    """Per-observation pixel residuals (n, 2), evaluated one observation at a time.

    ``camera_poses`` maps frame -> camera_from_world (or rig_from_world when
    ``extrinsics`` is given).  Used as an independent check of the engine.
    """
    intr = intrinsics if isinstance(intrinsics, (list, tuple, dict)) else [intrinsics]
    out = np.empty((len(obs), 2))
    for k, (fr, b, _, _, px) in enumerate(obs):
        c = int(obs.camera[k])
        pose = camera_poses[fr] @ board_poses[b]
        if extrinsics is not None:
            pose = extrinsics[c] @ pose
        Xc = pose.apply(obs.points[k])
        out[k] = project_points(Xc[None], intr[c])[0] - np.asarray(px)
    return out


# --------------------------------------------------------------------------
# Bundle PnP
# --------------------------------------------------------------------------

def _drop_sparse_frames(obs: BundleObservations) -> BundleObservations:
    frames, counts = np.unique(obs.frame, return_counts=True)
    keep = frames[counts >= MIN_OBSERVATIONS_PER_FRAME]
    return obs.subset(np.isin(obs.frame, keep))


def make_bundle_problem(frames, graph, scene, intr, strategy: int = 2, min_points: int = 4,
                        pnp_cache=None) -> BundleProblem:
    """Initial problem: board poses from ``graph``, camera poses from a PnP strategy.

    ``pnp_cache`` is handed to the strategy (see :func:`boardtruth.pnp.per_board_pnp`).
    """
    nodes = graph.nodes
    solver = STRATEGIES[strategy]
    cams, stamps = {}, {}
    for fr in frames:
        try:
            cams[fr.frame_index] = solver(fr, nodes, scene, intr, min_points, pnp_cache).pose
            stamps[fr.frame_index] = fr.timestamp
        except NoKnownBoards:
            continue
    used = [fr for fr in frames if fr.frame_index in cams]
    obs = _drop_sparse_frames(BundleObservations.from_frames(used, scene, set(nodes)))
    kept = set(np.unique(obs.frame).tolist())
    cams = {f: p for f, p in cams.items() if f in kept}
    stamps = {f: s for f, s in stamps.items() if f in kept}
    return BundleProblem(dict(nodes), cams, obs, intr, graph.reference_board, stamps)


def bundle_pnp(problem: BundleProblem, options: LMOptions | None = None, schur: bool | None = None):
    """Jointly refine every non-reference board pose and every camera pose."""
    obs = problem.observations
    frame_ids = sorted(problem.camera_poses)
    board_ids = sorted(problem.board_poses)
    free = {b for b in board_ids if b != problem.reference_board} & set(np.unique(obs.board).tolist())
    eng = BundleEngine(obs, frame_ids, board_ids, [problem.intrinsics], free, set(), schur)
    PR, Pt = _poses_to_arrays([problem.camera_poses[f] for f in frame_ids])
    BR, Bt = _poses_to_arrays([problem.board_poses[b] for b in board_ids])
    x0 = (PR, Pt, BR, Bt, np.eye(3)[None], np.zeros((1, 3)))
    (PR, Pt, BR, Bt, _, _), report = eng.solve(x0, options)
    cams = {f: RigidPose.from_rt(PR[k], Pt[k]) for k, f in enumerate(frame_ids)}
    boards = {b: (RigidPose.from_rt(BR[k], Bt[k]) if b in free else problem.board_poses[b])
              for k, b in enumerate(board_ids)}
    log.info("bundle pnp: %d frames, %d observations, rms %.4g px, %s", len(frame_ids), len(obs),
             report.rms_reproj, report.termination)
    return replace(problem, board_poses=boards, camera_poses=cams), report


# --------------------------------------------------------------------------
# Bundle Rig PnP
# --------------------------------------------------------------------------

def _mean_pose(poses) -> RigidPose:
    q = average_quaternions([p.quat for p in poses])
    return RigidPose(q, np.mean([p.translation for p in poses], axis=0))


def initial_extrinsics(per_camera_poses, n_cameras) -> dict:
    """camera_from_rig from frames where camera 0 and camera c both have a pose."""
    base = per_camera_poses[0]
    out = {0: RigidPose.identity()}
    for c in range(1, n_cameras):
        pairs = [per_camera_poses[c][f] @ base[f].inverse() for f in sorted(per_camera_poses[c]) if f in base]
        out[c] = _mean_pose(pairs) if pairs else RigidPose.identity()
    return out


def bundle_rig_pnp(frames_per_camera, scene, intrinsics, graph, options: LMOptions | None = None,
                   strategy: int = 2, init_extrinsics: dict | None = None, min_points: int = 4,
                   schur: bool | None = None):
    """Calibrate ``camera_from_rig`` extrinsics together with rig and board poses.

    Frames are matched across cameras by frame index.  Camera 0 defines the
    rig frame.  Returns ``(RigCalibration, SolverReport)``.
    """
    n_cam = len(frames_per_camera)
    if n_cam < 2:
        raise ValueError("a rig needs at least two cameras")
    nodes = graph.nodes
    solver = STRATEGIES[strategy]
    per_cam, stamps = [], {}
    for c, frames in enumerate(frames_per_camera):
        poses = {}
        for fr in frames:
            try:
                poses[fr.frame_index] = solver(fr, nodes, scene, intrinsics[c], min_points).pose
                stamps.setdefault(fr.frame_index, fr.timestamp)
            except NoKnownBoards:
                continue
        if not poses:
            raise UnconstrainedExtrinsic(f"camera {c} never sees a board of the pose graph")
        per_cam.append(poses)
    ext = dict(init_extrinsics) if init_extrinsics else initial_extrinsics(per_cam, n_cam)
    ext[0] = RigidPose.identity()

    rig = {}
    for c in range(n_cam):
        inv_e = ext[c].inverse()
        for f, p in sorted(per_cam[c].items()):
            rig.setdefault(f, inv_e @ p)                  # rig_from_world
    obs = BundleObservations.concatenate(
        BundleObservations.from_frames([fr for fr in frames if fr.frame_index in per_cam[c]],
                                       scene, set(nodes), camera=c)
        for c, frames in enumerate(frames_per_camera))
    obs = _drop_sparse_frames(obs)
    for c in range(n_cam):
        if not np.any(obs.camera == c):
            raise UnconstrainedExtrinsic(f"camera {c} has no usable observations")
    frame_ids = sorted(set(np.unique(obs.frame).tolist()))
    board_ids = sorted(nodes)
    free = {b for b in board_ids if b != graph.reference_board} & set(np.unique(obs.board).tolist())
    eng = BundleEngine(obs, frame_ids, board_ids, intrinsics, free, set(range(1, n_cam)), schur)
    PR, Pt = _poses_to_arrays([rig[f] for f in frame_ids])
    BR, Bt = _poses_to_arrays([nodes[b] for b in board_ids])
    ER, Et = _poses_to_arrays([ext[c] for c in range(n_cam)])
    (PR, Pt, BR, Bt, ER, Et), report = eng.solve((PR, Pt, BR, Bt, ER, Et), options)
    calib = RigCalibration(
        rig_poses={f: RigidPose.from_rt(PR[k], Pt[k]).inverse() for k, f in enumerate(frame_ids)},
        camera_extrinsics={c: (RigidPose.identity() if c == 0 else RigidPose.from_rt(ER[c], Et[c]))
                           for c in range(n_cam)},
        intrinsics={c: intrinsics[c] for c in range(n_cam)},
        board_poses={b: (RigidPose.from_rt(BR[k], Bt[k]) if b in free else nodes[b])
                     for k, b in enumerate(board_ids)},
        reference_board=graph.reference_board,
        timestamps={f: stamps[f] for f in frame_ids})
    log.info("bundle rig pnp: %d cameras, %d frames, rms %.4g px, %s", n_cam, len(frame_ids),
             report.rms_reproj, report.termination)
    return calib, report
