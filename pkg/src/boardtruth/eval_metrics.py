"""Trajectory evaluation.

Estimated poses are time-associated with ground truth, aligned in Sim(3)
(positions) and then in SO(3) (orientations), and scored by ATE, rotation
error, induced optical flow (IOF), Flow AUC, coverage and the composite of
the last two.

Poses are camera-to-world throughout.  Flow is computed with the pinhole
matrix only; lens distortion is not part of the metric.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .depth_model import DepthMixture, integration_bounds, pdf
from .errors import BehindCamera, DegenerateGeometry, NoMatches
from .geometry import (CameraIntrinsics, RigidPose, SimilarityTransform, matrix_to_quat, quat_conjugate,
                       quat_multiply, quat_to_matrix)
from .scene_data import Trajectory, write_json

log = logging.getLogger(__name__)

DEFAULT_MAX_DT = 0.02
DEFAULT_STRIDE = 16
DEFAULT_INTERVALS = 128
DEFAULT_MAX_THRESHOLD = 100
FLOW_CAP = 100.0          # px; flow assigned to points that land behind the estimated camera


# --------------------------------------------------------------------------
# association and alignment
# --------------------------------------------------------------------------

def associate(gt: Trajectory, est: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> list:
    """Greedy nearest-timestamp matching; returns sorted (gt index, est index) pairs."""
    tg = np.asarray(gt.timestamps, dtype=float)
    te = np.asarray(est.timestamps, dtype=float)
    if len(tg) == 0 or len(te) == 0:
        raise NoMatches("cannot associate an empty trajectory")
    cand = []
    for j, t in enumerate(te):
        lo = np.searchsorted(tg, t - max_dt, side="left")
        hi = np.searchsorted(tg, t + max_dt, side="right")
        for i in range(lo, hi):
            dt = abs(tg[i] - t)
            if dt <= max_dt:
                cand.append((dt, i, j))
    cand.sort()
    used_g, used_e, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_g and j not in used_e:
            used_g.add(i)
            used_e.add(j)
            pairs.append((i, j))
    if not pairs:
        raise NoMatches(f"no estimated pose within {max_dt} s of a ground-truth pose")
    return sorted(pairs)


def umeyama_sim3(est_positions, gt_positions) -> SimilarityTransform:
    """Closed-form ``(s, R, t)`` minimizing ``sum ||s R est + t - gt||^2``."""
    X = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    Y = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    if len(X) != len(Y):
        raise ValueError("position sets differ in length")
    if len(X) < 3:
        raise DegenerateGeometry(f"Sim(3) alignment needs at least 3 positions, got {len(X)}")
    if np.array_equal(X, Y):
        return SimilarityTransform(1.0, np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] <= 0 or sv[1] / sv[0] < 1e-9:
        raise DegenerateGeometry("estimated positions are collinear")
    n = len(X)
    C = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = np.sum(Xc * Xc) / n
    s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * R @ mx
    return SimilarityTransform(s, matrix_to_quat(R), t)


def kabsch_so3(est_rotations, gt_rotations) -> np.ndarray:
    """Unit quaternion of the global rotation ``A`` minimizing ``sum ||A R_est - R_gt||_F^2``."""
    Re = np.asarray(est_rotations, dtype=float).reshape(-1, 3, 3)
    Rg = np.asarray(gt_rotations, dtype=float).reshape(-1, 3, 3)
    if len(Re) == 0 or len(Re) != len(Rg):
        raise ValueError("need matching, non-empty rotation sets")
    if np.array_equal(Re, Rg):
        return np.array([1.0, 0.0, 0.0, 0.0])
    M = np.einsum("nij,nkj->ik", Rg, Re)        # sum R_gt R_est^T
    U, _, Vt = np.linalg.svd(M)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return matrix_to_quat(U @ S @ Vt)


@dataclass
class AlignedPair:
    gt: Trajectory                # matched ground-truth poses
    est: Trajectory               # matched estimated poses after alignment
    sim3: SimilarityTransform
    r_align: np.ndarray           # quaternion applied after the Sim(3) rotation
    matched_indices: list


def align(gt: Trajectory, est: Trajectory, max_dt: float = DEFAULT_MAX_DT, sim3: bool = True,
          kabsch: bool = True) -> AlignedPair:
    pairs = associate(gt, est, max_dt)
    gi = [i for i, _ in pairs]
    ei = [j for _, j in pairs]
    g_poses = [gt.poses[i] for i in gi]
    e_poses = [est.poses[j] for j in ei]
    pg = np.array([p.translation for p in g_poses])
    pe = np.array([p.translation for p in e_poses])
    S = umeyama_sim3(pe, pg) if sim3 else SimilarityTransform(1.0, np.array([1.0, 0, 0, 0]), np.zeros(3))
    q_sim = S.quat
    q_rot = quat_multiply(q_sim, np.array([p.quat for p in e_poses]))
    if kabsch and np.array_equal(q_rot, np.array([p.quat for p in g_poses])):
        r_align = np.array([1.0, 0.0, 0.0, 0.0])
    elif kabsch:
        r_align = kabsch_so3(quat_to_matrix(q_rot), np.array([p.rotation for p in g_poses]))
    else:
        r_align = np.array([1.0, 0.0, 0.0, 0.0])
    positions = S.apply(pe)
    aligned = [RigidPose(quat_multiply(r_align, q), x) for q, x in zip(q_rot, positions)]
    return AlignedPair(Trajectory([gt.timestamps[i] for i in gi], g_poses),
                       Trajectory([gt.timestamps[i] for i in gi], aligned), S, r_align, pairs)


# --------------------------------------------------------------------------
# pose errors
# --------------------------------------------------------------------------

def position_errors(pair: AlignedPair) -> np.ndarray:
    return np.linalg.norm(pair.est.positions() - pair.gt.positions(), axis=1)


def ate(pair: AlignedPair) -> float:
    """Root-mean-square position error over matched poses, in meters."""
    e = position_errors(pair)
    return float(np.sqrt(np.mean(e * e)))


def rotation_errors_deg(pair: AlignedPair) -> np.ndarray:
    """Geodesic angle between aligned and ground-truth orientations, degrees."""
    qg = np.array([p.quat for p in pair.gt.poses]).reshape(-1, 4)
    qe = np.array([p.quat for p in pair.est.poses]).reshape(-1, 4)
    qe = np.where(np.sum(qg * qe, axis=1, keepdims=True) < 0, -qe, qe)
    # chord form: exact for identical orientations, well conditioned for small angles
    ang = 4.0 * np.arctan2(np.linalg.norm(qe - qg, axis=1), np.linalg.norm(qe + qg, axis=1))
    return np.degrees(ang)


def rotation_error(pair: AlignedPair) -> float:
    return float(np.mean(rotation_errors_deg(pair)))


# --------------------------------------------------------------------------
# induced flow
# --------------------------------------------------------------------------

def _relative(gt_pose: RigidPose, est_pose: RigidPose):
    """est_camera_from_gt_camera as (R, t), formed through quaternions."""
    if np.array_equal(est_pose.quat, gt_pose.quat):
        R = np.eye(3)
    else:
        R = quat_to_matrix(quat_multiply(quat_conjugate(est_pose.quat), gt_pose.quat))
    t = est_pose.rotation.T @ (gt_pose.translation - est_pose.translation)
    return R, t


def pixel_rays(intr: CameraIntrinsics, pixels) -> np.ndarray:
    """Pinhole rays ``K^-1 (u, v, 1)`` (unit z) for pixels (n, 2)."""
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    return np.column_stack([(px[:, 0] - intr.cu) / intr.fu, (px[:, 1] - intr.cv) / intr.fv, np.ones(len(px))])


def _pinhole(P, intr):
    return np.stack([intr.fu * P[..., 0] / P[..., 2] + intr.cu, intr.fv * P[..., 1] / P[..., 2] + intr.cv],
                    axis=-1)


def _flow_grid(R, t, rays, depths, intr):
    """Flow vectors (n_pix, n_depth, 2) and a mask of points in front of the estimated camera."""
    a = rays @ R.T                                             # R m
    Xe = a[:, None, :] * depths[None, :, None] + t             # R (d m) + t
    Xg = rays[:, None, :] * depths[None, :, None]
    front = Xe[..., 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        flow = _pinhole(Xe, intr) - _pinhole(Xg, intr)
    return flow, front


def induced_flow(gt_pose: RigidPose, est_pose: RigidPose, intr: CameraIntrinsics, pixel, depth: float):
    """Flow of pixel ``(u, v)`` at depth ``d`` from the gt camera to the estimated camera."""
    R, t = _relative(gt_pose, est_pose)
    flow, front = _flow_grid(R, t, pixel_rays(intr, [pixel]), np.array([float(depth)]), intr)
    if not front[0, 0]:
        raise BehindCamera(f"pixel {tuple(pixel)} at depth {depth} lands behind the estimated camera")
    return flow[0, 0]


def pixel_grid(intr: CameraIntrinsics, stride: int = DEFAULT_STRIDE) -> np.ndarray:
    us = np.arange(0, intr.width, stride, dtype=float)
    vs = np.arange(0, intr.height, stride, dtype=float)
    uu, vv = np.meshgrid(us, vs)
    return np.column_stack([uu.ravel(), vv.ravel()])


def simpson_nodes(lo: float, hi: float, intervals: int = DEFAULT_INTERVALS):
    """Composite Simpson nodes and weights on [lo, hi] (intervals must be even)."""
    if intervals % 2:
        raise ValueError("Simpson's rule needs an even number of intervals")
    x = np.linspace(lo, hi, intervals + 1)
    h = (hi - lo) / intervals
    w = np.full(intervals + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return x, w * h / 3.0


@dataclass
class FlowStats:
    """IOF and the flow-magnitude distribution over (frame, pixel, depth mass)."""

    iof: float
    per_frame_iof: np.ndarray
    thresholds: np.ndarray
    fractions: np.ndarray         # F(tau): mass fraction with flow below tau
    flow_auc: float
    d_min: float
    d_max: float
    stride: int
    intervals: int


def flow_statistics(gt_poses, est_poses, intr: CameraIntrinsics, mixture: DepthMixture,
                    stride: int = DEFAULT_STRIDE, intervals: int = DEFAULT_INTERVALS,
                    max_threshold: int = DEFAULT_MAX_THRESHOLD, executor=None) -> FlowStats:
    """Integrate flow magnitude against p(d) over a pixel grid for every matched frame."""
    lo, hi = integration_bounds(mixture)
    depths, qw = simpson_nodes(lo, hi, intervals)
    mass = pdf(mixture, depths) * qw                       # quadrature mass per depth node
    rays = pixel_grid(intr, stride)
    rays = pixel_rays(intr, rays)
    nbins = max_threshold + 2

    def frame(pair):
        g, e = pair
        R, t = _relative(g, e)
        flow, front = _flow_grid(R, t, rays, depths, intr)
        mag = np.linalg.norm(flow, axis=-1)
        valid = front & np.isfinite(mag)
        iof_t = float(np.mean(np.where(valid, mag, FLOW_CAP) @ mass))
        # bin 0: zero flow; bin k: flow in [k-1, k); last bin: flow >= max_threshold or invalid
        bins = np.where(valid & (mag > 0), np.floor(np.where(valid, mag, 0.0)) + 1, 0)
        bins = np.where(valid, np.minimum(bins, nbins - 1), nbins - 1).astype(np.int64)
        weights = np.broadcast_to(mass, mag.shape)
        return iof_t, np.bincount(bins.ravel(), weights.ravel(), minlength=nbins)

    mapper = executor.map if executor is not None else map
    results = list(mapper(frame, list(zip(gt_poses, est_poses))))
    per_frame = np.array([r[0] for r in results])
    hist = np.zeros(nbins)
    for r in results:                      # fixed-order reduction
        hist += r[1]
    cum = np.cumsum(hist)
    thresholds = np.arange(0, max_threshold + 1, dtype=float)
    # F(tau) = mass with flow < tau, and at tau = 0 the mass with exactly zero flow
    fractions = cum[:max_threshold + 1] / cum[-1]
    auc = float(np.trapezoid(fractions, thresholds) / max_threshold * 100.0)
    return FlowStats(float(per_frame.mean()), per_frame, thresholds, fractions, auc, lo, hi, stride, intervals)


# --------------------------------------------------------------------------
# scores
# --------------------------------------------------------------------------

def coverage(est_count: int, total: int) -> float:
    if total <= 0:
        raise ValueError("ground truth has no frames")
    return 100.0 * min(est_count, total) / total


def composite(flow_auc: float, cov: float) -> float:
    """Harmonic mean of Flow AUC and coverage (0 when either is 0)."""
    if flow_auc <= 0 or cov <= 0:
        return 0.0
    return 2.0 / (1.0 / flow_auc + 1.0 / cov)


@dataclass
class EvalReport:
    ate: float                    # m
    rotation_error: float         # deg
    iof: float                    # px
    flow_auc: float               # %
    coverage: float               # %
    composite: float              # %
    matched: int
    frame_count_total: int
    settings: dict = field(default_factory=dict)
    per_frame: list = field(default_factory=list)
    auc_curve: list = field(default_factory=list)   # (threshold px, fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("ate", "rotation_error", "iof", "flow_auc", "coverage", "composite")}

    def table(self) -> str:
        head = ("ATE (m)", "Rotation (deg)", "IOF (px)", "Flow AUC", "Coverage (%)", "Composite")
        vals = (self.ate, self.rotation_error, self.iof, self.flow_auc, self.coverage, self.composite)
        cells = [f"{v:.4f}" if v is not None and math.isfinite(v) else "-" for v in vals]
        widths = [max(len(h), len(c)) for h, c in zip(head, cells)]
        line = " | ".join(h.rjust(w) for h, w in zip(head, widths))
        return line + "\n" + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + "\n"


def evaluate(gt: Trajectory, est: Trajectory, intr: CameraIntrinsics, mixture: DepthMixture,
             stride: int = DEFAULT_STRIDE, max_dt: float = DEFAULT_MAX_DT, intervals: int = DEFAULT_INTERVALS,
             max_threshold: int = DEFAULT_MAX_THRESHOLD, sim3: bool = True, kabsch: bool = True,
             executor=None) -> EvalReport:
    """Full evaluation of ``est`` against ``gt``.

    IOF and Flow AUC average over matched frames; unmatched frames only
    lower coverage.  An estimate with no matched pose scores zero.
    """
    settings = {"stride": stride, "max_dt": max_dt, "intervals": intervals, "max_threshold": max_threshold,
                "sim3": sim3, "kabsch": kabsch}
    total = gt.frame_count_total
    try:
        if len(est) == 0:
            raise NoMatches("estimate is empty")
        pair = align(gt, est, max_dt, sim3, kabsch)
    except NoMatches:
        return EvalReport(float("nan"), float("nan"), float("nan"), 0.0, 0.0, 0.0, 0, total, settings)
    stats = flow_statistics(pair.gt.poses, pair.est.poses, intr, mixture, stride, intervals, max_threshold,
                            executor)
    cov = coverage(len(pair.matched_indices), total)
    pos_err = position_errors(pair)
    rot_err = rotation_errors_deg(pair)
    settings.update({"d_min": stats.d_min, "d_max": stats.d_max, "sim3_scale": pair.sim3.scale})
    per_frame = [{"timestamp": float(t), "position_error": float(pe), "rotation_error": float(re),
                  "iof": float(fi)}
                 for t, pe, re, fi in zip(pair.gt.timestamps, pos_err, rot_err, stats.per_frame_iof)]
    return EvalReport(float(np.sqrt(np.mean(pos_err ** 2))), float(np.mean(rot_err)), stats.iof,
                      stats.flow_auc, cov, composite(stats.flow_auc, cov), len(pair.matched_indices), total,
                      settings, per_frame, [[float(a), float(b)] for a, b in zip(stats.thresholds, stats.fractions)])


def save_report(path, report: EvalReport) -> None:
    write_json(path, report.to_dict())
