"""Orchestration of the ground-truth stages and the ablation matrix.

The functions here take already-loaded data; :mod:`boardtruth.cli` does the
file handling.  Stage flags mirror the ablation columns: pose-graph
optimization, snapping, camera initialization method (0, 1, 2) and Bundle PnP.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .bundle import BundleProblem, bundle_pnp, bundle_rig_pnp, make_bundle_problem
from .errors import NoMatches
from .depth_model import FAMILIES, MAX_COMPONENTS
from .eval_metrics import DEFAULT_INTERVALS, DEFAULT_MAX_DT, DEFAULT_MAX_THRESHOLD, DEFAULT_STRIDE, align, associate, ate
from .geometry import pose_distance
from .lm import LMOptions
from .pose_graph import BoardPoseGraph, build_pose_graph, optimize_graph, snap_to_plane
from .scene_data import Trajectory
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

THREADS_ENV = "BOARDTRUTH_THREADS"


@dataclass
class StageFlags:
    optimize: bool = True
    snap: bool = True
    method: int = 2
    bundle: bool = True

    def __post_init__(self):
        if self.method not in (0, 1, 2):
            raise ValueError(f"camera initialization method must be 0, 1 or 2, got {self.method}")

    @property
    def label(self) -> str:
        parts = [f"M{self.method}"]
        if self.optimize:
            parts.append("opt")
        if self.snap:
            parts.append("snap")
        if self.bundle:
            parts.append("bundle")
        return "+".join(parts)


# rows of the ablation matrix; the chain rows each add one stage to the previous
# chain row, and M1 is reported alongside as the alternative initialization
ABLATION_ROWS = (
    StageFlags(optimize=False, snap=False, method=0, bundle=False),
    StageFlags(optimize=False, snap=False, method=1, bundle=False),
    StageFlags(optimize=False, snap=False, method=2, bundle=False),
    StageFlags(optimize=True, snap=False, method=2, bundle=False),
    StageFlags(optimize=True, snap=True, method=2, bundle=False),
    StageFlags(optimize=True, snap=True, method=2, bundle=True),
)
CHAIN_ROWS = tuple(r for r in ABLATION_ROWS if r.method != 1)


@contextmanager
def thread_context(threads: int = 1):
    """Executor for the per-module parallel maps and a matching BLAS thread cap.

    ``threads == 1`` yields ``None`` so every module runs its serial path.
    """
    threads = max(1, int(threads))
    # OpenBLAS can crash when asked for more threads than it sized its buffers for
    with threadpool_limits(limits=min(threads, len(os.sched_getaffinity(0)))):
        if threads == 1:
            yield None
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                yield ex


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def construct_graph(frames, scene, intr, flags: StageFlags, reference_board=None, min_points: int = 8,
                    options: LMOptions | None = None, executor=None, selector=None) -> BoardPoseGraph:
    kw = {} if selector is None else {"selector": selector}
    graph = build_pose_graph(frames, scene, intr, reference_board, min_points=min_points, executor=executor, **kw)
    return _staged_graph(graph, flags, options)


def solve_trajectory(frames, graph, scene, intr, flags: StageFlags, min_points: int = 4,
                     options: LMOptions | None = None, frame_count_total: int | None = None):
    """Camera trajectory for one camera: ``(Trajectory, BundleProblem, SolverReport or None)``."""
    problem = make_bundle_problem(frames, graph, scene, intr, strategy=flags.method, min_points=min_points)
    report = None
    if flags.bundle:
        problem, report = bundle_pnp(problem, options)
    if frame_count_total is None:
        frame_count_total = max((fr.frame_index for fr in frames), default=-1) + 1
    return problem.trajectory(frame_count_total), problem, report


def calibrate_rig(frames_per_camera, scene, intrinsics, graph, flags: StageFlags, min_points: int = 4,
                  options: LMOptions | None = None):
    return bundle_rig_pnp(frames_per_camera, scene, intrinsics, graph, options, strategy=flags.method,
                          min_points=min_points)


def refined_graph(problem: BundleProblem, graph: BoardPoseGraph) -> BoardPoseGraph:
    """The pose graph with the board poses refined by Bundle PnP."""
    return BoardPoseGraph(graph.reference_board, dict(problem.board_poses), list(graph.edges), graph.solver_report)


# --------------------------------------------------------------------------
# scoring against a synthetic oracle
# --------------------------------------------------------------------------

def trajectory_ate(gt: Trajectory, est: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> float:
    """Sim(3)-aligned ATE in metres; NaN when nothing matches."""
    try:
        return ate(align(gt, est, max_dt))
    except NoMatches:
        return float("nan")


def board_pose_error(nodes: dict, truth: dict) -> float:
    """RMS translation error of the board poses, both in the reference-board frame."""
    errs = [pose_distance(nodes[b], truth[b])[1] for b in sorted(nodes) if b in truth]
    return float(np.sqrt(np.mean(np.square(errs)))) if errs else float("nan")


def _staged_graph(base: BoardPoseGraph, flags: StageFlags, options=None) -> BoardPoseGraph:
    graph = optimize_graph(base, options) if flags.optimize else base
    return snap_to_plane(graph) if flags.snap else graph


def position_error(gt: Trajectory, est: Trajectory, max_dt: float = DEFAULT_MAX_DT) -> float:
    """Unaligned position RMSE; valid when both trajectories share the reference-board frame."""
    try:
        pairs = associate(gt, est, max_dt)
    except NoMatches:
        return float("nan")
    d = [gt.poses[i].translation - est.poses[j].translation for i, j in pairs]
    return float(np.sqrt(np.mean(np.sum(np.square(d), axis=1))))


def ablation_seed(cfg: SynthConfig, rows=ABLATION_ROWS, options: LMOptions | None = None) -> list:
    """Run every row of the ablation matrix on one synthetic scene."""
    syn = generate(cfg)
    intr = syn.intrinsics[0]
    base = build_pose_graph(syn.closeup_frames, syn.scene, intr)
    frame_count = max(fr.frame_index for fr in syn.frames) + 1
    # rows sharing a graph and initialization share the work that only depends on those
    graphs, initial, pnp_cache, out = {}, {}, {}, []
    for flags in rows:
        key = (flags.optimize, flags.snap)
        if key not in graphs:
            graphs[key] = _staged_graph(base, flags, options)
        if key + (flags.method,) not in initial:
            initial[key + (flags.method,)] = make_bundle_problem(syn.frames, graphs[key], syn.scene, intr,
                                                                 flags.method, pnp_cache=pnp_cache)
        problem, report = initial[key + (flags.method,)], None
        if flags.bundle:
            problem, report = bundle_pnp(problem, options)
        traj = problem.trajectory(frame_count)
        out.append({
            "seed": cfg.seed, "row": flags.label, **asdict(flags),
            "ate": trajectory_ate(syn.trajectory, traj),
            "position_error": position_error(syn.trajectory, traj),
            "board_error": board_pose_error(problem.board_poses, syn.board_poses),
            "frames": len(traj), "monotone": True if report is None else report.monotone,
        })
    return out


def run_ablation(base: SynthConfig, seeds, rows=ABLATION_ROWS, options: LMOptions | None = None,
                 executor=None) -> dict:
    """Ablation matrix over several seeds; returns per-run records and per-row medians."""
    cfgs = [SynthConfig.from_dict({**base.to_dict(), "seed": int(s)}) for s in seeds]
    mapper = executor.map if executor is not None else map
    records = [r for rs in mapper(lambda c: ablation_seed(c, rows, options), cfgs) for r in rs]
    summary = []
    for flags in rows:
        vals = [r for r in records if r["row"] == flags.label]
        summary.append({"row": flags.label, **asdict(flags),
                        "median_ate": float(np.median([r["ate"] for r in vals])),
                        "median_position_error": float(np.median([r["position_error"] for r in vals])),
                        "median_board_error": float(np.median([r["board_error"] for r in vals])),
                        "runs": len(vals)})
    meds = [s["median_ate"] for s, flags in zip(summary, rows) if flags in CHAIN_ROWS]
    return {"seeds": [int(s) for s in seeds], "records": records, "summary": summary,
            "monotone": bool(all(b < a for a, b in zip(meds, meds[1:])))}


@dataclass
class PipelineConfig:
    """Every input path, stage flag and metric knob the CLI understands."""

    scene: str | None = None
    intrinsics: list = field(default_factory=list)
    closeup_detections: str | None = None
    trajectory_detections: list = field(default_factory=list)
    pose_graph: str | None = None
    depth_samples: str | None = None
    gt: str | None = None
    est: str | None = None
    mixture: str | None = None
    output: str | None = None
    optimize: bool = True
    snap: bool = True
    method: int = 2
    bundle: bool = True
    reference_board: int | None = None
    graph_min_points: int = 8
    pnp_min_points: int = 4
    frame_count_total: int | None = None
    max_iterations: int = 200
    stride: int = DEFAULT_STRIDE
    max_dt: float = DEFAULT_MAX_DT
    intervals: int = DEFAULT_INTERVALS
    max_threshold: int = DEFAULT_MAX_THRESHOLD
    sim3: bool = True
    kabsch: bool = True
    max_components: int = MAX_COMPONENTS
    families: list = field(default_factory=lambda: list(FAMILIES))
    seeds: int = 20
    first_seed: int = 0
    figures: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def flags(self) -> StageFlags:
        return StageFlags(self.optimize, self.snap, self.method, self.bundle)

    @property
    def lm_options(self) -> LMOptions:
        return LMOptions(max_iterations=self.max_iterations)
