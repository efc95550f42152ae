"""Calibration-board pose graph.

Nodes hold ``world_from_board`` poses, the world frame being the reference
board.  An edge ``(i, j)`` holds the measured ``board_i_from_board_j`` pose;
for consistent nodes it equals ``inv(node_i) @ node_j``.  The optimizer
minimizes ``sum ||Log(inv(Z_ij) inv(T_i) T_j)||^2_Omega`` with the
reference node held fixed.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (DegenerateAxis, DegenerateConfiguration, DisconnectedGraph, Divergence,
                     EmptySamples, ParseError)
from .geometry import (RigidPose, matrix_to_quat, se3_adjoint, se3_exp, se3_log,
                       se3_right_jacobian_inv)
from .lm import DenseLinearization, LMOptions, SolverReport, lm_minimize
from .pnp import solve_pnp_arrays
from .scene_data import pose_from_tum, pose_to_tum, read_json, write_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PoseGraphEdge:
    board_i: int
    board_j: int
    relative_pose: RigidPose  # board_i_from_board_j
    information: np.ndarray
    support_count: int = 1

    def __post_init__(self):
        if not self.board_i < self.board_j:
            raise ValueError(f"edge ({self.board_i}, {self.board_j}) is not in canonical order")
        info = np.array(self.information, dtype=float).reshape(6, 6)
        if not np.allclose(info, info.T, rtol=0, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise ValueError("information matrix must be symmetric")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise ValueError("information matrix must be positive definite")
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass
class BoardPoseGraph:
    reference_board: int
    nodes: dict                      # board_id -> world_from_board
    edges: list = field(default_factory=list)
    solver_report: SolverReport | None = None

    def __post_init__(self):
        ref = self.nodes.get(self.reference_board)
        if ref is None:
            raise ValueError("reference board has no node")
        angle, dist = (np.linalg.norm(ref.log()[3:]), np.linalg.norm(ref.translation))
        if angle > 1e-9 or dist > 1e-9:
            raise ValueError("reference board pose must be the identity")


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def per_board_frame_poses(frame, scene, intr, min_points: int = 8) -> dict:
    """board_id -> camera_from_board for every board with a valid PnP in ``frame``."""
    out = {}
    for b, (pts, px, _) in frame.by_board(scene).items():
        if len(pts) < min_points:
            continue
        try:
            out[b] = solve_pnp_arrays(pts, px, intr).pose
        except (DegenerateConfiguration, Divergence):
            continue
    return out


def collect_pairwise(frames, scene, intr, min_points: int = 8, executor=None) -> dict:
    """(i, j) -> list of ``board_i_from_board_j`` samples, one per co-visible frame."""
    mapper = executor.map if executor is not None else map
    solved = mapper(lambda fr: per_board_frame_poses(fr, scene, intr, min_points), frames)
    samples: dict = {}
    for poses in solved:
        ids = sorted(poses)
        for a in range(len(ids)):
            inv_i = poses[ids[a]].inverse()
            for b in range(a + 1, len(ids)):
                samples.setdefault((ids[a], ids[b]), []).append(inv_i @ poses[ids[b]])
    return dict(sorted(samples.items()))


def median_edge_select(samples) -> RigidPose:
    """The sample whose inter-board distance is the median (lower middle when even)."""
    samples = list(samples)
    if not samples:
        raise EmptySamples("no relative-pose samples for this edge")
    dist = np.array([np.linalg.norm(s.translation) for s in samples])
    order = np.argsort(dist, kind="stable")
    return samples[order[(len(samples) - 1) // 2]]


def default_information(support_count: int, scale: float = 1.0) -> np.ndarray:
    return scale * support_count * np.eye(6)


def build_edges(pairwise: dict, selector=median_edge_select, information_scale: float = 1.0) -> list:
    return [PoseGraphEdge(i, j, selector(s), default_information(len(s), information_scale), len(s))
            for (i, j), s in sorted(pairwise.items())]


def chain_global(edges, reference_board, boards=None) -> dict:
    """Breadth-first chaining of edge measurements from the reference board.

    ``boards`` lists every node that must be reached; DisconnectedGraph names
    the ones that cannot be.
    """
    adj: dict = {reference_board: []}
    for e in edges:
        adj.setdefault(e.board_i, []).append((e.board_j, e.relative_pose))
        adj.setdefault(e.board_j, []).append((e.board_i, e.relative_pose.inverse()))
    for k in adj:
        adj[k].sort(key=lambda item: item[0])
    nodes = {reference_board: RigidPose.identity()}
    queue = deque([reference_board])
    while queue:
        cur = queue.popleft()
        for nxt, rel in adj[cur]:
            if nxt not in nodes:
                nodes[nxt] = nodes[cur] @ rel
                queue.append(nxt)
    wanted = set(adj) | set(boards or ())
    missing = wanted - set(nodes)
    if missing:
        raise DisconnectedGraph(missing)
    return dict(sorted(nodes.items()))


def build_pose_graph(frames, scene, intr, reference_board=None, selector=median_edge_select,
                     min_points: int = 8, information_scale: float = 1.0, executor=None) -> BoardPoseGraph:
    pairwise = collect_pairwise(frames, scene, intr, min_points, executor)
    edges = build_edges(pairwise, selector, information_scale)
    if reference_board is None:
        reference_board = min(scene.board_ids)
    nodes = chain_global(edges, reference_board, boards=[b for b in scene.board_ids
                                                          if any(b in k for k in pairwise)] or None)
    return BoardPoseGraph(reference_board, nodes, edges)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

def edge_residual(edge: PoseGraphEdge, T_i: RigidPose, T_j: RigidPose) -> np.ndarray:
    E = edge.relative_pose.inverse() @ T_i.inverse() @ T_j
    return E.log()


def graph_cost(graph: BoardPoseGraph) -> float:
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, graph.nodes[e.board_i], graph.nodes[e.board_j])
        total += float(r @ e.information @ r)
    return total


def edge_jacobians(Z_R, Z_t, Ri, ti, Rj, tj):
    """Residual and its Jacobians w.r.t. right perturbations of T_i and T_j."""
    # E = Z^-1 Ti^-1 Tj
    Rij = Ri.T @ Rj
    tij = Ri.T @ (tj - ti)
    RE = Z_R.T @ Rij
    tE = Z_R.T @ (tij - Z_t)
    e = se3_log(RE, tE)
    Jr_inv = se3_right_jacobian_inv(e)
    # Tj^-1 Ti
    Rji = Rj.T @ Ri
    tji = Rj.T @ (ti - tj)
    Ji = -Jr_inv @ se3_adjoint(Rji, tji)
    return e, Ji, Jr_inv


class _GraphProblem:
    def __init__(self, graph: BoardPoseGraph):
        self.graph = graph
        self.free = [b for b in graph.nodes if b != graph.reference_board]
        self.col = {b: k for k, b in enumerate(self.free)}
        self.edges = graph.edges
        self.Z = [(e.relative_pose.rotation.copy(), e.relative_pose.translation.copy()) for e in graph.edges]
        self.L = [np.linalg.cholesky(e.information) for e in graph.edges]  # Omega = L L^T

    def _residual_blocks(self, x, with_jac):
        Rs, ts = x
        out = []
        for e, (ZR, Zt), L in zip(self.edges, self.Z, self.L):
            Ri, ti = Rs[e.board_i], ts[e.board_i]
            Rj, tj = Rs[e.board_j], ts[e.board_j]
            if with_jac:
                r, Ji, Jj = edge_jacobians(ZR, Zt, Ri, ti, Rj, tj)
                out.append((e, L.T @ r, L.T @ Ji, L.T @ Jj))
            else:
                RE = ZR.T @ Ri.T @ Rj
                tE = ZR.T @ (Ri.T @ (tj - ti) - Zt)
                out.append((e, L.T @ se3_log(RE, tE), None, None))
        return out

    def residuals(self, x):
        blocks = self._residual_blocks(x, False)
        return np.concatenate([b[1] for b in blocks]) if blocks else np.zeros(0)

    def linearize(self, x):
        blocks = self._residual_blocks(x, True)
        n = 6 * len(self.free)
        J = np.zeros((6 * len(blocks), n))
        r = np.zeros(6 * len(blocks))
        for k, (e, rk, Ji, Jj) in enumerate(blocks):
            r[6 * k:6 * k + 6] = rk
            if e.board_i in self.col:
                c = 6 * self.col[e.board_i]
                J[6 * k:6 * k + 6, c:c + 6] = Ji
            if e.board_j in self.col:
                c = 6 * self.col[e.board_j]
                J[6 * k:6 * k + 6, c:c + 6] = Jj
        return DenseLinearization(J, r)

    def retract(self, x, delta):
        Rs, ts = dict(x[0]), dict(x[1])
        for b, k in self.col.items():
            dR, dt = se3_exp(delta[6 * k:6 * k + 6])
            Rs[b], ts[b] = Rs[b] @ dR, Rs[b] @ dt + ts[b]
        return Rs, ts


def optimize_graph(graph: BoardPoseGraph, options: LMOptions | None = None) -> BoardPoseGraph:
    """Levenberg-Marquardt over all non-reference nodes; the result carries ``solver_report``."""
    chain_global(graph.edges, graph.reference_board, boards=graph.nodes)  # connectivity check
    prob = _GraphProblem(graph)
    x0 = ({b: p.rotation.copy() for b, p in graph.nodes.items()},
          {b: p.translation.copy() for b, p in graph.nodes.items()})
    if not prob.free or not graph.edges:
        report = SolverReport(0.0, 0.0, 0, True, termination="nothing_to_optimize", cost_history=[0.0])
        return replace(graph, solver_report=report)
    (Rs, ts), report = lm_minimize(prob, x0, options)
    nodes = {b: (graph.nodes[b] if b == graph.reference_board else RigidPose.from_rt(Rs[b], ts[b]))
             for b in graph.nodes}
    log.info("pose graph: cost %.6g -> %.6g in %d iterations", report.initial_cost,
             report.final_cost, report.iterations)
    return BoardPoseGraph(graph.reference_board, nodes, list(graph.edges), report)


# --------------------------------------------------------------------------
# snapping
# --------------------------------------------------------------------------

def snap_to_plane(graph: BoardPoseGraph, tol: float = 1e-8) -> BoardPoseGraph:
    """Force every board into the reference board's plane and orientation normal.

    Each board's z-axis becomes the reference z-axis; its x-axis is the old
    x-axis projected onto the plane and renormalized, and y completes the
    right-handed frame.  Origins are projected onto the reference plane and
    edges are recomputed from the snapped nodes.
    """
    ref = graph.nodes[graph.reference_board]
    z = ref.rotation[:, 2]
    origin = ref.translation
    nodes = {}
    for b, pose in graph.nodes.items():
        if b == graph.reference_board:
            nodes[b] = pose
            continue
        x_old = pose.rotation[:, 0]
        x = x_old - (x_old @ z) * z
        nx = np.linalg.norm(x)
        if nx < tol:
            raise DegenerateAxis(f"board {b}: x-axis is parallel to the reference normal")
        x = x / nx
        y = np.cross(z, x)
        R = np.column_stack([x, y, z])
        t = pose.translation - ((pose.translation - origin) @ z) * z
        nodes[b] = RigidPose(matrix_to_quat(R), t)
    edges = [PoseGraphEdge(e.board_i, e.board_j, nodes[e.board_i].inverse() @ nodes[e.board_j],
                           e.information, e.support_count) for e in graph.edges]
    return BoardPoseGraph(graph.reference_board, nodes, edges, graph.solver_report)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def _info_upper(info):
    iu = np.triu_indices(6)
    return [float(v) for v in np.asarray(info)[iu]]


def _info_from_upper(vals):
    if len(vals) != 21:
        raise ParseError(f"information needs 21 upper-triangular entries, got {len(vals)}")
    M = np.zeros((6, 6))
    iu = np.triu_indices(6)
    M[iu] = [float(v) for v in vals]
    return M + np.triu(M, 1).T


def graph_to_dict(graph: BoardPoseGraph) -> dict:
    return {
        "reference_board": graph.reference_board,
        "nodes": [{"board_id": b, "pose": pose_to_tum(p)} for b, p in sorted(graph.nodes.items())],
        "edges": [{"board_i": e.board_i, "board_j": e.board_j,
                   "pose": pose_to_tum(e.relative_pose),
                   "information": _info_upper(e.information),
                   "support_count": e.support_count} for e in graph.edges],
    }


def graph_from_dict(d: dict) -> BoardPoseGraph:
    try:
        nodes = {int(n["board_id"]): pose_from_tum(n["pose"]) for n in d["nodes"]}
        edges = [PoseGraphEdge(int(e["board_i"]), int(e["board_j"]), pose_from_tum(e["pose"]),
                               _info_from_upper(e["information"]), int(e.get("support_count", 1)))
                 for e in d.get("edges", [])]
        return BoardPoseGraph(int(d["reference_board"]), dict(sorted(nodes.items())), edges)
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed pose graph: {exc}") from None


def save_pose_graph(path, graph: BoardPoseGraph) -> None:
    write_json(path, graph_to_dict(graph))


def load_pose_graph(path) -> BoardPoseGraph:
    try:
        return graph_from_dict(read_json(path))
    except ParseError as exc:
        raise ParseError(str(exc), path) from None
