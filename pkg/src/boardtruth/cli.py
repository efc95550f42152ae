"""Command-line frontend: ``boardtruth <subcommand> [options]``.

Options come from three layers, later ones winning: built-in defaults, a JSON
file given with ``--config`` (keys are the long option names with ``_`` for
``-``), and explicit flags.  Logs go to standard error; data goes to files and
standard output.  Failures print one JSON object on standard error and exit
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

from .depth_model import load_mixture, save_mixture, select_model
from .errors import BoardTruthError, ParseError
from .eval_metrics import evaluate, save_report
from .pipeline import (THREADS_ENV, PipelineConfig, calibrate_rig, construct_graph, refined_graph,
                       run_ablation, solve_trajectory, thread_context)
from .pose_graph import load_pose_graph, save_pose_graph
from .scene_data import (load_depth_samples, load_detections, load_intrinsics, load_scene, load_trajectory,
                         read_json, save_trajectory, write_json)
from .synth import SynthConfig, generate

log = logging.getLogger("boardtruth")

EXIT_INPUT = 2      # bad input data or configuration
EXIT_IO = 3         # missing or unreadable file
EXIT_INTERNAL = 1

_DEFAULTS = {f.name: (f.default_factory() if callable(f.default_factory) else f.default)
             for f in fields(PipelineConfig)}


class CLIError(BoardTruthError, ValueError):
    pass


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CLIError(f"{THREADS_ENV}={raw!r} is not an integer") from None


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _help(text, key):
    return f"{text} (default: {_DEFAULTS[key]})"


def _opt(p, key, help, **kw):
    """Option whose default lives in PipelineConfig so the config file can supply it."""
    flag = "--" + key.replace("_", "-")
    p.add_argument(flag, dest=key, default=argparse.SUPPRESS, help=_help(help, key), **kw)


def _flag(p, key, help):
    flag = "--" + key.replace("_", "-")
    p.add_argument(flag, dest=key, default=argparse.SUPPRESS, action=argparse.BooleanOptionalAction,
                   help=_help(help, key))


def _common(p):
    p.add_argument("--config", help="JSON file of option values; explicit flags override it (default: none)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads; 1 is the bit-deterministic reference path "
                        f"(default: ${THREADS_ENV} or 1)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="log level on standard error (default: WARNING)")


def _stage_flags(p, bundle=True):
    _flag(p, "optimize", "pose-graph optimization")
    _flag(p, "snap", "snap every board to the reference board plane")
    _opt(p, "reference_board", "board defining the world frame; smallest id when unset", type=int)
    _opt(p, "graph_min_points", "minimum corners per board for a pairwise edge sample", type=int)
    _opt(p, "max_iterations", "Levenberg-Marquardt iteration cap", type=int)


def _camera_flags(p):
    _opt(p, "method", "camera initialization: 0 closest board, 1 weighted fusion, 2 multi-board PnP",
         type=int, choices=[0, 1, 2])
    _flag(p, "bundle", "joint Bundle PnP refinement")
    _opt(p, "pnp_min_points", "minimum corners for a per-frame PnP", type=int)


def _metric_flags(p):
    _opt(p, "stride", "pixel grid stride for the induced flow (px)", type=int)
    _opt(p, "max_dt", "timestamp association tolerance (s)", type=float)
    _opt(p, "intervals", "Simpson intervals over the depth range (even)", type=int)
    _opt(p, "max_threshold", "largest Flow AUC threshold (px)", type=int)
    _flag(p, "sim3", "Sim(3) position alignment before scoring")
    _flag(p, "kabsch", "global SO(3) orientation alignment before scoring")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boardtruth", description=__doc__.splitlines()[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    _common(p)
    p.add_argument("synth_config", nargs="?", help="synthetic scene JSON (default: built-in defaults)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (default: the config's seed)")
    _opt(p, "output", "output directory", required=False)

    p = sub.add_parser("build-posegraph", help="board pose graph from close-up detections")
    _common(p)
    _opt(p, "scene", "scene JSON listing the board layouts")
    _opt(p, "intrinsics", "camera intrinsics JSON", nargs="+")
    _opt(p, "closeup_detections", "close-up detection file")
    _opt(p, "output", "pose graph JSON to write")
    _stage_flags(p)
    _flag(p, "figures", "also write a PNG of the graph next to the output")

    p = sub.add_parser("solve-trajectory", help="ground-truth camera trajectory")
    _common(p)
    _opt(p, "scene", "scene JSON listing the board layouts")
    _opt(p, "intrinsics", "camera intrinsics JSON", nargs="+")
    _opt(p, "pose_graph", "pose graph JSON from build-posegraph")
    _opt(p, "trajectory_detections", "trajectory detection file", nargs="+")
    _opt(p, "output", "trajectory file to write (TUM format)")
    _camera_flags(p)
    _opt(p, "frame_count_total", "video length in frames; last detected index + 1 when unset", type=int)
    _opt(p, "max_iterations", "Levenberg-Marquardt iteration cap", type=int)

    p = sub.add_parser("calibrate-rig", help="camera-from-rig extrinsics with Bundle Rig PnP")
    _common(p)
    _opt(p, "scene", "scene JSON listing the board layouts")
    _opt(p, "intrinsics", "intrinsics JSON per camera, camera 0 first", nargs="+")
    _opt(p, "pose_graph", "pose graph JSON from build-posegraph")
    _opt(p, "trajectory_detections", "detection file per camera, camera 0 first", nargs="+")
    _opt(p, "output", "rig calibration JSON to write")
    _opt(p, "method", "camera initialization: 0 closest board, 1 weighted fusion, 2 multi-board PnP",
         type=int, choices=[0, 1, 2])
    _opt(p, "pnp_min_points", "minimum corners for a per-frame PnP", type=int)
    _opt(p, "max_iterations", "Levenberg-Marquardt iteration cap", type=int)

    p = sub.add_parser("fit-depth", help="parametric depth mixture selected by BIC")
    _common(p)
    _opt(p, "depth_samples", "depth sample file, one value per line (m)")
    _opt(p, "output", "mixture JSON to write")
    _opt(p, "max_components", "largest component count tried", type=int)
    _opt(p, "families", "mixture families tried", nargs="+", choices=["gaussian", "gamma"])
    _flag(p, "figures", "also write a PNG of the fit next to the output")

    p = sub.add_parser("evaluate", help="score an estimated trajectory")
    _common(p)
    _opt(p, "gt", "ground-truth trajectory (TUM format)")
    _opt(p, "est", "estimated trajectory (TUM format)")
    _opt(p, "mixture", "depth mixture JSON from fit-depth")
    _opt(p, "intrinsics", "camera intrinsics JSON", nargs="+")
    _opt(p, "output", "report JSON to write; the AUC curve goes to the same stem with .auc.csv")
    _metric_flags(p)
    _flag(p, "figures", "also write PNGs of the AUC curve and trajectories")

    p = sub.add_parser("ablation", help="ablation matrix over synthetic seeds")
    _common(p)
    p.add_argument("synth_config", nargs="?", help="synthetic scene JSON (default: built-in defaults)")
    _opt(p, "seeds", "number of seeds", type=int)
    _opt(p, "first_seed", "first seed", type=int)
    _opt(p, "output", "report JSON to write; per-run rows go to the same stem with .csv")
    _opt(p, "max_iterations", "Levenberg-Marquardt iteration cap", type=int)
    _flag(p, "figures", "also write a PNG of the median ATE per row")
    return ap


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    values = {}
    if getattr(args, "config", None):
        loaded = read_json(args.config)
        if not isinstance(loaded, dict):
            raise ParseError("config must be a JSON object", args.config)
        values.update(loaded)
    keys = set(_DEFAULTS)
    values.update({k: v for k, v in vars(args).items() if k in keys})
    for k in ("intrinsics", "trajectory_detections"):
        if isinstance(values.get(k), str):
            values[k] = [values[k]]
    try:
        return PipelineConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CLIError(str(exc)) from None


def _need(cfg: PipelineConfig, *keys):
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise CLIError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _emit(obj):
    sys.stdout.write(json.dumps(_finite(obj), indent=2) + "\n")


def _sibling(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg, executor):
    _need(cfg, "output")
    sc = SynthConfig.load(args.synth_config) if args.synth_config else SynthConfig()
    if args.seed is not None:
        sc = SynthConfig.from_dict({**sc.to_dict(), "seed": args.seed})
    syn = generate(sc)
    files = syn.write(cfg.output)
    _emit({"output": str(cfg.output), "files": files, "boards": len(syn.scene.board_ids),
           "closeup_frames": len(syn.closeup_frames), "trajectory_frames": len(syn.frames),
           "cameras": len(syn.intrinsics)})


def cmd_build_posegraph(args, cfg, executor):
    _need(cfg, "scene", "intrinsics", "closeup_detections", "output")
    scene = load_scene(cfg.scene)
    intr = load_intrinsics(cfg.intrinsics[0])
    frames = load_detections(cfg.closeup_detections)
    graph = construct_graph(frames, scene, intr, cfg.flags, cfg.reference_board, cfg.graph_min_points,
                            cfg.lm_options, executor)
    save_pose_graph(cfg.output, graph)
    if cfg.figures:
        from .plotting import plot_board_graph
        plot_board_graph(graph, _sibling(cfg.output, ".png"))
    rep = graph.solver_report
    _emit({"output": str(cfg.output), "reference_board": graph.reference_board, "nodes": len(graph.nodes),
           "edges": len(graph.edges), "optimized": cfg.optimize, "snapped": cfg.snap,
           "solver_report": rep.to_dict() if rep is not None else None})


def cmd_solve_trajectory(args, cfg, executor):
    _need(cfg, "scene", "intrinsics", "pose_graph", "trajectory_detections", "output")
    scene = load_scene(cfg.scene)
    intr = load_intrinsics(cfg.intrinsics[0])
    graph = load_pose_graph(cfg.pose_graph)
    frames = load_detections(cfg.trajectory_detections[0])
    traj, problem, report = solve_trajectory(frames, graph, scene, intr, cfg.flags, cfg.pnp_min_points,
                                             cfg.lm_options, cfg.frame_count_total)
    save_trajectory(cfg.output, traj)
    summary = {"output": str(cfg.output), "frames_solved": len(traj), "frames_total": traj.frame_count_total,
               "observations": len(problem.observations), "method": cfg.method, "bundle": cfg.bundle,
               "solver_report": report.to_dict() if report is not None else None}
    if report is not None:
        save_pose_graph(_sibling(cfg.output, ".boards.json"), refined_graph(problem, graph))
    write_json(_sibling(cfg.output, ".report.json"), _finite(summary))
    _emit(summary)


def cmd_calibrate_rig(args, cfg, executor):
    _need(cfg, "scene", "intrinsics", "pose_graph", "trajectory_detections", "output")
    if len(cfg.intrinsics) != len(cfg.trajectory_detections):
        raise CLIError(f"{len(cfg.intrinsics)} intrinsics files for {len(cfg.trajectory_detections)} cameras")
    scene = load_scene(cfg.scene)
    intrinsics = [load_intrinsics(p) for p in cfg.intrinsics]
    graph = load_pose_graph(cfg.pose_graph)
    frames = [load_detections(p) for p in cfg.trajectory_detections]
    calib, report = calibrate_rig(frames, scene, intrinsics, graph, cfg.flags, cfg.pnp_min_points, cfg.lm_options)
    calib.save(cfg.output)
    for c in sorted(calib.camera_extrinsics):
        save_trajectory(_sibling(cfg.output, f".cam{c}.txt"), calib.trajectory(c))
    summary = {"output": str(cfg.output), "cameras": len(intrinsics), "frames": len(calib.rig_poses),
               "solver_report": report.to_dict()}
    write_json(_sibling(cfg.output, ".report.json"), _finite(summary))
    _emit(summary)


def cmd_fit_depth(args, cfg, executor):
    _need(cfg, "depth_samples", "output")
    samples = load_depth_samples(cfg.depth_samples)
    best, table = select_model(samples, tuple(cfg.families), cfg.max_components, executor)
    save_mixture(cfg.output, best, _finite(table))
    if cfg.figures:
        from .plotting import plot_depth_fit
        plot_depth_fit(samples, best, _sibling(cfg.output, ".png"))
    _emit({"output": str(cfg.output), "family": best.family, "components": best.k, "bic": best.bic,
           "bic_table": table})


def cmd_evaluate(args, cfg, executor):
    _need(cfg, "gt", "est", "mixture", "intrinsics", "output")
    gt, est = load_trajectory(cfg.gt), load_trajectory(cfg.est)
    mixture = load_mixture(cfg.mixture)
    intr = load_intrinsics(cfg.intrinsics[0])
    report = evaluate(gt, est, intr, mixture, cfg.stride, cfg.max_dt, cfg.intervals, cfg.max_threshold,
                      cfg.sim3, cfg.kabsch, executor)
    save_report(cfg.output, report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold_px", "fraction"])
    w.writerows([[repr(float(a)), repr(float(b))] for a, b in report.auc_curve])
    Path(_sibling(cfg.output, ".auc.csv")).write_text(buf.getvalue(), encoding="utf-8")
    if cfg.figures and report.auc_curve:
        from .plotting import plot_auc_curve, plot_trajectories
        plot_auc_curve(report.auc_curve, _sibling(cfg.output, ".auc.png"))
        plot_trajectories(gt, est, _sibling(cfg.output, ".traj.png"))
    sys.stdout.write(report.table())


def cmd_ablation(args, cfg, executor):
    _need(cfg, "output")
    sc = SynthConfig.load(args.synth_config) if args.synth_config else SynthConfig()
    seeds = range(cfg.first_seed, cfg.first_seed + cfg.seeds)
    res = run_ablation(sc, seeds, options=cfg.lm_options, executor=executor)
    write_json(cfg.output, _finite({"synth_config": sc.to_dict(), **res}))
    rows = res["records"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
    Path(_sibling(cfg.output, ".csv")).write_text(buf.getvalue(), encoding="utf-8")
    if cfg.figures:
        from .plotting import plot_ablation
        plot_ablation(res["summary"], _sibling(cfg.output, ".png"))
    _emit({"output": str(cfg.output), "summary": res["summary"], "monotone": res["monotone"]})


COMMANDS = {
    "synth": cmd_synth,
    "build-posegraph": cmd_build_posegraph,
    "solve-trajectory": cmd_solve_trajectory,
    "calibrate-rig": cmd_calibrate_rig,
    "fit-depth": cmd_fit_depth,
    "evaluate": cmd_evaluate,
    "ablation": cmd_ablation,
}


def _error_json(exc, command):
    d = {"error": getattr(exc, "code", type(exc).__name__), "message": str(exc), "command": command}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path is not None:
        d["path"] = str(path)
    line = getattr(exc, "line", None)
    if line is not None:
        d["line"] = line
    return json.dumps(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        threads = args.threads if args.threads is not None else default_threads()
        with thread_context(threads) as executor:
            COMMANDS[args.command](args, cfg, executor)
    except (BoardTruthError, ValueError, KeyError) as exc:
        sys.stderr.write(_error_json(exc, args.command) + "\n")
        return EXIT_INPUT
    except OSError as exc:
        sys.stderr.write(_error_json(exc, args.command) + "\n")
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort machine-readable report
        log.debug("unhandled error", exc_info=True)
        sys.stderr.write(_error_json(exc, args.command) + "\n")
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
