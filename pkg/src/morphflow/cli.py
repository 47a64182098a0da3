"""Command line surface: synth, compress, fit, export, eval.

State flows through files only: synth writes fixtures, fit writes a
checkpoint plus a training log, export writes interpolation frames and eval
writes a metrics report. Every command is deterministic given the seeds in
its config.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import losses as ls
from . import meshio as mio
from . import metrics as mx
from . import networks as nets
from . import odesolve as odes
from . import skeleton as sk
from . import synth
from . import varifold as vf
from .config import ConfigError, RunConfig
from .flowfield import VelocityField
from .losses import FlowModel, Problem, Schedule, train
from .meshio import NormalizeTransform, TriMesh
from .odesolve import FrameState, TimeGrid
from .skeleton import PoseParams, Skeleton
from .varifold import CompressionConfig, KernelConfig


class CliError(Exception):
    pass


# ----------------------------------------------------------------------
# synth
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = synth.make_problem(args.shape, resolution=args.resolution,
                                 angle_deg=args.angle, translation=args.translation)
    mio.save_mesh(problem.source, out / "source.obj")
    mio.save_mesh(problem.target, out / "target.obj")
    if problem.skeleton is not None:
        sk.save_skeleton(out / "skeleton.skel", problem.skeleton)
    np.savetxt(out / "gt_map.txt", problem.gt_map, fmt="%d")
    with open(out / "meta.json", "w") as f:
        json.dump(problem.meta, f, indent=1)
    print(f"synth: wrote {args.shape} fixture "
          f"({len(problem.source.vertices)} vertices) to {out}")
    return 0


# ----------------------------------------------------------------------
# compress
# ----------------------------------------------------------------------

def cmd_compress(args) -> int:
    mesh = mio.load_mesh(args.mesh)
    surface = mio.to_varifold(mesh)
    kernel = KernelConfig(args.ell_x, args.ell_n)
    if args.m > len(surface):
        raise CliError(f"m = {args.m} exceeds surface size {len(surface)}")
    cfg = CompressionConfig(args.m, lam=args.ridge_lambda, seed=args.seed)
    compressed = vf.compress(surface, kernel, cfg)
    vf.save_varifold(args.out, compressed, kernel, cfg)
    full = vf.inner_product(surface, surface, kernel)
    err = abs(vf.distance(compressed, surface, kernel)) / full
    print(f"compress: {len(surface)} -> {len(compressed)} atoms, "
          f"relative self-product error {err:.3e}, wrote {args.out}")
    return 0


# ----------------------------------------------------------------------
# fit
# ----------------------------------------------------------------------

def _load_target(path, kernel: KernelConfig):
    path = Path(path)
    if path.suffix == ".vfd":
        surface, k, _ = vf.load_varifold(path)
        return None, surface, k
    mesh = mio.load_mesh(path)
    return mesh, None, kernel


def _joint_normalize(source: TriMesh, target_mesh, skeleton):
    """One shared unit-cube transform for the pair (and the skeleton)."""
    pts = [source.vertices]
    if target_mesh is not None:
        pts.append(target_mesh.vertices)
    allpts = np.concatenate(pts)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    extent = float(np.max(hi - lo))
    scale = 1.0 if extent == 0.0 else 1.0 / extent
    center = (lo + hi) / 2.0
    tf = NormalizeTransform(scale, -center * scale)
    src = source.with_vertices(tf.apply(source.vertices))
    tgt = None if target_mesh is None else target_mesh.with_vertices(
        tf.apply(target_mesh.vertices))
    skel = None if skeleton is None else skeleton.transformed(tf.scale, tf.offset)
    return src, tgt, skel, tf


def _build_model(cfg: RunConfig) -> FlowModel:
    arc = nets.arcnet(widths=cfg.arc_widths, omega0=cfg.arc_omega0,
                      seed=cfg.seed, head_gain=cfg.arc_head_gain)
    qnet = nets.qnet(widths=cfg.qnet_widths, seed=cfg.seed + 1)
    n_edges = 1
    if cfg.skeleton is not None:
        n_edges = sk.load_skeleton(cfg.skeleton).n_edges
    return FlowModel(arc=arc, qnet=qnet, pose=PoseParams.identity(n_edges),
                     grid=cfg.grid)


def save_model_checkpoint(path, model: FlowModel, cfg: RunConfig,
                          tf: NormalizeTransform, epochs_trained: int = 0) -> None:
    nets.save_checkpoint(path, {
        "epochs_trained": epochs_trained,
        "arc": nets.mlp_to_dict(model.arc),
        "qnet": nets.mlp_to_dict(model.qnet),
        "pose": {"translation": model.pose.translation.tolist(),
                 "rotations": model.pose.rotations.tolist()},
        "grid": {"horizon": model.grid.horizon, "steps": model.grid.steps},
        "normalize": {"scale": tf.scale, "offset": tf.offset.tolist()},
        "paths": {"source": str(cfg.source), "target": str(cfg.target),
                  "skeleton": None if cfg.skeleton is None else str(cfg.skeleton)},
        "kernel": {"ell_x": cfg.kernel.ell_x, "ell_n": cfg.kernel.ell_n},
        "seed": cfg.seed,
    })


def load_model_checkpoint(path):
    doc = nets.load_checkpoint(path)
    grid = TimeGrid(doc["grid"]["horizon"], int(doc["grid"]["steps"]))
    model = FlowModel(
        arc=nets.mlp_from_dict(doc["arc"]),
        qnet=nets.mlp_from_dict(doc["qnet"]),
        pose=PoseParams(np.asarray(doc["pose"]["translation"]),
                        np.asarray(doc["pose"]["rotations"])),
        grid=grid)
    tf = NormalizeTransform(doc["normalize"]["scale"],
                            np.asarray(doc["normalize"]["offset"]))
    return model, tf, doc


def cmd_fit(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output = Path(args.out)
    cfg.validate()
    out = Path(cfg.output)
    start_epoch = 0

    source_mesh = mio.load_mesh(cfg.source)
    target_mesh, target_surface, kernel = _load_target(cfg.target, cfg.kernel)
    skeleton = sk.load_skeleton(cfg.skeleton) if cfg.skeleton is not None else None
    src_mesh_n, tgt_mesh_n, skel_n, tf = _joint_normalize(
        source_mesh, target_mesh, skeleton)
    source = mio.to_varifold(src_mesh_n)
    if target_surface is None:
        target = mio.to_varifold(tgt_mesh_n)
        if cfg.compression is not None:
            target = vf.compress(target, cfg.kernel, cfg.compression)
    else:
        target = target_surface  # precompressed targets are used as stored

    if args.resume is not None:
        model, _, doc = load_model_checkpoint(args.resume)
        start_epoch = int(doc.get("epochs_trained", 0))
    else:
        model = _build_model(cfg)
        if skel_n is not None:
            model.pose = PoseParams.identity(skel_n.n_edges)
    problem = Problem(source, target, cfg.kernel, cfg.schedule.main_weights,
                      skeleton=skel_n, source_mesh=src_mesh_n,
                      sample_params=cfg.sample_params, seed=cfg.seed)
    log_path = out / "train.log"
    history = train(model, problem, cfg.schedule, log_file=log_path,
                    start_epoch=start_epoch)

    ckpt = out / "checkpoint.json"
    epochs_trained = cfg.schedule.epochs_main + cfg.schedule.epochs_ft
    save_model_checkpoint(ckpt, model, cfg, tf, epochs_trained=epochs_trained)
    if skel_n is not None:
        learned = Skeleton(sk.posed_joints(skel_n, model.pose),
                           list(skel_n.edges), skel_n.root)
        sk.save_skeleton(out / "learned_skeleton.skel", learned)
        with open(out / "final_pose.json", "w") as f:
            json.dump({"translation": model.pose.translation.tolist(),
                       "rotations": model.pose.rotations.tolist()}, f)
    print(f"fit: {len(history)} epochs, final L_full "
          f"{history[-1]['L_full']:.6e}, wrote {ckpt}")
    return 0


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------

def cmd_export(args) -> int:
    model, tf, doc = load_model_checkpoint(args.checkpoint)
    src_path = args.source or doc["paths"]["source"]
    source_mesh = mio.load_mesh(src_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.frames
    T = model.grid.horizon
    # refine the grid so every requested time is a node
    per = max(1, int(np.ceil(model.grid.steps / n)))
    grid = TimeGrid(T, n * per)
    field = VelocityField(model.arc, T)
    times = [k * T / n for k in range(n + 1)]
    verts_n = tf.apply(source_mesh.vertices)
    traj = odes.ode_solve_batch(field, FrameState(verts_n), times[1:], grid=grid)
    mio.save_mesh(source_mesh, out / "frame_0000.obj")  # t=0 is the source
    for i, state in enumerate(traj.states, start=1):
        mesh = source_mesh.with_vertices(tf.invert(state.pos))
        mio.save_mesh(mesh, out / f"frame_{i:04d}.obj")
    print(f"export: wrote {n + 1} frames to {out}")
    return 0


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def flow_endpoint(model: FlowModel, tf: NormalizeTransform,
                  source_mesh: TriMesh) -> np.ndarray:
    field = VelocityField(model.arc, model.grid.horizon)
    verts_n = tf.apply(source_mesh.vertices)
    return odes.ode_solve(field, verts_n, model.grid.horizon, grid=model.grid)


def cmd_eval(args) -> int:
    model, tf, doc = load_model_checkpoint(args.checkpoint)
    src_path = args.source or doc["paths"]["source"]
    tgt_path = args.target or doc["paths"]["target"]
    source_mesh = mio.load_mesh(src_path)
    if Path(tgt_path).suffix == ".vfd":
        raise CliError("eval needs a mesh target (got a compressed varifold)")
    target_mesh = mio.load_mesh(tgt_path)
    flowed = flow_endpoint(model, tf, source_mesh)
    target_n = target_mesh.with_vertices(tf.apply(target_mesh.vertices))
    source_n = source_mesh.with_vertices(tf.apply(source_mesh.vertices))

    rows = []
    cham = mx.chamfer(flowed, target_n.vertices)
    cham_curve = mx.chamfer_curve(flowed, target_n.vertices)
    rows.append({"metric": "chamfer", "mean": cham,
                 "std": float(np.std(cham_curve.errors)),
                 "auc": mx.auc(cham_curve, args.chamfer_threshold),
                 "threshold": args.chamfer_threshold,
                 "errors": cham_curve.errors})
    conf_curve = mx.conformal_distortion(source_n, flowed)
    m, s = mx._finite_stats(conf_curve.errors)
    rows.append({"metric": "conformal", "mean": m, "std": s,
                 "auc": mx.auc(conf_curve, args.conformal_threshold),
                 "threshold": args.conformal_threshold,
                 "errors": conf_curve.errors})
    if args.gt is not None:
        gt_idx = np.loadtxt(args.gt, dtype=int)
        pred = mx.extract_correspondence(flowed, target_n)
        geo_curve = mx.geodesic_error(
            pred, mx.CorrespondenceMap(gt_idx, "ground-truth"), target_n)
        m, s = mx._finite_stats(geo_curve.errors)
        rows.insert(0, {"metric": "geodesic", "mean": m, "std": s,
                        "auc": mx.auc(geo_curve, args.geodesic_threshold),
                        "threshold": args.geodesic_threshold,
                        "errors": geo_curve.errors})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mx.write_report(out / "report.txt", rows, out / "errors.txt")
    for r in rows:
        print(f"eval: {r['metric']}: mean {r['mean']:.6e} "
              f"auc@{r['threshold']} = {r['auc']:.4f}")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="morphflow",
        description="Diffeomorphic shape interpolation and correspondence")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic source/target pair")
    ps.add_argument("--shape", choices=["sphere", "capsule_arm", "two_box"],
                    required=True)
    ps.add_argument("--resolution", type=int, default=1000)
    ps.add_argument("--angle", type=float, default=30.0,
                    help="rotation / hinge angle in degrees")
    ps.add_argument("--translation", type=float, default=0.2)
    ps.add_argument("--out", required=True)
    ps.set_defaults(func=cmd_synth)

    pc = sub.add_parser("compress", help="compress a mesh to a varifold file")
    pc.add_argument("--mesh", required=True)
    pc.add_argument("--m", type=int, required=True)
    pc.add_argument("--ell-x", type=float, default=0.5, dest="ell_x")
    pc.add_argument("--ell-n", type=float, default=0.5, dest="ell_n")
    pc.add_argument("--lambda", type=float, default=1.0, dest="ridge_lambda")
    pc.add_argument("--seed", type=int, default=0)
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=cmd_compress)

    pf = sub.add_parser("fit", help="fit the flow to a source/target pair")
    pf.add_argument("--config", required=True)
    pf.add_argument("--seed", type=int, default=None)
    pf.add_argument("--deterministic", action="store_true",
                    help="single-threaded deterministic mode (always on)")
    pf.add_argument("--resume", default=None,
                    help="checkpoint to continue training from")
    pf.add_argument("--out", default=None)
    pf.set_defaults(func=cmd_fit)

    pe = sub.add_parser("export", help="write interpolation frames")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--frames", type=int, default=4)
    pe.add_argument("--source", default=None)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_export)

    pv = sub.add_parser("eval", help="evaluate a fitted checkpoint")
    pv.add_argument("--checkpoint", required=True)
    pv.add_argument("--gt", default=None, help="ground-truth index map file")
    pv.add_argument("--source", default=None)
    pv.add_argument("--target", default=None)
    pv.add_argument("--geodesic-threshold", type=float, default=0.20)
    pv.add_argument("--chamfer-threshold", type=float, default=0.1)
    pv.add_argument("--conformal-threshold", type=float, default=0.15)
    pv.add_argument("--out", required=True)
    pv.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, mio.MeshError, vf.VarifoldError,
            sk.SkeletonError, odes.OdeError, ls.TrainingAbort, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
