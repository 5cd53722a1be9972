"""Command-line entry point: synth, train, eval, export.

One INI config file drives the whole pipeline; sections [scene] and
[dataset] feed `synth`, [train] feeds `train`, [eval] feeds `eval`. Every
subcommand is deterministic given the config and seed, and exits non-zero
when the requested artifact could not be fully written.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import metrics, synth, trainer
from .field import Field, FieldConfig, extract_mesh, write_ply
from .geometry import read_trajectory, write_trajectory
from .losses import LossConfig
from .reloc import RelocConfig
from .scene_graph import ConfidenceConfig, NodeClass, load_graph, save_graph
from .synth import Dataset, DatasetSpec, SceneSpec


class ConfigError(Exception):
    """Config problem with a [section] key diagnostic."""


def _read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    try:
        loaded = cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    if not loaded:
        raise ConfigError(f"config file not found: {path}")
    return cp


def _get(cp, section: str, key: str, conv, default):
    if not cp.has_section(section) or not cp.has_option(section, key):
        if default is None:
            raise ConfigError(f"[{section}] {key}: required key missing")
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}: {exc}") from exc


def scene_from_config(cp) -> SceneSpec:
    kind = _get(cp, "scene", "kind", str, "sphere_bumps")
    if kind not in synth.SDF_KINDS:
        raise ConfigError(f"[scene] kind: unknown SDF kind {kind!r}")
    params = {}
    if kind == "sphere":
        params["radius"] = _get(cp, "scene", "radius", float, 0.5)
    elif kind == "torus":
        params["major"] = _get(cp, "scene", "major", float, 0.45)
        params["minor"] = _get(cp, "scene", "minor", float, 0.18)
    else:
        params["radius"] = _get(cp, "scene", "radius", float, 0.5)
        params["n_bumps"] = _get(cp, "scene", "n_bumps", int, 10)
        params["bump_seed"] = _get(cp, "scene", "bump_seed", int, 7)
    return SceneSpec(
        kind=kind,
        sdf_params=params,
        color_seed=_get(cp, "scene", "color_seed", int, 11),
        texture_freq=_get(cp, "scene", "texture_freq", float, 6.0),
        texture_octaves=_get(cp, "scene", "texture_octaves", int, 2),
        texture_contrast=_get(cp, "scene", "texture_contrast", float, 1.0),
    )


def dataset_spec_from_config(cp) -> DatasetSpec:
    defaults = DatasetSpec()
    kwargs = {}
    for name in DatasetSpec.__dataclass_fields__:
        conv = int if isinstance(getattr(defaults, name), int) else float
        kwargs[name] = _get(cp, "dataset", name, conv, getattr(defaults, name))
    spec = DatasetSpec(**kwargs)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"[dataset] {exc}") from exc
    return spec


def train_config_from_config(cp) -> trainer.TrainConfig:
    t = trainer.TrainConfig()
    sec = "train"
    cfg = trainer.TrainConfig(
        total_iters=_get(cp, sec, "total_iters", int, t.total_iters),
        rays_per_batch=_get(cp, sec, "rays_per_batch", int, t.rays_per_batch),
        samples_per_ray=_get(cp, sec, "samples_per_ray", int, t.samples_per_ray),
        match_batch=_get(cp, sec, "match_batch", int, t.match_batch),
        match_samples=_get(cp, sec, "match_samples", int, t.match_samples),
        lr_field=_get(cp, sec, "lr_field", float, t.lr_field),
        lr_pose=_get(cp, sec, "lr_pose", float, t.lr_pose),
        momentum=_get(cp, sec, "momentum", float, t.momentum),
        lr_floor=_get(cp, sec, "lr_floor", float, t.lr_floor),
        warmup_frac=_get(cp, sec, "warmup_frac", float, t.warmup_frac),
        n_graph_updates=_get(cp, sec, "n_graph_updates", int, t.n_graph_updates),
        confidence_period=_get(cp, sec, "confidence_period", int, t.confidence_period),
        probe_rays=_get(cp, sec, "probe_rays", int, t.probe_rays),
        tracker_decay=_get(cp, sec, "tracker_decay", float, t.tracker_decay),
        residual_px_start=_get(cp, sec, "residual_px_start", float, t.residual_px_start),
        residual_px_end=_get(cp, sec, "residual_px_end", float, t.residual_px_end),
        seed=_get(cp, sec, "seed", int, t.seed),
        field=FieldConfig(
            res=_get(cp, sec, "grid_res", int, 64),
            dir_octaves=_get(cp, sec, "dir_octaves", int, 2),
            init_radius=_get(cp, sec, "init_radius", float, 0.5),
            init_sharpness=_get(cp, sec, "init_sharpness", float, 30.0),
        ),
        loss=LossConfig(
            eikonal_weight=_get(cp, sec, "eikonal_weight", float, 0.1),
            iou_weight=_get(cp, sec, "iou_weight", float, 0.2),
            reprojection_weight=_get(cp, sec, "reprojection_weight", float, 0.001),
            huber_delta_px=_get(cp, sec, "huber_delta_px", float, 1.0),
            sigma_scale=_get(cp, sec, "sigma_scale", float, 0.5),
        ),
        confidence=ConfidenceConfig(
            max_edge_angle_deg=_get(cp, sec, "max_edge_angle_deg", float, 70.0),
            psnr_mix_weight=_get(cp, sec, "psnr_mix_weight", float, 0.01),
            psnr_gap_db=_get(cp, sec, "psnr_gap_db", float, 9.0),
        ),
        reloc=RelocConfig(
            n_particles=_get(cp, sec, "reloc_particles", int, 24),
            stage1_steps=_get(cp, sec, "reloc_stage1", int, 300),
            stage2_steps=_get(cp, sec, "reloc_stage2", int, 700),
            lr=_get(cp, sec, "reloc_lr", float, 1e-2),
            rays_per_step=_get(cp, sec, "reloc_rays", int, 64),
            samples_per_ray=_get(cp, sec, "reloc_samples", int, 32),
        ),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from exc
    return cfg


def cmd_synth(args) -> int:
    cp = _read_config(args.config)
    scene = scene_from_config(cp)
    spec = dataset_spec_from_config(cp)
    seed = args.seed if args.seed is not None else _get(cp, "dataset", "seed", int, 0)
    ds = synth.generate_dataset(scene, spec, seed)
    synth.save_dataset(args.out, ds)
    if not args.quiet:
        n_out = int(ds.outlier_mask.sum())
        print(f"dataset written to {args.out}: {spec.n_cameras} cameras, {n_out} outliers")
    return 0


def cmd_train(args) -> int:
    cp = _read_config(args.config)
    cfg = train_config_from_config(cp)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = synth.load_dataset(args.dataset)
    out = Path(args.out)
    if args.resume:
        state = trainer.load_checkpoint(out, cfg)
        trainer.run_schedule(state, dataset, cfg)
        trainer.save_checkpoint(out, state, cfg)
    else:
        state = trainer.run_training(dataset, cfg, out)
    if not args.quiet:
        print(f"trained {state.iteration} iterations; checkpoint in {out}")
    return 0


def _eval_params(cp) -> dict:
    return {
        "mesh_resolution": _get(cp, "eval", "mesh_resolution", int, 128),
        "n_surface_points": _get(cp, "eval", "n_surface_points", int, 20000),
        "fscore_threshold_frac": _get(cp, "eval", "fscore_threshold_frac", float, 0.01),
        "use_gt_inliers": _get(cp, "eval", "use_gt_inliers", int, 0),
    }


def cmd_eval(args) -> int:
    cp = _read_config(args.config)
    params = _eval_params(cp)
    run = Path(args.run)
    if not (run / "field.npz").exists():
        print(f"error: no checkpoint (field.npz) in {run}", file=sys.stderr)
        return 3
    dataset = synth.load_dataset(args.dataset)
    fld = Field.load(run / "field.npz")
    _, est_poses = read_trajectory(run / "poses_final.txt")
    graph = load_graph(run / "graph_final.txt")
    pred_outlier = np.array([lab is NodeClass.OUTLIER for lab in graph.labels()])

    if params["use_gt_inliers"]:
        inlier_mask = ~dataset.outlier_mask
    else:
        inlier_mask = ~pred_outlier
    traj = metrics.ape_rpe(est_poses, dataset.gt_poses, inlier_mask)

    rng = np.random.default_rng(dataset.seed + 1)
    verts, faces = extract_mesh(fld, params["mesh_resolution"])
    pred_pts = metrics.sample_mesh_points(verts, faces, params["n_surface_points"], rng)
    gt_pts = metrics.sample_surface_points(
        dataset.scene.sdf(), params["n_surface_points"], rng
    )
    rho = params["fscore_threshold_frac"] * 2.0 * np.sqrt(3.0)  # frac of bbox diagonal
    surf = metrics.chamfer_fscore(pred_pts, gt_pts, rho)
    precision, recall = metrics.classification_metrics(pred_outlier, dataset.outlier_mask)

    values = {
        "ape_rot_deg": traj.ape_rot_deg,
        "ape_trans": traj.ape_trans,
        "rpe_rot_deg": traj.rpe_rot_deg,
        "rpe_trans": traj.rpe_trans,
        "chamfer": surf.chamfer,
        "fscore": surf.fscore,
        "outlier_precision": precision,
        "outlier_recall": recall,
    }
    metrics.write_metrics_report(run / "metrics.txt", values)
    if not args.quiet:
        for key, val in values.items():
            print(f"{key} = {val:.9g}")
    return 0


def cmd_export(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else None
    if args.what == "mesh":
        if not (run / "field.npz").exists():
            print(f"error: no checkpoint (field.npz) in {run}", file=sys.stderr)
            return 3
        fld = Field.load(run / "field.npz")
        verts, faces = extract_mesh(fld, args.resolution)
        write_ply(out or run / "mesh.ply", verts, faces)
    elif args.what == "trajectory":
        ids, poses = read_trajectory(run / "poses_final.txt")
        write_trajectory(out or run / "trajectory.txt", ids, poses)
    elif args.what == "graph":
        graph = load_graph(run / "graph_final.txt")
        save_graph(out or run / "graph.txt", graph)
    else:  # argparse choices guard this, but keep the exit code contract
        print(f"error: unknown export target {args.what!r}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphsurf",
        description="Scene-graph-guided joint pose and surface optimization on synthetic scenes",
    )
    parser.add_argument("--threads", type=int, default=1, help="worker cap (single-threaded build)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the joint optimization")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export mesh / trajectory / graph")
    p.add_argument("what", choices=["mesh", "trajectory", "graph"])
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resolution", type=int, default=128)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
