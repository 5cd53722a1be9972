"""Joint pose + field optimization with scene-graph guidance.

Each step samples one image node from the confidence distribution, renders a
pixel batch from it (both color heads share samples and weights), samples
match terms from edges incident to that node subject to the pair policy,
assembles the total loss, and applies one SGD-with-momentum step to the
field blocks and to the pose tangents the policy permits. Poses advance by
retraction: pose <- exp(velocity) * pose.

Scheduled between steps:
- confidence updates (flat-head PSNR) every fixed period after warmup;
- at each graph-update epoch: PSNR probes for every node, inlier/outlier
  classification, Monte Carlo re-localization of each outlier, and a graph
  rebuild with the current re-projection threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import autodiff, reloc, scene_graph
from .field import Field, FieldConfig, PsnrTracker, ray_cube_intersect, render_batch, stratified_depths
from .geometry import Pose, perturb_pose, read_trajectory, write_trajectory
from .losses import LossConfig
from .reloc import RelocConfig
from .scene_graph import ConfidenceConfig, NodeClass, SceneGraph
from .synth import Dataset


@dataclass
class TrainConfig:
    total_iters: int = 20000
    rays_per_batch: int = 256
    samples_per_ray: int = 32
    match_batch: int = 64
    match_samples: int = 24
    lr_field: float = 1e-2
    lr_pose: float = 1e-3
    momentum: float = 0.9
    lr_floor: float = 0.05  # cosine decay floor, as a fraction of the base lr
    warmup_frac: float = 0.1
    n_graph_updates: int = 4
    confidence_period: int = 500
    probe_rays: int = 256
    tracker_decay: float = 0.95
    residual_px_start: float = 8.0
    residual_px_end: float = 2.0
    seed: int = 0
    field: FieldConfig = dataclass_field(default_factory=FieldConfig)
    loss: LossConfig = dataclass_field(default_factory=LossConfig)
    confidence: ConfidenceConfig = dataclass_field(default_factory=ConfidenceConfig)
    reloc: RelocConfig = dataclass_field(default_factory=RelocConfig)

    def validate(self) -> None:
        counts = (
            self.total_iters,
            self.rays_per_batch,
            self.samples_per_ray,
            self.match_batch,
            self.match_samples,
            self.confidence_period,
            self.probe_rays,
        )
        if any(c <= 0 for c in counts):
            raise ValueError("all batch/iteration counts must be positive")
        if self.lr_field <= 0 or self.lr_pose <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def warmup_iters(self) -> int:
        return int(self.total_iters * self.warmup_frac)

    def graph_epochs(self) -> list[int]:
        if self.n_graph_updates == 0:
            return []
        epochs = [
            round(self.total_iters * (k + 1) / self.n_graph_updates)
            for k in range(self.n_graph_updates)
        ]
        return sorted({e for e in epochs if e > self.warmup_iters})

    def residual_schedule(self) -> list[float]:
        epochs = self.graph_epochs()
        if len(epochs) <= 1:
            return [self.residual_px_end] * len(epochs)
        return [
            self.residual_px_start
            + (self.residual_px_end - self.residual_px_start) * k / (len(epochs) - 1)
            for k in range(len(epochs))
        ]


@dataclass
class TrainState:
    field: Field
    poses: list[Pose]
    graph: SceneGraph
    tracker: PsnrTracker
    rng: np.random.Generator
    iteration: int = 0
    events: list[str] = dataclass_field(default_factory=list)
    vel_field: dict = dataclass_field(default_factory=dict)
    vel_sharpness: float = 0.0
    vel_pose: np.ndarray | None = None
    probe_counter: int = 0

    def log(self, line: str) -> None:
        self.events.append(line)


def pair_policy(class_i: NodeClass, class_j: NodeClass) -> str:
    """Pair handling: joint, pose-only on the outlier side, or skip.

    UNKNOWN counts as inlier until the first classification.
    """
    out_i = class_i is NodeClass.OUTLIER
    out_j = class_j is NodeClass.OUTLIER
    if out_i and out_j:
        return "skip"
    if out_i:
        return "pose_i"
    if out_j:
        return "pose_j"
    return "joint"


def init_state(dataset: Dataset, cfg: TrainConfig) -> TrainState:
    cfg.validate()
    cfg.confidence.validate()
    fld = Field.create(cfg.field)
    poses = [p.copy() for p in dataset.init_poses]
    graph = scene_graph.sparsify(dataset.graph, poses, cfg.confidence.max_edge_angle_deg)
    graph = scene_graph.initial_confidence(graph)
    state = TrainState(
        field=fld,
        poses=poses,
        graph=graph,
        tracker=PsnrTracker(cfg.tracker_decay),
        rng=np.random.default_rng(cfg.seed),
    )
    state.vel_field = {name: np.zeros_like(block) for name, block in fld.grid_blocks().items()}
    state.vel_pose = np.zeros((len(poses), 6))
    return state


def _sample_node_pixels(state: TrainState, dataset: Dataset, cfg: TrainConfig, node: int):
    """Pixel batch from one node, keeping only rays that hit the cube."""
    intr = dataset.intr
    pose = state.poses[node]
    pixels = np.zeros((0, 2))
    for _ in range(20):
        need = cfg.rays_per_batch - len(pixels)
        if need <= 0:
            break
        px = np.stack(
            [
                state.rng.integers(0, intr.width, size=need),
                state.rng.integers(0, intr.height, size=need),
            ],
            axis=1,
        ).astype(float)
        d_cam = autodiff.pixel_dirs_cam(intr, px)
        d = d_cam @ pose.r.T
        o = np.broadcast_to(pose.t, d.shape)
        _, _, hit = ray_cube_intersect(o, d)
        pixels = np.concatenate([pixels, px[hit]], axis=0)
    return pixels


def plan_step(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> autodiff.StepPlan:
    intr = dataset.intr
    node = scene_graph.sample_node(state.graph, state.rng)
    pixels = _sample_node_pixels(state, dataset, cfg, node)

    rays = None
    if len(pixels) > 0:
        pose = state.poses[node]
        d_cam = autodiff.pixel_dirs_cam(intr, pixels)
        d = d_cam @ pose.r.T
        o = np.broadcast_to(pose.t, d.shape)
        t_near, t_far, _ = ray_cube_intersect(o, d)
        t = stratified_depths(t_near, t_far, cfg.samples_per_ray, state.rng)
        targets = dataset.images[node][pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
        rays = autodiff.RayBatchPlan(
            pose_idx=np.full(len(pixels), node, dtype=int),
            pixels=pixels,
            targets=targets,
            t=t,
        )

    # match pool: alive matches of non-skip edges incident to the node
    labels = state.graph.labels()
    pool = []
    for edge in state.graph.edges_of(node):
        mode = pair_policy(labels[edge.i], labels[edge.j])
        if mode == "skip":
            continue
        for idx in np.flatnonzero(edge.alive):
            pool.append((edge, int(idx), mode))
    matches = None
    if pool:
        chosen = state.rng.integers(0, len(pool), size=cfg.match_batch)
        rows = {
            "pose_i": [], "pose_j": [], "kp_i": [], "kp_j": [],
            "t_i": [], "t_j": [], "spacing_i": [], "spacing_j": [],
            "opt_i": [], "opt_j": [], "field_on": [],
        }
        for c in chosen:
            edge, idx, mode = pool[c]
            ok = True
            ts, spacings = [], []
            for end, kp in ((edge.i, edge.kp_i[idx]), (edge.j, edge.kp_j[idx])):
                pose = state.poses[end]
                d_cam = autodiff.pixel_dirs_cam(intr, kp[None])
                d = d_cam @ pose.r.T
                t_near, t_far, hit = ray_cube_intersect(pose.t[None], d)
                if not hit[0]:
                    ok = False
                    break
                ts.append(stratified_depths(t_near, t_far, cfg.match_samples, state.rng)[0])
                spacings.append((t_far[0] - t_near[0]) / cfg.match_samples)
            if not ok:
                continue
            rows["pose_i"].append(edge.i)
            rows["pose_j"].append(edge.j)
            rows["kp_i"].append(edge.kp_i[idx])
            rows["kp_j"].append(edge.kp_j[idx])
            rows["t_i"].append(ts[0])
            rows["t_j"].append(ts[1])
            rows["spacing_i"].append(spacings[0])
            rows["spacing_j"].append(spacings[1])
            rows["opt_i"].append(mode in ("joint", "pose_i"))
            rows["opt_j"].append(mode in ("joint", "pose_j"))
            rows["field_on"].append(mode == "joint")
        if rows["pose_i"]:
            matches = autodiff.MatchPlan(
                pose_i=np.array(rows["pose_i"], dtype=int),
                pose_j=np.array(rows["pose_j"], dtype=int),
                kp_i=np.array(rows["kp_i"]),
                kp_j=np.array(rows["kp_j"]),
                t_i=np.array(rows["t_i"]),
                t_j=np.array(rows["t_j"]),
                spacing_i=np.array(rows["spacing_i"]),
                spacing_j=np.array(rows["spacing_j"]),
                opt_i=np.array(rows["opt_i"], dtype=bool),
                opt_j=np.array(rows["opt_j"], dtype=bool),
                field_on=np.array(rows["field_on"], dtype=bool),
            )
    return autodiff.StepPlan(rays=rays, matches=matches)


def _lr_scale(cfg: TrainConfig, iteration: int) -> float:
    frac = min(iteration / max(cfg.total_iters, 1), 1.0)
    return cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac))


def apply_update(state: TrainState, cfg: TrainConfig, grads: autodiff.GradSet) -> None:
    """SGD with momentum; blocks with zero gradient and velocity stay bitwise."""
    scale = _lr_scale(cfg, state.iteration)
    blocks = state.field.grid_blocks()
    for name, g in (("sdf", grads.sdf), ("color_view", grads.color_view), ("color_flat", grads.color_flat)):
        v = state.vel_field[name]
        if not g.any() and not v.any():
            continue
        v *= cfg.momentum
        v -= cfg.lr_field * scale * g
        blocks[name] += v
    if grads.sharpness != 0.0 or state.vel_sharpness != 0.0:
        state.vel_sharpness = (
            cfg.momentum * state.vel_sharpness - cfg.lr_field * scale * grads.sharpness
        )
        state.field.sharpness = float(
            np.clip(state.field.sharpness + state.vel_sharpness, 1.0, 2000.0)
        )
    for i in range(len(state.poses)):
        g = grads.pose[i]
        v = state.vel_pose[i]
        if not g.any() and not v.any():
            continue
        v *= cfg.momentum
        v -= cfg.lr_pose * scale * g
        state.poses[i] = perturb_pose(state.poses[i], v)


def train_step(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> autodiff.StepResult:
    plan = plan_step(state, dataset, cfg)
    result = autodiff.evaluate_step(
        state.field, state.poses, dataset.intr, plan, cfg.loss
    )
    apply_update(state, cfg, result.grads)
    if plan.rays is not None and len(plan.rays.pose_idx) > 0:
        node = int(plan.rays.pose_idx[0])
        fwd_err = result.diagnostics
        state.tracker.update(node, fwd_err["sq_err_view"], "view")
        state.tracker.update(node, fwd_err["sq_err_flat"], "flat")
    state.iteration += 1
    return result


def probe_node(state: TrainState, dataset: Dataset, cfg: TrainConfig, node: int) -> None:
    """Deterministic PSNR probe updating both tracker heads for one node."""
    intr = dataset.intr
    rng = np.random.default_rng([cfg.seed, 7919, state.probe_counter, node])
    pose = state.poses[node]
    px = np.stack(
        [
            rng.integers(0, intr.width, size=cfg.probe_rays),
            rng.integers(0, intr.height, size=cfg.probe_rays),
        ],
        axis=1,
    ).astype(float)
    d_cam = autodiff.pixel_dirs_cam(intr, px)
    d = d_cam @ pose.r.T
    o = np.broadcast_to(pose.t, d.shape)
    t_near, t_far, hit = ray_cube_intersect(o, d)
    targets = dataset.images[node][px[:, 1].astype(int), px[:, 0].astype(int)]
    rendered_view = np.zeros_like(targets)
    rendered_flat = np.zeros_like(targets)
    if hit.any():
        t = stratified_depths(t_near[hit], t_far[hit], cfg.samples_per_ray, None)
        fwd = render_batch(state.field, o[hit], d[hit], t)
        rendered_view[hit] = fwd["rendered_view"]
        rendered_flat[hit] = fwd["rendered_flat"]
    state.tracker.update(node, np.mean((rendered_view - targets) ** 2, axis=1), "view")
    state.tracker.update(node, np.mean((rendered_flat - targets) ** 2, axis=1), "flat")


def probe_all(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> None:
    state.probe_counter += 1
    for node in range(state.graph.n_nodes):
        probe_node(state, dataset, cfg, node)


def _psnr_arrays(state: TrainState):
    n = state.graph.n_nodes
    view = np.array([state.tracker.psnr(i, "view") for i in range(n)])
    flat = np.array([state.tracker.psnr(i, "flat") for i in range(n)])
    return view, flat


def run_training(dataset: Dataset, cfg: TrainConfig, out_dir=None) -> TrainState:
    state = init_state(dataset, cfg)
    run_schedule(state, dataset, cfg)
    if out_dir is not None:
        save_checkpoint(Path(out_dir), state, cfg)
    return state


def run_schedule(state: TrainState, dataset: Dataset, cfg: TrainConfig) -> None:
    """Advance the state to cfg.total_iters, firing scheduled events."""
    epochs = cfg.graph_epochs()
    residuals = cfg.residual_schedule()
    while state.iteration < cfg.total_iters:
        train_step(state, dataset, cfg)
        it = state.iteration
        if it > cfg.warmup_iters and it % cfg.confidence_period == 0 and it not in epochs:
            probe_all(state, dataset, cfg)
            _, flat = _psnr_arrays(state)
            state.graph = scene_graph.update_confidence(
                state.graph, flat, cfg.confidence.psnr_mix_weight
            )
            state.log(f"it={it} event=confidence")
        if it in epochs:
            _graph_epoch(state, dataset, cfg, residuals[epochs.index(it)])


def _graph_epoch(state: TrainState, dataset: Dataset, cfg: TrainConfig, residual_px: float) -> None:
    it = state.iteration
    probe_all(state, dataset, cfg)
    view, flat = _psnr_arrays(state)
    state.graph = scene_graph.update_confidence(
        state.graph, flat, cfg.confidence.psnr_mix_weight
    )
    state.graph = scene_graph.classify(state.graph, view, flat, cfg.confidence.psnr_gap_db)
    labels = state.graph.labels()
    outliers = [i for i, c in enumerate(labels) if c is NodeClass.OUTLIER]
    gaps = np.abs(view - flat)
    state.log(
        f"it={it} event=classify outliers={','.join(map(str, outliers)) or 'none'} "
        f"max_gap={gaps.max():.4f}"
    )

    if outliers:
        inlier_poses = [state.poses[i] for i, c in enumerate(labels) if c is not NodeClass.OUTLIER]
        try:
            axis = reloc.estimate_axis(inlier_poses)
        except reloc.DegenerateRing:
            axis = None
            state.log(f"it={it} event=reloc_skipped reason=degenerate_ring")
        if axis is not None:
            for node in outliers:
                result = reloc.run_relocalization(
                    node,
                    state.field,
                    state.poses[node],
                    axis,
                    dataset.images[node],
                    dataset.intr,
                    cfg.reloc,
                    cfg.loss,
                    state.rng,
                )
                state.log(
                    f"it={it} event=reloc node={node} accepted={int(result.accepted)} "
                    f"incumbent={result.incumbent_psnr:.4f} "
                    f"best={result.particle_psnrs[result.chosen]:.4f} chosen={result.chosen}"
                )
                if result.accepted:
                    state.poses[node] = result.pose
                    state.vel_pose[node] = 0.0
                    state.tracker.reset(node)
                    probe_node(state, dataset, cfg, node)

    state.graph = scene_graph.update_graph(
        state.graph,
        state.field,
        state.poses,
        dataset.intr,
        cfg.confidence.max_edge_angle_deg,
        residual_px,
        k_samples=cfg.match_samples,
    )
    alive = sum(e.n_alive() for e in state.graph.edges.values())
    state.log(
        f"it={it} event=graph_update residual_px={residual_px:.4f} "
        f"edges={len(state.graph.edges)} alive={alive}"
    )


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(out_dir: Path, state: TrainState, cfg: TrainConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state.field.save(out_dir / "field.npz")
    write_trajectory(out_dir / "poses_final.txt", range(len(state.poses)), state.poses)
    scene_graph.save_graph(out_dir / "graph_final.txt", state.graph)
    np.savez(
        out_dir / "optimizer.npz",
        vel_pose=state.vel_pose,
        vel_sharpness=np.array(state.vel_sharpness),
        **{f"vel_{k}": v for k, v in state.vel_field.items()},
    )
    meta = {
        "iteration": state.iteration,
        "probe_counter": state.probe_counter,
        "tracker": state.tracker.state(),
        "rng_state": state.rng.bit_generator.state,
    }
    (out_dir / "train_meta.json").write_text(json.dumps(meta))
    (out_dir / "events.log").write_text("".join(line + "\n" for line in state.events))
    classes = " ".join(c.value for c in state.graph.labels())
    (out_dir / "report.txt").write_text(
        f"iterations = {state.iteration}\n"
        f"classes = {classes}\n"
        f"sharpness = {state.field.sharpness:.9g}\n"
        f"events = {len(state.events)}\n"
    )


def load_checkpoint(out_dir: Path, cfg: TrainConfig) -> TrainState:
    out_dir = Path(out_dir)
    fld = Field.load(out_dir / "field.npz")
    _, poses = read_trajectory(out_dir / "poses_final.txt")
    graph = scene_graph.load_graph(out_dir / "graph_final.txt")
    meta = json.loads((out_dir / "train_meta.json").read_text())
    tracker = PsnrTracker(cfg.tracker_decay)
    tracker.load_state(meta["tracker"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    opt = np.load(out_dir / "optimizer.npz")
    state = TrainState(
        field=fld,
        poses=poses,
        graph=graph,
        tracker=tracker,
        rng=rng,
        iteration=int(meta["iteration"]),
        probe_counter=int(meta["probe_counter"]),
    )
    state.vel_pose = opt["vel_pose"]
    state.vel_sharpness = float(opt["vel_sharpness"])
    state.vel_field = {k[4:]: opt[k] for k in opt.files if k.startswith("vel_") and k not in ("vel_pose", "vel_sharpness")}
    state.events = [
        line for line in (out_dir / "events.log").read_text().splitlines() if line
    ]
    return state
