"""Scene graph: per-image nodes with confidence, edges with keypoint matches.

The confidence score starts from match counts on the angle-sparsified graph
(mean matches per incident edge, normalized into a distribution over nodes),
is updated from the flat-head PSNR during training, and drives both ray
sampling and the inlier/outlier split: a node whose view-head PSNR exceeds
its flat-head PSNR by more than a threshold is flagged as an outlier pose.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import field as field_mod
from . import losses
from .geometry import BehindCamera, Intrinsics, Pose, pixel_ray, project, relative_rotation_deg


class AllZeroConfidence(ValueError):
    """Every node has zero initial confidence (no edges anywhere)."""


class NodeClass(enum.Enum):
    UNKNOWN = "unknown"
    INLIER = "inlier"
    OUTLIER = "outlier"


@dataclass
class Node:
    node_id: int
    confidence: float = 0.0
    label: NodeClass = NodeClass.UNKNOWN


@dataclass
class Edge:
    """Matched keypoints between images i < j; alive flags mark kept matches."""

    i: int
    j: int
    kp_i: np.ndarray  # (M, 2)
    kp_j: np.ndarray  # (M, 2)
    alive: np.ndarray  # (M,) bool

    def __post_init__(self):
        if self.i >= self.j:
            raise ValueError("edge endpoints must satisfy i < j")
        if len(self.kp_i) == 0:
            raise ValueError("edge created with no matches")

    def n_alive(self) -> int:
        return int(self.alive.sum())

    def copy(self) -> "Edge":
        return Edge(self.i, self.j, self.kp_i.copy(), self.kp_j.copy(), self.alive.copy())


@dataclass
class ConfidenceConfig:
    max_edge_angle_deg: float = 70.0  # sparsification threshold
    psnr_mix_weight: float = 0.01  # confidence increment per dB
    psnr_gap_db: float = 9.0  # view-vs-flat gap marking an outlier
    warmup_iters: int = 0

    def validate(self) -> None:
        if not 0.0 < self.max_edge_angle_deg <= 180.0:
            raise ValueError("max_edge_angle_deg must be in (0, 180]")
        if self.psnr_mix_weight <= 0.0 or self.psnr_gap_db <= 0.0:
            raise ValueError("psnr_mix_weight and psnr_gap_db must be positive")


class SceneGraph:
    def __init__(self, n_nodes: int):
        self.nodes = [Node(i) for i in range(n_nodes)]
        self.edges: dict[tuple[int, int], Edge] = {}
        self.raw_edges: dict[tuple[int, int], Edge] | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def add_edge(self, edge: Edge) -> None:
        if edge.i < 0 or edge.j >= self.n_nodes:
            raise ValueError("edge endpoint outside the node range")
        self.edges[(edge.i, edge.j)] = edge

    def edges_of(self, node_id: int) -> list[Edge]:
        return [e for (i, j), e in self.edges.items() if node_id in (i, j)]

    def confidences(self) -> np.ndarray:
        return np.array([n.confidence for n in self.nodes])

    def labels(self) -> list[NodeClass]:
        return [n.label for n in self.nodes]

    def copy(self) -> "SceneGraph":
        g = SceneGraph(self.n_nodes)
        for node, src in zip(g.nodes, self.nodes):
            node.confidence = src.confidence
            node.label = src.label
        g.edges = {k: e.copy() for k, e in self.edges.items()}
        if self.raw_edges is not None:
            g.raw_edges = {k: e.copy() for k, e in self.raw_edges.items()}
        return g


def _angular_filter(
    edges: dict[tuple[int, int], Edge], poses: list[Pose], max_angle_deg: float
) -> dict[tuple[int, int], Edge]:
    kept = {}
    for (i, j), edge in edges.items():
        if relative_rotation_deg(poses[i], poses[j]) <= max_angle_deg:
            kept[(i, j)] = edge.copy()
    return kept


def sparsify(g: SceneGraph, poses: list[Pose], max_angle_deg: float) -> SceneGraph:
    """Drop edges whose relative (estimated) rotation exceeds the threshold.

    The pre-sparsification edges are retained as the raw backup that later
    graph updates re-filter from scratch.
    """
    out = g.copy()
    if out.raw_edges is None:
        out.raw_edges = {k: e.copy() for k, e in g.edges.items()}
    out.edges = _angular_filter(out.raw_edges, poses, max_angle_deg)
    return out


def initial_confidence(g: SceneGraph) -> SceneGraph:
    """Mean alive-match count over incident edges, normalized over nodes."""
    out = g.copy()
    scores = np.zeros(out.n_nodes)
    for node in out.nodes:
        incident = out.edges_of(node.node_id)
        if incident:
            scores[node.node_id] = float(np.mean([e.n_alive() for e in incident]))
    total = scores.sum()
    if total <= 0.0:
        raise AllZeroConfidence("no node has any edge")
    for node, score in zip(out.nodes, scores / total):
        node.confidence = float(score)
    return out


def update_confidence(g: SceneGraph, psnr_flat: np.ndarray, mix_weight: float) -> SceneGraph:
    """Confidence update from flat-head PSNR: cs += mix_weight * psnr, renormalized."""
    psnr_flat = np.asarray(psnr_flat, dtype=float)
    if not np.all(np.isfinite(psnr_flat)):
        raise ValueError("psnr values must be finite")
    out = g.copy()
    scores = np.maximum(out.confidences() + mix_weight * psnr_flat, 0.0)
    total = scores.sum()
    if total <= 0.0:
        raise AllZeroConfidence("confidence mass vanished")
    for node, score in zip(out.nodes, scores / total):
        node.confidence = float(score)
    return out


def classify(g: SceneGraph, psnr_view: np.ndarray, psnr_flat: np.ndarray, gap_db: float) -> SceneGraph:
    """Outlier iff |psnr_view - psnr_flat| > gap_db (strict)."""
    out = g.copy()
    gap = np.abs(np.asarray(psnr_view, dtype=float) - np.asarray(psnr_flat, dtype=float))
    for node, value in zip(out.nodes, gap):
        node.label = NodeClass.OUTLIER if value > gap_db else NodeClass.INLIER
    return out


def sample_node(g: SceneGraph, rng: np.random.Generator) -> int:
    """Draw a node id from the confidence distribution."""
    cs = g.confidences()
    return int(rng.choice(g.n_nodes, p=cs / cs.sum()))


def match_residual(
    fld: field_mod.Field,
    poses: list[Pose],
    intr: Intrinsics,
    i: int,
    j: int,
    kp_i: np.ndarray,
    kp_j: np.ndarray,
    k_samples: int,
) -> float:
    """Symmetric re-projection residual (pixels): max of both directions.

    Depths come from the max-weight rendering sample. A direction whose ray
    has no weight or re-projects behind the camera counts as infinite.
    """
    worst = 0.0
    for (a, b, kp_a, kp_b) in ((i, j, kp_i, kp_j), (j, i, kp_j, kp_i)):
        origin, direction = pixel_ray(poses[a], intr, kp_a)
        try:
            _, weights, depths = field_mod.render_ray(
                fld, origin, direction, k_samples, use_view_dir=False
            )
            depth = losses.max_weight_depth(weights, depths[: len(weights)])
            reproj = project(poses[b], intr, origin + depth * direction)
        except (field_mod.NoIntersection, losses.AllZeroWeights, BehindCamera):
            return float("inf")
        worst = max(worst, float(np.linalg.norm(reproj - kp_b)))
    return worst


def update_graph(
    g: SceneGraph,
    fld: field_mod.Field,
    poses: list[Pose],
    intr: Intrinsics,
    max_angle_deg: float,
    residual_px: float,
    k_samples: int = 32,
) -> SceneGraph:
    """Rebuild the working graph from the raw backup.

    Re-applies the angular filter with the current poses, then kills matches
    whose symmetric re-projection residual exceeds residual_px. Edges left
    with no alive match are removed. Matches killed by the angular filter
    stay dead for this invocation (they are simply not revisited).
    """
    if g.raw_edges is None:
        raise ValueError("graph has no raw backup; call sparsify first")
    out = g.copy()
    out.edges = _angular_filter(out.raw_edges, poses, max_angle_deg)
    if np.isfinite(residual_px):
        for key in list(out.edges):
            edge = out.edges[key]
            for idx in range(len(edge.kp_i)):
                if not edge.alive[idx]:
                    continue
                res = match_residual(
                    fld, poses, intr, edge.i, edge.j, edge.kp_i[idx], edge.kp_j[idx], k_samples
                )
                if res > residual_px:
                    edge.alive[idx] = False
            if edge.n_alive() == 0:
                del out.edges[key]
    return out


def save_graph(path, g: SceneGraph) -> None:
    """Structured text: node lines, then edge blocks with matches and flags."""
    with open(path, "w") as fh:
        fh.write(f"nodes {g.n_nodes}\n")
        for n in g.nodes:
            fh.write(f"node {n.node_id} {n.confidence:.17g} {n.label.value}\n")
        fh.write(f"edges {len(g.edges)}\n")
        for (i, j), e in sorted(g.edges.items()):
            fh.write(f"edge {i} {j} {len(e.kp_i)}\n")
            for idx in range(len(e.kp_i)):
                fh.write(
                    f"match {e.kp_i[idx, 0]:.17g} {e.kp_i[idx, 1]:.17g} "
                    f"{e.kp_j[idx, 0]:.17g} {e.kp_j[idx, 1]:.17g} {int(e.alive[idx])}\n"
                )


def load_graph(path) -> SceneGraph:
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != "nodes":
            raise ValueError("malformed graph file: expected node count")
        g = SceneGraph(int(header[1]))
        for _ in range(g.n_nodes):
            parts = fh.readline().split()
            node = g.nodes[int(parts[1])]
            node.confidence = float(parts[2])
            node.label = NodeClass(parts[3])
        n_edges = int(fh.readline().split()[1])
        for _ in range(n_edges):
            parts = fh.readline().split()
            i, j, m = int(parts[1]), int(parts[2]), int(parts[3])
            kp_i = np.zeros((m, 2))
            kp_j = np.zeros((m, 2))
            alive = np.zeros(m, dtype=bool)
            for idx in range(m):
                mp = fh.readline().split()
                kp_i[idx] = (float(mp[1]), float(mp[2]))
                kp_j[idx] = (float(mp[3]), float(mp[4]))
                alive[idx] = bool(int(mp[5]))
            g.add_edge(Edge(i, j, kp_i, kp_j, alive))
    return g
