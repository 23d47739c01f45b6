"""Contrastive and classification objectives.

The supervised contrastive loss operates on L2-normalized rows and sums the
per-anchor terms (anchors without positives contribute zero). Packet-level
contrastive learning embeds two augmented copies of every graph (restart
random walk and feature flip) against the unaugmented anchors; flow-level
contrastive learning re-encodes flows whose packet embeddings were randomly
zeroed out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphs import EDGE_TYPES, HeteroTrafficGraph
from .model import ModelConfig, ParamStore, flow_forward_batch, \
    hgnn_forward_packed, pack_graphs
from .tensor import Tensor


class DegenerateBatch(ValueError):
    """Contrastive batch with fewer than two rows."""


@dataclass(frozen=True)
class AugmentConfig:
    restart_prob: float = 0.8
    walk_target_fraction: float = 0.5
    max_walk_steps_factor: int = 4  # cap = factor * |V| steps
    flip_prob: float = 0.3
    packet_drop_prob: float = 0.6
    temperature: float = 0.07

    def __post_init__(self):
        for name in ("restart_prob", "walk_target_fraction", "flip_prob", "packet_drop_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class ContrastiveBatch:
    z: Tensor                 # (n, d) embedding rows
    labels: np.ndarray        # (n,) class index per row
    anchor_mask: np.ndarray | None = None  # True for non-augmented anchor rows


def scl_loss(batch: ContrastiveBatch, temperature: float = 0.07) -> Tensor:
    """Supervised contrastive loss, summed over anchors.

    Rows are L2-normalized internally; for each anchor i the positives are
    the other rows sharing its label and the candidates are all other rows.
    Anchors with no positive contribute 0.
    """
    n = batch.z.shape[0]
    if n < 2:
        raise DegenerateBatch(f"contrastive batch needs >= 2 rows, got {n}")
    labels = np.asarray(batch.labels)
    if labels.shape != (n,):
        raise ValueError("labels must have one entry per row")

    z = T.l2_normalize_rows(batch.z)
    logits = T.scale(T.matmul(z, T.transpose(z)), 1.0 / temperature)
    # constant row shift: cancels inside the log-ratio, keeps exp in range
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(shift))
    off_diag = 1.0 - np.eye(n)
    denom = T.reduce_sum(T.mul(T.exp(shifted), Tensor(off_diag)), axis=1, keepdims=True)
    log_prob = T.sub(shifted, T.log(denom))

    same = (labels[:, None] == labels[None, :]) & (off_diag > 0)
    pos_counts = same.sum(axis=1)
    weights = np.zeros((n, n))
    rows = pos_counts > 0
    weights[rows] = same[rows] / pos_counts[rows, None]
    return T.neg(T.reduce_sum(T.mul(log_prob, Tensor(weights))))


# ---------------------------------------------------------------------------
# graph augmentations


def augment_random_walk(g: HeteroTrafficGraph, cfg: AugmentConfig,
                        rng: np.random.Generator) -> HeteroTrafficGraph:
    """Induced subgraph sampled by a random walk with restart.

    The walk starts at a uniform node, teleports back to it with
    restart_prob per step, and stops once ceil(walk_target_fraction * |V|)
    distinct nodes were visited or after max_walk_steps_factor * |V| steps.
    Node features and edge types are preserved.
    """
    n = g.num_nodes
    start = int(rng.integers(n))
    target = max(int(np.ceil(cfg.walk_target_fraction * n)), 1)
    max_steps = cfg.max_walk_steps_factor * n

    union = g.union_edges()
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    num_visited = 1
    if num_visited < target and union.size:
        # CSR-style neighbor table over the union of edge types
        src = np.concatenate([union[:, 0], union[:, 1]])
        dst = np.concatenate([union[:, 1], union[:, 0]])
        order = np.argsort(src, kind="stable")
        neighbors = dst[order]
        degrees = np.bincount(src, minlength=n)
        indptr = np.concatenate([[0], np.cumsum(degrees)])
        draws = rng.random((max_steps, 2))
        current = start
        for step in range(max_steps):
            if draws[step, 0] < cfg.restart_prob:
                current = start
                continue
            deg = degrees[current]
            if deg == 0:
                continue
            current = int(neighbors[indptr[current] + int(draws[step, 1] * deg)])
            if not visited[current]:
                visited[current] = True
                num_visited += 1
                if num_visited >= target:
                    break

    keep = np.flatnonzero(visited)
    relabel = np.full(n, -1, dtype=np.int64)
    relabel[keep] = np.arange(keep.size)
    new_edges = {}
    for kind in EDGE_TYPES:
        e = g.edges(kind)
        if e.size:
            mask = visited[e[:, 0]] & visited[e[:, 1]]
            new_edges[kind] = relabel[e[mask]]
        else:
            new_edges[kind] = e.copy()
    return HeteroTrafficGraph(g.bit_width, g.node_segments[keep], g.node_values[keep],
                              new_edges["hh"], new_edges["pp"], new_edges["hp"])


def augment_feature_flip(g: HeteroTrafficGraph, cfg: AugmentConfig,
                         rng: np.random.Generator) -> HeteroTrafficGraph:
    """Complement the unit value of randomly selected nodes within N bits.

    Structure is untouched; flipping is an involution at flip_prob == 1.
    Flipped values may collide with existing nodes, which is fine for the
    encoder (it only reads features and edges).
    """
    out = g.copy()
    if cfg.flip_prob <= 0.0:
        return out
    mask = rng.random(g.num_nodes) < cfg.flip_prob
    full = 2 ** g.bit_width - 1
    out.node_values = np.where(mask, full - g.node_values, g.node_values)
    return out


# ---------------------------------------------------------------------------
# dual-level contrastive tasks


def packet_contrastive_loss(graphs_by_view: dict[int, list[HeteroTrafficGraph]],
                            anchors_by_view: dict[int, Tensor], labels: np.ndarray,
                            params: ParamStore, cfg: ModelConfig, aug: AugmentConfig,
                            rng: np.random.Generator,
                            stop_anchor_grad: bool = False) -> Tensor:
    """Sum over views of SCL on {walk-augmented, anchors} and {flipped, anchors}."""
    if len(labels) < 2:
        raise DegenerateBatch("packet contrastive learning needs >= 2 packets")
    both = np.concatenate([labels, labels])
    total: Tensor | None = None
    for view in cfg.views:
        anchors = anchors_by_view[view]
        if stop_anchor_grad:
            anchors = anchors.detach()
        graphs = graphs_by_view[view]
        for augment in (augment_random_walk, augment_feature_flip):
            packed = pack_graphs([augment(g, aug, rng) for g in graphs],
                                 tie_edge_types=cfg.tie_edge_types)
            embedded, _ = hgnn_forward_packed(packed, params, cfg)
            term = scl_loss(ContrastiveBatch(
                T.concat([embedded, anchors], axis=0), both,
                np.r_[np.zeros(len(labels), bool), np.ones(len(labels), bool)]),
                aug.temperature)
            total = term if total is None else T.add(total, term)
    return total


def sample_keep_mask(lengths: np.ndarray, t_max: int, drop_prob: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-packet keep mask for flow augmentation; drop with probability
    drop_prob, retaining one uniformly chosen packet when all were dropped."""
    n = lengths.size
    keep = rng.random((n, t_max)) >= drop_prob
    valid = np.arange(t_max)[None, :] < lengths[:, None]
    keep &= valid
    for i in np.flatnonzero(~keep.any(axis=1)):
        keep[i, int(rng.integers(lengths[i]))] = True
    return keep


def flow_contrastive_loss(packet_matrix_by_view: dict[int, Tensor],
                          flow_index: np.ndarray, lengths: np.ndarray,
                          anchors_by_view: dict[int, Tensor], labels: np.ndarray,
                          params: ParamStore, cfg: ModelConfig, aug: AugmentConfig,
                          rng: np.random.Generator,
                          stop_anchor_grad: bool = False) -> Tensor:
    """Sum over views of SCL on {drop-augmented flow embeddings, anchors}."""
    if len(labels) < 2:
        raise DegenerateBatch("flow contrastive learning needs >= 2 flows")
    both = np.concatenate([labels, labels])
    total: Tensor | None = None
    for view in cfg.views:
        keep = sample_keep_mask(lengths, flow_index.shape[1], aug.packet_drop_prob, rng)
        augmented = flow_forward_batch(packet_matrix_by_view[view], flow_index, lengths,
                                       view, params, cfg, keep_mask=keep)
        anchors = anchors_by_view[view]
        if stop_anchor_grad:
            anchors = anchors.detach()
        term = scl_loss(ContrastiveBatch(
            T.concat([augmented, anchors], axis=0), both,
            np.r_[np.zeros(len(labels), bool), np.ones(len(labels), bool)]),
            aug.temperature)
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# classification


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross entropy with optional label smoothing."""
    n, c = logits.shape
    targets = np.full((n, c), label_smoothing / c)
    targets[np.arange(n), labels] += 1.0 - label_smoothing
    log_probs = T.log_softmax_rows(logits)
    return T.scale(T.neg(T.reduce_sum(T.mul(log_probs, Tensor(targets)))), 1.0 / n)


def classification_losses(flow_logits: Tensor, packet_logits: Tensor,
                          flow_labels: np.ndarray, packet_labels: np.ndarray,
                          label_smoothing: float = 0.0) -> tuple[Tensor, Tensor]:
    """(flow CE, packet CE); packet labels are inherited from their flows."""
    return (cross_entropy(flow_logits, flow_labels, label_smoothing),
            cross_entropy(packet_logits, packet_labels, label_smoothing))
