"""Heterogeneous traffic graph encoder, recurrent flow encoder, classifiers.

The graph encoder runs per-edge-type GraphSAGE-style layers: each layer and
edge type owns one linear map applied to concat(self, neighbor-mean), the
per-type results are summed and passed through relu, and the packet
embedding is the mean of the final-layer node states. A single-layer LSTM
turns the packet embedding sequence of a flow into the flow embedding, and
two unshared 2-layer MLP heads produce flow and packet logits from the
concatenated per-view embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graphs import EDGE_TYPES, HeteroTrafficGraph
from .tensor import NeighborPlan, ParamStore, Tensor


class EmptyFlow(ValueError):
    """Flow encoder received an empty packet sequence."""


@dataclass(frozen=True)
class ModelConfig:
    views: tuple[int, ...] = (4, 8)
    num_classes: int = 2
    num_layers: int = 4
    embed_dim: int = 64
    hidden_dim: int = 128
    gnn_dropout: float = 0.0
    lstm_dropout: float = 0.0
    tie_edge_types: bool = False  # homogeneous variant: one collapsed edge type

    def __post_init__(self):
        if self.num_layers < 1 or self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("num_layers must be >= 1 and dims positive")
        if not self.views:
            raise ValueError("at least one view required")


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """All learnable tensors.

    Linear maps use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); embedding
    tables use standard normal rows (unit-scale features are what makes
    graph readouts separable at depth). Nothing is shared across views or
    edge types; with tie_edge_types the three per-type groups start from
    identical values (and stay identical because they then receive
    identical gradients).
    """
    rng = np.random.default_rng(seed)
    params = ParamStore()
    h = cfg.hidden_dim
    for view in cfg.views:
        params.add(f"view{view}.embed", rng.standard_normal((2 ** view, cfg.embed_dim)))
        for layer in range(1, cfg.num_layers + 1):
            d_in = cfg.embed_dim if layer == 1 else h
            shared_w = _uniform(rng, 2 * d_in, (2 * d_in, h))
            shared_b = _uniform(rng, 2 * d_in, (h,))
            for etype in EDGE_TYPES:
                if cfg.tie_edge_types:
                    w, b = shared_w.copy(), shared_b.copy()
                else:
                    w = _uniform(rng, 2 * d_in, (2 * d_in, h))
                    b = _uniform(rng, 2 * d_in, (h,))
                params.add(f"view{view}.hgnn.layer{layer}.{etype}.weight", w)
                params.add(f"view{view}.hgnn.layer{layer}.{etype}.bias", b)
        # LSTM gate layout: input, forget, cell, output; forget bias starts at +1
        params.add(f"view{view}.lstm.w", _uniform(rng, h, (h, 4 * h)))
        params.add(f"view{view}.lstm.u", _uniform(rng, h, (h, 4 * h)))
        lstm_b = _uniform(rng, h, (4 * h,))
        lstm_b[h:2 * h] += 1.0
        params.add(f"view{view}.lstm.b", lstm_b)
    d_cat = len(cfg.views) * h
    for head in ("flow_head", "packet_head"):
        params.add(f"{head}.fc1.weight", _uniform(rng, d_cat, (d_cat, h)))
        params.add(f"{head}.fc1.bias", _uniform(rng, d_cat, (h,)))
        params.add(f"{head}.fc2.weight", _uniform(rng, h, (h, cfg.num_classes)))
        params.add(f"{head}.fc2.bias", _uniform(rng, h, (cfg.num_classes,)))
    return params


# ---------------------------------------------------------------------------
# graph packing


@dataclass
class PackedGraphs:
    """A batch of graphs laid out as one node table plus per-type plans."""
    bit_width: int
    node_values: np.ndarray    # (N,) embedding-table row per node
    graph_starts: np.ndarray   # (B,) first node row of each graph
    graph_counts: np.ndarray   # (B,)
    plans: dict[str, NeighborPlan] = field(default_factory=dict)

    @property
    def num_graphs(self) -> int:
        return int(self.graph_starts.size)


def pack_graphs(graphs: list[HeteroTrafficGraph],
                tie_edge_types: bool = False) -> PackedGraphs:
    """Concatenate graphs into one node table with per-edge-type plans.

    Undirected edges are expanded to both directions. With tie_edge_types
    every type uses the union edge set, which collapses the graph to a
    homogeneous one without changing parameter shapes.
    """
    counts = np.array([g.num_nodes for g in graphs], dtype=np.intp)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
    values = np.concatenate([g.node_values for g in graphs])
    total = int(counts.sum())
    packed = PackedGraphs(graphs[0].bit_width, values, starts, counts)
    per_type: dict[str, list[np.ndarray]] = {k: [] for k in EDGE_TYPES}
    for g, off in zip(graphs, starts):
        for kind in EDGE_TYPES:
            e = g.edges(kind)
            if e.size:
                per_type[kind].append(e + off)
    stacked = {k: (np.concatenate(v) if v else np.empty((0, 2), dtype=np.int64))
               for k, v in per_type.items()}
    if tie_edge_types:
        union = np.concatenate(list(stacked.values()))
        plan = _directed_plan(union, total)
        packed.plans = {k: plan for k in EDGE_TYPES}
    else:
        packed.plans = {k: _directed_plan(e, total) for k, e in stacked.items()}
    return packed


def _directed_plan(undirected: np.ndarray, num_nodes: int) -> NeighborPlan:
    if undirected.size == 0:
        return NeighborPlan(np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp), num_nodes)
    src = np.concatenate([undirected[:, 0], undirected[:, 1]])
    dst = np.concatenate([undirected[:, 1], undirected[:, 0]])
    return NeighborPlan(src, dst, num_nodes)


# ---------------------------------------------------------------------------
# forward passes


def hgnn_forward_packed(packed: PackedGraphs, params: ParamStore, cfg: ModelConfig,
                        training: bool = False, rng: np.random.Generator | None = None
                        ) -> tuple[Tensor, Tensor]:
    """Encode a packed batch; returns (graph embeddings (B,H), node states).

    Per layer, the three per-edge-type maps of concat(self, neighbor-mean)
    are applied as one fused matmul over concat(self, m_hh, m_pp, m_hp):
    the self blocks of the three weight matrices add, the neighbor blocks
    stack. This is algebraically the per-type sum and keeps per-type
    parameters (and their gradients) separate.
    """
    view = packed.bit_width
    h = T.gather_rows(params[f"view{view}.embed"], packed.node_values)
    for layer in range(1, cfg.num_layers + 1):
        d_in = cfg.embed_dim if layer == 1 else cfg.hidden_dim
        weights = [params[f"view{view}.hgnn.layer{layer}.{e}.weight"] for e in EDGE_TYPES]
        biases = [params[f"view{view}.hgnn.layer{layer}.{e}.bias"] for e in EDGE_TYPES]
        self_block = T.add(T.add(T.slice_rows(weights[0], 0, d_in),
                                 T.slice_rows(weights[1], 0, d_in)),
                           T.slice_rows(weights[2], 0, d_in))
        fused_w = T.concat([self_block] + [T.slice_rows(w, d_in, 2 * d_in)
                                           for w in weights], axis=0)
        fused_b = T.add(T.add(biases[0], biases[1]), biases[2])
        parts = [h] + [T.neighbor_mean(h, packed.plans[e]) for e in EDGE_TYPES]
        z = T.add(T.matmul(T.concat(parts, axis=1), fused_w), fused_b)
        h = T.relu(z)
        if training and cfg.gnn_dropout > 0.0 and layer < cfg.num_layers:
            h = T.dropout(h, cfg.gnn_dropout, rng)
    readout = T.segment_mean_rows(h, packed.graph_starts, packed.graph_counts)
    return readout, h


def hgnn_forward(graph: HeteroTrafficGraph, params: ParamStore, cfg: ModelConfig,
                 training: bool = False, rng: np.random.Generator | None = None,
                 return_node_states: bool = False):
    """Packet embedding of a single graph (vector of length hidden_dim)."""
    packed = pack_graphs([graph], tie_edge_types=cfg.tie_edge_types)
    readout, nodes = hgnn_forward_packed(packed, params, cfg, training, rng)
    emb = T.mean_rows(readout)  # (1,H) -> (H,)
    return (emb, nodes) if return_node_states else emb


def lstm_forward(x_steps: list[Tensor], view: int, params: ParamStore, hidden_dim: int,
                 step_mask: np.ndarray | None = None) -> Tensor:
    """Run the gated recurrence over per-step input matrices (B,H).

    step_mask (T,B) freezes state on padded steps so the final state equals
    the state at each sequence's true length.
    """
    w, u = params[f"view{view}.lstm.w"], params[f"view{view}.lstm.u"]
    b = params[f"view{view}.lstm.b"]
    batch = x_steps[0].shape[0]
    hh = Tensor(np.zeros((batch, hidden_dim)))
    cc = Tensor(np.zeros((batch, hidden_dim)))
    for t, x in enumerate(x_steps):
        gates = T.add(T.add(T.matmul(x, w), T.matmul(hh, u)), b)
        i = T.sigmoid(T.slice_cols(gates, 0, hidden_dim))
        f = T.sigmoid(T.slice_cols(gates, hidden_dim, 2 * hidden_dim))
        g = T.tanh(T.slice_cols(gates, 2 * hidden_dim, 3 * hidden_dim))
        o = T.sigmoid(T.slice_cols(gates, 3 * hidden_dim, 4 * hidden_dim))
        c_new = T.add(T.mul(f, cc), T.mul(i, g))
        h_new = T.mul(o, T.tanh(c_new))
        if step_mask is None:
            hh, cc = h_new, c_new
        else:
            m = step_mask[t][:, None]
            hh = T.add(T.mul(h_new, Tensor(m)), T.mul(hh, Tensor(1.0 - m)))
            cc = T.add(T.mul(c_new, Tensor(m)), T.mul(cc, Tensor(1.0 - m)))
    return hh


def flow_forward_batch(packet_matrix: Tensor, flow_index: np.ndarray, lengths: np.ndarray,
                       view: int, params: ParamStore, cfg: ModelConfig,
                       training: bool = False, rng: np.random.Generator | None = None,
                       keep_mask: np.ndarray | None = None) -> Tensor:
    """Flow embeddings (B_f, H) from rows of a packet-embedding matrix.

    flow_index is (B_f, T_max) with -1 padding; keep_mask (B_f, T_max), when
    given, zeroes dropped packets' inputs (packet-drop augmentation).
    """
    t_max = flow_index.shape[1]
    step_mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(packet_matrix.data.dtype).T
    safe_index = np.where(flow_index < 0, 0, flow_index)
    x_steps = []
    for t in range(t_max):
        x = T.gather_rows(packet_matrix, safe_index[:, t])
        x = T.mul(x, Tensor(step_mask[t][:, None]))  # zero padded rows
        if keep_mask is not None:
            x = T.mul(x, Tensor(keep_mask[:, t:t + 1].astype(x.data.dtype)))
        if training and cfg.lstm_dropout > 0.0:
            x = T.dropout(x, cfg.lstm_dropout, rng)
        x_steps.append(x)
    out = lstm_forward(x_steps, view, params, cfg.hidden_dim, step_mask)
    if training and cfg.lstm_dropout > 0.0:
        out = T.dropout(out, cfg.lstm_dropout, rng)
    return out


def flow_forward(packet_embeddings: list[Tensor], view: int, params: ParamStore,
                 cfg: ModelConfig) -> Tensor:
    """Flow embedding of one flow from its ordered packet embeddings."""
    if not packet_embeddings:
        raise EmptyFlow("flow with no packet embeddings")
    if len(packet_embeddings) > 15:
        raise ValueError("flows are capped at 15 packets")
    rows = T.concat([T.reshape(p, (1, -1)) for p in packet_embeddings], axis=0)
    index = np.arange(len(packet_embeddings))[None, :]
    lengths = np.array([len(packet_embeddings)])
    out = flow_forward_batch(rows, index, lengths, view, params, cfg)
    return T.mean_rows(out)  # (1,H) -> (H,)


def classify(embeddings_by_view: dict[int, Tensor], params: ParamStore,
             cfg: ModelConfig, head: str) -> Tensor:
    """Class logits from concatenated per-view embeddings (head: flow|packet)."""
    name = {"flow": "flow_head", "packet": "packet_head"}[head]
    parts = [embeddings_by_view[v] for v in cfg.views]
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    hidden = T.relu(T.add(T.matmul(x, params[f"{name}.fc1.weight"]),
                          params[f"{name}.fc1.bias"]))
    return T.add(T.matmul(hidden, params[f"{name}.fc2.weight"]),
                 params[f"{name}.fc2.bias"])
