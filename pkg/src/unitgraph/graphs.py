"""PMI-based heterogeneous traffic graphs.

Each packet and bit width yields one graph: nodes are the distinct unit
values of the header and payload segments (deduplicated per segment), and
three undirected edge sets join units whose point-wise mutual information
over sliding windows is strictly positive. Header-header and
payload-payload edges come from the segment sequences; header-payload
edges come from the concatenated sequence, instantiated across segments
only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .ingest import PacketRecord
from .units import UnitSequence, tokenize_packet

SEG_HEADER = 0
SEG_PAYLOAD = 1

EDGE_TYPES = ("hh", "pp", "hp")

GRAPH_CACHE_FORMAT = "unitgraph.graphs"
GRAPH_CACHE_VERSION = 1


class EmptySequence(ValueError):
    """PMI asked over an empty unit sequence."""


@dataclass(frozen=True)
class PmiConfig:
    window_size: int = 5

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError(f"window_size must be >= 2, got {self.window_size}")


@dataclass(eq=False)
class HeteroTrafficGraph:
    bit_width: int
    node_segments: np.ndarray  # (N,) uint8, SEG_HEADER or SEG_PAYLOAD
    node_values: np.ndarray    # (N,) int64 unit values; also the node features
    edges_hh: np.ndarray       # (E,2) int64 node-index pairs, i < j, lexsorted
    edges_pp: np.ndarray
    edges_hp: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.node_values.size)

    def edges(self, kind: str) -> np.ndarray:
        return {"hh": self.edges_hh, "pp": self.edges_pp, "hp": self.edges_hp}[kind]

    def union_edges(self) -> np.ndarray:
        return np.concatenate([self.edges_hh, self.edges_pp, self.edges_hp], axis=0)

    def copy(self) -> "HeteroTrafficGraph":
        return HeteroTrafficGraph(self.bit_width, self.node_segments.copy(),
                                  self.node_values.copy(), self.edges_hh.copy(),
                                  self.edges_pp.copy(), self.edges_hp.copy())


def _empty_edges() -> np.ndarray:
    return np.empty((0, 2), dtype=np.int64)


def _edge_array(pairs: set[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return _empty_edges()
    return np.array(sorted(pairs), dtype=np.int64)


def validate_graph(g: HeteroTrafficGraph) -> None:
    """Raise ValueError when a builder-produced graph breaks its invariants."""
    n = g.num_nodes
    seen = set(zip(g.node_segments.tolist(), g.node_values.tolist()))
    if len(seen) != n:
        raise ValueError("duplicate (segment, value) node")
    if ((g.node_values < 0) | (g.node_values >= 2 ** g.bit_width)).any():
        raise ValueError("node value out of range for bit width")
    for kind in EDGE_TYPES:
        e = g.edges(kind)
        if e.size == 0:
            continue
        if (e < 0).any() or (e >= n).any():
            raise ValueError(f"{kind} edge index out of range")
        if (e[:, 0] == e[:, 1]).any():
            raise ValueError(f"{kind} self-loop")
        segs = g.node_segments[e]
        want = {"hh": (SEG_HEADER, SEG_HEADER), "pp": (SEG_PAYLOAD, SEG_PAYLOAD),
                "hp": (SEG_HEADER, SEG_PAYLOAD)}[kind]
        if kind == "hp":
            ok = (segs.min(axis=1) == SEG_HEADER) & (segs.max(axis=1) == SEG_PAYLOAD)
        else:
            ok = (segs[:, 0] == want[0]) & (segs[:, 1] == want[1])
        if not ok.all():
            raise ValueError(f"{kind} edge joins wrong segments")


# ---------------------------------------------------------------------------
# window counting


def _window_counts(seq: list[int], window: int
                   ) -> tuple[dict[int, int], dict[tuple[int, int], int], int]:
    """Count sliding windows containing each value and each unordered pair.

    The number of windows is max(len - window + 1, 1): sequences shorter
    than the window form a single window spanning the whole sequence.
    """
    n = len(seq)
    num_windows = max(n - window + 1, 1)
    singles: dict[int, int] = {}
    pairs: dict[tuple[int, int], int] = {}
    for start in range(num_windows):
        distinct = sorted(set(seq[start:start + window] if n > window else seq))
        for v in distinct:
            singles[v] = singles.get(v, 0) + 1
        for a, b in combinations(distinct, 2):
            pairs[(a, b)] = pairs.get((a, b), 0) + 1
    return singles, pairs, num_windows


def pmi(seq: list[int], u: int, v: int, cfg: PmiConfig) -> float:
    """Point-wise mutual information of two unit values over sliding windows.

    Returns -inf when the pair never co-occurs in a window (joint count 0).
    """
    if not seq:
        raise EmptySequence("PMI over an empty sequence")
    if u == v:
        raise ValueError("PMI is defined for distinct unit values")
    singles, pairs, num_windows = _window_counts(seq, cfg.window_size)
    if u not in singles or v not in singles:
        raise ValueError("both unit values must occur in the sequence")
    joint = pairs.get((min(u, v), max(u, v)), 0)
    if joint == 0:
        return -math.inf
    # log( (joint/Nw) / ((cu/Nw)(cv/Nw)) )
    return math.log(joint * num_windows / (singles[u] * singles[v]))


def build_segment_edges(seq: list[int], cfg: PmiConfig) -> set[tuple[int, int]]:
    """Distinct value pairs with strictly positive PMI, as (min, max) tuples.

    The threshold is evaluated in exact integer arithmetic
    (joint * num_windows > count_u * count_v), so boundary cases such as
    PMI == 0 are decided without float rounding.
    """
    if not seq:
        return set()
    singles, pairs, num_windows = _window_counts(seq, cfg.window_size)
    return {(a, b) for (a, b), joint in pairs.items()
            if joint * num_windows > singles[a] * singles[b]}


# ---------------------------------------------------------------------------
# graph construction


def build_hetero_graph(units: UnitSequence, cfg: PmiConfig) -> HeteroTrafficGraph:
    """Build one heterogeneous traffic graph from a packet's unit sequences.

    Nodes are ordered header values first, then payload values, each sorted;
    a value occurring in both segments becomes two distinct nodes.
    """
    if not units.header_units or not units.payload_units:
        from .units import DegenerateSegment
        raise DegenerateSegment("graph needs non-empty header and payload units")
    header_vals = sorted(set(units.header_units))
    payload_vals = sorted(set(units.payload_units))
    h_index = {v: i for i, v in enumerate(header_vals)}
    p_index = {v: len(header_vals) + i for i, v in enumerate(payload_vals)}

    segments = np.array([SEG_HEADER] * len(header_vals) + [SEG_PAYLOAD] * len(payload_vals),
                        dtype=np.uint8)
    values = np.array(header_vals + payload_vals, dtype=np.int64)

    hh = {(h_index[a], h_index[b])
          for a, b in build_segment_edges(units.header_units, cfg)}
    pp = {tuple(sorted((p_index[a], p_index[b])))
          for a, b in build_segment_edges(units.payload_units, cfg)}

    # header-payload edges: PMI over the whole sequence, kept only when the
    # pair crosses segments; within-segment pairs are already covered above
    hp: set[tuple[int, int]] = set()
    for a, b in build_segment_edges(units.header_units + units.payload_units, cfg):
        if a in h_index and b in p_index:
            hp.add((h_index[a], p_index[b]))
        if b in h_index and a in p_index:
            hp.add((h_index[b], p_index[a]))

    return HeteroTrafficGraph(units.bit_width, segments, values,
                              _edge_array(hh), _edge_array(pp), _edge_array(hp))


def build_views(pkt: PacketRecord, views: list[int],
                cfg: PmiConfig) -> dict[int, HeteroTrafficGraph]:
    """One heterogeneous graph per configured bit width for one packet."""
    sequences = tokenize_packet(pkt, views)
    return {width: build_hetero_graph(seq, cfg) for width, seq in sequences.items()}


# ---------------------------------------------------------------------------
# debugging / cache IO


def to_dot(g: HeteroTrafficGraph) -> str:
    """Graphviz DOT rendering with the edge type as an attribute."""
    lines = [f'graph traffic_units {{  // {g.bit_width}-bit view']
    for i in range(g.num_nodes):
        seg = "h" if g.node_segments[i] == SEG_HEADER else "p"
        lines.append(f'  n{i} [label="{seg}:{int(g.node_values[i])}"];')
    for kind in EDGE_TYPES:
        for a, b in g.edges(kind).tolist():
            lines.append(f'  n{a} -- n{b} [type="{kind}"];')
    lines.append("}")
    return "\n".join(lines)


def write_graph_cache(path: str | Path,
                      per_flow: list[list[dict[int, HeteroTrafficGraph]]],
                      labels: list[int], cfg: PmiConfig, views: list[int]) -> None:
    """Persist built graphs as versioned, deterministic JSON lines."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(json.dumps({"format": GRAPH_CACHE_FORMAT, "version": GRAPH_CACHE_VERSION,
                             "window": cfg.window_size, "views": list(views)},
                            separators=(",", ":")) + "\n")
        for flow_idx, packets in enumerate(per_flow):
            for pkt_idx, by_view in enumerate(packets):
                for width in views:
                    g = by_view[width]
                    doc = {
                        "flow": flow_idx, "pkt": pkt_idx, "label": labels[flow_idx],
                        "view": width,
                        "segments": g.node_segments.tolist(),
                        "values": g.node_values.tolist(),
                        "hh": g.edges_hh.tolist(), "pp": g.edges_pp.tolist(),
                        "hp": g.edges_hp.tolist(),
                    }
                    fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_graph_cache(path: str | Path) -> tuple[dict, list[dict]]:
    """Load a graph cache; returns (meta, packet records with graphs)."""
    with open(path, "r", encoding="ascii") as fh:
        meta = json.loads(fh.readline())
        if meta.get("format") != GRAPH_CACHE_FORMAT or meta.get("version") != GRAPH_CACHE_VERSION:
            raise ValueError(f"{path}: not a version-{GRAPH_CACHE_VERSION} graph cache")
        records = []
        for line in fh:
            doc = json.loads(line)
            doc["graph"] = HeteroTrafficGraph(
                doc.pop("view"),
                np.array(doc.pop("segments"), dtype=np.uint8),
                np.array(doc.pop("values"), dtype=np.int64),
                *(np.array(doc.pop(k), dtype=np.int64).reshape(-1, 2) for k in EDGE_TYPES))
            records.append(doc)
    return meta, records
