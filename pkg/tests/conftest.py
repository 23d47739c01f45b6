"""Shared fixture builders: hand-made frames, pcap bytes, tiny configs."""
from __future__ import annotations

import struct

import numpy as np
import pytest

from unitgraph.graphs import HeteroTrafficGraph, PmiConfig, build_views
from unitgraph.ingest import PacketRecord
from unitgraph.model import ModelConfig, init_params


def ip_bytes(dotted: str) -> bytes:
    return bytes(int(p) for p in dotted.split("."))


def make_eth(payload: bytes, ethertype: int = 0x0800) -> bytes:
    return b"\xaa" * 6 + b"\xbb" * 6 + struct.pack(">H", ethertype) + payload


def make_ipv4(proto: int, src: str, dst: str, body: bytes,
              options: bytes = b"") -> bytes:
    ihl = 20 + len(options)
    total = ihl + len(body)
    header = struct.pack(">BBHHHBBH", 0x40 | (ihl // 4), 0, total, 0x1234,
                         0x4000, 64, proto, 0) + ip_bytes(src) + ip_bytes(dst) + options
    return header + body


def make_tcp(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack(">HHIIBBHHH", sport, dport, 1000, 2000, 0x50, 0x18,
                       8192, 0, 0) + payload


def make_udp(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def tcp_frame(src: str = "10.0.0.1", dst: str = "10.0.0.2", sport: int = 1234,
              dport: int = 80, payload: bytes = b"data") -> bytes:
    return make_eth(make_ipv4(6, src, dst, make_tcp(sport, dport, payload)))


def udp_frame(src: str = "10.0.0.1", dst: str = "10.0.0.2", sport: int = 1234,
              dport: int = 53, payload: bytes = b"data") -> bytes:
    return make_eth(make_ipv4(17, src, dst, make_udp(sport, dport, payload)))


def make_pcap(records: list[tuple[int, bytes]], endian: str = ">",
              network: int = 1, snaplen: int = 65535) -> bytes:
    """records: list of (timestamp_us, frame_bytes)."""
    out = struct.pack(endian + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, snaplen, network)
    for ts_us, frame in records:
        out += struct.pack(endian + "IIII", ts_us // 1_000_000, ts_us % 1_000_000,
                           len(frame), len(frame))
        out += frame
    return out


def random_graph(rng: np.random.Generator, bit_width: int = 4,
                 max_nodes: int = 8) -> HeteroTrafficGraph:
    """A random but invariant-respecting heterogeneous graph."""
    vocab = 2 ** bit_width
    cap = min(max_nodes, vocab + 1)
    n_h = int(rng.integers(1, cap))
    n_p = int(rng.integers(1, cap))
    h_vals = sorted(rng.choice(vocab, size=n_h, replace=False).tolist())
    p_vals = sorted(rng.choice(vocab, size=n_p, replace=False).tolist())
    n = n_h + n_p
    segments = np.array([0] * n_h + [1] * n_p, dtype=np.uint8)
    values = np.array(h_vals + p_vals, dtype=np.int64)

    def sample_edges(rows, cols):
        pairs = {(a, b) for a in rows for b in cols
                 if a < b and rng.random() < 0.4}
        if not pairs:
            return np.empty((0, 2), dtype=np.int64)
        return np.array(sorted(pairs), dtype=np.int64)

    hh = sample_edges(range(n_h), range(n_h))
    pp = sample_edges(range(n_h, n), range(n_h, n))
    hp = sample_edges(range(n_h), range(n_h, n))
    return HeteroTrafficGraph(bit_width, segments, values, hh, pp, hp)


def random_packet(rng: np.random.Generator, header_len: int = 12,
                  payload_len: int = 10) -> PacketRecord:
    return PacketRecord(bytes(rng.integers(0, 256, header_len, dtype=np.uint8)),
                        bytes(rng.integers(0, 256, payload_len, dtype=np.uint8)),
                        "fwd", 0)


@pytest.fixture
def tiny_model():
    """Small two-view model plus a packed-ready batch of random graphs."""
    cfg = ModelConfig(views=(4, 8), num_classes=3, num_layers=2,
                      embed_dim=6, hidden_dim=8)
    params = init_params(cfg, seed=5)
    rng = np.random.default_rng(42)
    pmi = PmiConfig(5)
    packets = [random_packet(rng, payload_len=int(rng.integers(6, 14)))
               for _ in range(6)]
    graphs = [build_views(p, [4, 8], pmi) for p in packets]
    return cfg, params, graphs
