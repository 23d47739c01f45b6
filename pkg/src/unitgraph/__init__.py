"""Encrypted-traffic classification with multi-view heterogeneous unit graphs."""

from .graphs import HeteroTrafficGraph, PmiConfig, build_hetero_graph, \
    build_segment_edges, build_views, pmi
from .ingest import PacketRecord, RawCapturePacket, TrafficFlow, anonymize, \
    assemble_flows, parse_pcap, read_flow_store, write_flow_store
from .model import ModelConfig, hgnn_forward, init_params
from .objectives import AugmentConfig, ContrastiveBatch, augment_feature_flip, \
    augment_random_walk, scl_loss
from .synth import SynthSpec, ablation_sweep, default_spec, generate
from .tensor import ParamStore, Tensor, grad_check
from .training import TrainConfig, TrainReport, evaluate, lr_at, stratified_split, train
from .units import UnitSequence, tokenize, tokenize_packet

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ContrastiveBatch", "HeteroTrafficGraph", "ModelConfig",
    "PacketRecord", "ParamStore", "PmiConfig", "RawCapturePacket", "SynthSpec",
    "Tensor", "TrafficFlow", "TrainConfig", "TrainReport", "UnitSequence",
    "ablation_sweep", "anonymize", "assemble_flows", "augment_feature_flip",
    "augment_random_walk", "build_hetero_graph", "build_segment_edges",
    "build_views", "default_spec", "evaluate", "generate", "grad_check",
    "hgnn_forward", "init_params", "lr_at", "parse_pcap", "pmi",
    "read_flow_store", "scl_loss", "stratified_split", "tokenize",
    "tokenize_packet", "train", "write_flow_store",
]
