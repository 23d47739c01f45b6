"""Multi-task training: dual classification plus dual-level contrastive terms.

The per-step objective is L_pcls + L_fcls + alpha * L_pcl + beta * L_fcl,
optimized with Adam under linear warmup followed by cosine decay. All
randomness flows from the config seed, so identical configs reproduce
identical runs bit for bit in 64-bit mode.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .graphs import HeteroTrafficGraph, PmiConfig, build_views
from .ingest import TrafficFlow
from .model import ModelConfig, ParamStore, classify, flow_forward_batch, \
    hgnn_forward_packed, init_params, pack_graphs
from .objectives import AugmentConfig, classification_losses, flow_contrastive_loss, \
    packet_contrastive_loss
from .tensor import Tensor, load_params, save_params
from .units import DegenerateSegment


class ClassTooSmall(ValueError):
    """A class has too few flows for a stratified split."""


class NonFiniteLoss(RuntimeError):
    """Training loss became NaN/Inf; message carries the offending batch."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    gradient_accumulation: int = 1
    epochs: int = 20
    lr_max: float = 1e-2
    lr_min: float = 1e-4
    warmup_fraction: float = 0.1
    label_smoothing: float = 0.0
    gnn_dropout: float = 0.0
    lstm_dropout: float = 0.0
    alpha: float = 1.0  # packet-level contrastive weight
    beta: float = 0.5   # flow-level contrastive weight
    seed: int = 0
    views: tuple[int, ...] = (4, 8)
    pmi_window: int = 5
    num_layers: int = 4
    embed_dim: int = 64
    hidden_dim: int = 128
    tie_edge_types: bool = False
    restart_prob: float = 0.8
    walk_target_fraction: float = 0.5
    max_walk_steps_factor: int = 4
    flip_prob: float = 0.3
    packet_drop_prob: float = 0.6
    temperature: float = 0.07
    stop_anchor_grad: bool = False
    grad_clip_norm: float = 0.0  # 0 disables clipping
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must be in [0, 1]")
        if not (self.lr_max >= self.lr_min > 0.0):
            raise ValueError("need lr_max >= lr_min > 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.gradient_accumulation < 1:
            raise ValueError("batch_size, epochs, gradient_accumulation must be >= 1")

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(views=tuple(self.views), num_classes=num_classes,
                           num_layers=self.num_layers, embed_dim=self.embed_dim,
                           hidden_dim=self.hidden_dim, gnn_dropout=self.gnn_dropout,
                           lstm_dropout=self.lstm_dropout, tie_edge_types=self.tie_edge_types)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(restart_prob=self.restart_prob,
                             walk_target_fraction=self.walk_target_fraction,
                             max_walk_steps_factor=self.max_walk_steps_factor,
                             flip_prob=self.flip_prob,
                             packet_drop_prob=self.packet_drop_prob,
                             temperature=self.temperature)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "views" in values:
            values = {**values, "views": tuple(int(v) for v in values["views"])}
        return cls(**values)


def parse_flat_config(text: str) -> dict:
    """Parse a flat `key = value` config file (ints, floats, bools, lists)."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value.strip('"')
    return out


def load_train_config(path: str | Path, overrides: dict | None = None) -> TrainConfig:
    values = parse_flat_config(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class PreparedFlow:
    label: int
    flow_key: str
    graphs: list[dict[int, HeteroTrafficGraph]]  # one dict per packet

    @property
    def num_packets(self) -> int:
        return len(self.graphs)


def prepare_flows(flows: list[TrafficFlow], views: tuple[int, ...],
                  pmi_window: int) -> list[PreparedFlow]:
    """Tokenize and build per-view graphs once per packet.

    Packets that fail tokenization at any configured view are dropped (the
    views must stay aligned); flows left without packets are dropped too.
    """
    cfg = PmiConfig(pmi_window)
    out: list[PreparedFlow] = []
    for flow in flows:
        packet_graphs = []
        for pkt in flow.packets:
            try:
                packet_graphs.append(build_views(pkt, list(views), cfg))
            except DegenerateSegment:
                continue
        if packet_graphs:
            out.append(PreparedFlow(flow.label, flow.flow_key, packet_graphs))
    return out


def stratified_split(flows: list[TrafficFlow], seed: int, train_fraction: float = 0.9
                     ) -> tuple[list[TrafficFlow], list[TrafficFlow]]:
    """Per-class split at flow granularity; every class needs >= 2 flows."""
    by_class: dict[int, list[int]] = {}
    for i, flow in enumerate(flows):
        by_class.setdefault(flow.label, []).append(i)
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in sorted(by_class):
        members = np.array(by_class[label])
        if members.size < 2:
            raise ClassTooSmall(f"class {label} has {members.size} flow(s), needs >= 2")
        perm = rng.permutation(members.size)
        n_train = min(int(math.floor(train_fraction * members.size)), members.size - 1)
        n_train = max(n_train, 1)
        train_idx.extend(members[perm[:n_train]].tolist())
        test_idx.extend(members[perm[n_train:]].tolist())
    return [flows[i] for i in sorted(train_idx)], [flows[i] for i in sorted(test_idx)]


# ---------------------------------------------------------------------------
# schedule and optimizer


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_min at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.lr_max * step / warm
    span = max(total_steps - 1 - warm, 1e-12)
    t = min((step - warm) / span, 1.0)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * t))


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


class AdamOptimizer:
    """Adam with external per-step learning rate."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.steps = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.steps
        bias2 = 1.0 - b2 ** self.steps
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# batch assembly and forward


@dataclass
class _Batch:
    flows: list[PreparedFlow]
    flow_labels: np.ndarray
    packet_labels: np.ndarray
    graphs_by_view: dict[int, list[HeteroTrafficGraph]]
    flow_index: np.ndarray  # (B_f, T_max), -1 padded, rows into the packet table
    lengths: np.ndarray


def _assemble(batch_flows: list[PreparedFlow], views: tuple[int, ...]) -> _Batch:
    flow_labels = np.array([f.label for f in batch_flows])
    packet_labels = np.array([f.label for f in batch_flows for _ in f.graphs])
    graphs_by_view = {v: [pkt[v] for f in batch_flows for pkt in f.graphs] for v in views}
    lengths = np.array([f.num_packets for f in batch_flows])
    t_max = int(lengths.max())
    flow_index = np.full((len(batch_flows), t_max), -1, dtype=np.int64)
    row = 0
    for i, f in enumerate(batch_flows):
        flow_index[i, :f.num_packets] = np.arange(row, row + f.num_packets)
        row += f.num_packets
    return _Batch(batch_flows, flow_labels, packet_labels, graphs_by_view,
                  flow_index, lengths)


def _batch_losses(batch: _Batch, params: ParamStore, cfg: TrainConfig,
                  model_cfg: ModelConfig, rng: np.random.Generator,
                  training: bool) -> tuple[Tensor, dict[str, float]]:
    aug = cfg.augment_config()
    packet_emb: dict[int, Tensor] = {}
    flow_emb: dict[int, Tensor] = {}
    for view in model_cfg.views:
        packed = pack_graphs(batch.graphs_by_view[view],
                             tie_edge_types=model_cfg.tie_edge_types)
        packet_emb[view], _ = hgnn_forward_packed(packed, params, model_cfg, training, rng)
        flow_emb[view] = flow_forward_batch(packet_emb[view], batch.flow_index,
                                            batch.lengths, view, params, model_cfg,
                                            training, rng)
    flow_logits = classify(flow_emb, params, model_cfg, "flow")
    packet_logits = classify(packet_emb, params, model_cfg, "packet")
    l_fcls, l_pcls = classification_losses(flow_logits, packet_logits,
                                           batch.flow_labels, batch.packet_labels,
                                           cfg.label_smoothing)
    total = T.add(l_pcls, l_fcls)
    l_pcl_val = 0.0
    if cfg.alpha > 0.0:
        l_pcl = packet_contrastive_loss(batch.graphs_by_view, packet_emb,
                                        batch.packet_labels, params, model_cfg, aug,
                                        rng, cfg.stop_anchor_grad)
        total = T.add(total, T.scale(l_pcl, cfg.alpha))
        l_pcl_val = l_pcl.item()
    l_fcl_val = 0.0
    if cfg.beta > 0.0:
        l_fcl = flow_contrastive_loss(packet_emb, batch.flow_index, batch.lengths,
                                      flow_emb, batch.flow_labels, params, model_cfg,
                                      aug, rng, cfg.stop_anchor_grad)
        total = T.add(total, T.scale(l_fcl, cfg.beta))
        l_fcl_val = l_fcl.item()
    parts = {"loss_pcls": l_pcls.item(), "loss_fcls": l_fcls.item(),
             "loss_pcl": l_pcl_val, "loss_fcl": l_fcl_val, "loss_total": total.item()}
    return total, parts


# ---------------------------------------------------------------------------
# metrics


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, float]:
    """Accuracy and macro F1; classes absent from y_true are excluded."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    present = np.unique(y_true)
    f1s = []
    for c in present:
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return {"accuracy": float((y_true == y_pred).mean()),
            "macro_f1": float(np.mean(f1s))}


def evaluate(params: ParamStore, flows: list[PreparedFlow], cfg: TrainConfig,
             num_classes: int, batch_size: int = 64) -> dict[str, float]:
    """Held-out metrics: flow/packet accuracy and macro F1."""
    model_cfg = cfg.model_config(num_classes)
    flow_true, flow_pred, pkt_true, pkt_pred = [], [], [], []
    with T.no_grad():
        for lo in range(0, len(flows), batch_size):
            batch = _assemble(flows[lo:lo + batch_size], model_cfg.views)
            packet_emb: dict[int, Tensor] = {}
            flow_emb: dict[int, Tensor] = {}
            for view in model_cfg.views:
                packed = pack_graphs(batch.graphs_by_view[view],
                                     tie_edge_types=model_cfg.tie_edge_types)
                packet_emb[view], _ = hgnn_forward_packed(packed, params, model_cfg)
                flow_emb[view] = flow_forward_batch(packet_emb[view], batch.flow_index,
                                                    batch.lengths, view, params, model_cfg)
            flow_pred.extend(classify(flow_emb, params, model_cfg, "flow")
                             .data.argmax(axis=1).tolist())
            pkt_pred.extend(classify(packet_emb, params, model_cfg, "packet")
                            .data.argmax(axis=1).tolist())
            flow_true.extend(batch.flow_labels.tolist())
            pkt_true.extend(batch.packet_labels.tolist())
    fm = classification_metrics(np.array(flow_true), np.array(flow_pred))
    pm = classification_metrics(np.array(pkt_true), np.array(pkt_pred))
    return {"flow_accuracy": fm["accuracy"], "flow_macro_f1": fm["macro_f1"],
            "packet_accuracy": pm["accuracy"], "packet_macro_f1": pm["macro_f1"]}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_flow_macro_f1: float = -1.0
    final_metrics: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_json_lines(self) -> str:
        return "\n".join(json.dumps(row, separators=(",", ":")) for row in self.epochs)


@dataclass
class TrainResult:
    params: ParamStore        # best checkpoint by held-out flow macro F1
    final_params: ParamStore
    report: TrainReport
    num_classes: int


def train(train_flows: list[TrafficFlow], eval_flows: list[TrafficFlow],
          cfg: TrainConfig) -> TrainResult:
    """Train on pre-split flows; checkpoints the best held-out flow macro F1."""
    started = time.monotonic()
    prepared_train = prepare_flows(train_flows, cfg.views, cfg.pmi_window)
    prepared_eval = prepare_flows(eval_flows, cfg.views, cfg.pmi_window)
    if not prepared_train or not prepared_eval:
        raise ValueError("empty train or eval split after preparation")
    num_classes = int(max(f.label for f in prepared_train + prepared_eval)) + 1
    if len({f.label for f in prepared_train}) < 2:
        raise ValueError("training needs at least 2 classes")
    model_cfg = cfg.model_config(num_classes)
    params = init_params(model_cfg, seed=cfg.seed)
    optimizer = AdamOptimizer(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    n = len(prepared_train)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    steps_per_epoch = math.ceil(batches_per_epoch / cfg.gradient_accumulation)
    total_steps = cfg.epochs * steps_per_epoch

    report = TrainReport()
    best = (-1.0, -1)
    best_params = params.copy()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 23, epoch]).permutation(n)
        batch_slices = [order[lo:lo + cfg.batch_size] for lo in range(0, n, cfg.batch_size)]
        if len(batch_slices) > 1 and batch_slices[-1].size == 1:
            batch_slices[-2] = np.concatenate([batch_slices[-2], batch_slices[-1]])
            batch_slices.pop()
        sums = {k: 0.0 for k in ("loss_pcls", "loss_fcls", "loss_pcl", "loss_fcl", "loss_total")}
        epoch_t0 = time.monotonic()
        for group_idx in range(0, len(batch_slices), cfg.gradient_accumulation):
            group = batch_slices[group_idx:group_idx + cfg.gradient_accumulation]
            params.zero_grad()
            for offset, idx in enumerate(group):
                batch = _assemble([prepared_train[i] for i in idx], cfg.views)
                rng = np.random.default_rng([cfg.seed, 7, epoch, group_idx + offset])
                total, parts = _batch_losses(batch, params, cfg, model_cfg, rng, True)
                if not math.isfinite(parts["loss_total"]):
                    raise NonFiniteLoss(
                        f"non-finite loss at epoch {epoch}: {parts}; "
                        f"flows {[f.flow_key for f in batch.flows]}")
                T.scale(total, 1.0 / len(group)).backward()
                for k in sums:
                    sums[k] += parts[k]
            if cfg.grad_clip_norm > 0.0:
                clip_gradients(params, cfg.grad_clip_norm)
            optimizer.step(lr_at(min(optimizer.steps, total_steps - 1), total_steps, cfg))
        metrics = evaluate(params, prepared_eval, cfg, num_classes)
        row = {"epoch": epoch, **{k: sums[k] / len(batch_slices) for k in sums},
               **metrics, "seconds": time.monotonic() - epoch_t0}
        report.epochs.append(row)
        if metrics["flow_macro_f1"] > best[0]:
            best = (metrics["flow_macro_f1"], epoch)
            best_params = params.copy()
    report.best_flow_macro_f1, report.best_epoch = best
    report.final_metrics = {k: report.epochs[-1][k]
                            for k in ("flow_accuracy", "flow_macro_f1",
                                      "packet_accuracy", "packet_macro_f1")}
    report.wall_clock_s = time.monotonic() - started
    return TrainResult(best_params, params, report, num_classes)


def save_checkpoint(result: TrainResult, cfg: TrainConfig, path: str | Path) -> None:
    save_params(result.params, str(path), meta={
        "train_config": {**asdict(cfg), "views": list(cfg.views)},
        "num_classes": result.num_classes})


def load_checkpoint(path: str | Path) -> tuple[ParamStore, TrainConfig, int]:
    params, meta = load_params(str(path))
    cfg = TrainConfig.from_dict(meta["train_config"])
    return params, cfg, int(meta["num_classes"])
