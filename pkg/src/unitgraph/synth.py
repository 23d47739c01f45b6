"""Synthetic labeled traffic with controllable class-discriminative structure.

The default recipes hide the class signal in byte co-occurrence, at two
depths. First, payload bytes come from one shared 16-byte alphabet (uniform
marginals) but each class pairs the alphabet differently; a packet draws a
few pairs from its class vocabulary and repeats each as a short run, so the
bytes present in one packet and the PMI edges between them encode the
pairing while single-byte histograms stay class-neutral. Second, classes
that share a pairing differ only in whether two marker bytes sit at the end
of the header or at the start of the payload: the surrounding value sets
match, so that distinction is carried almost entirely by the h-h / p-p /
h-p edge types. The alphabet uses only four distinct nibbles, which keeps
the 4-bit view of every class nearly identical. Headers share a common
template with a few per-packet random positions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .ingest import BWD, FWD, PacketRecord, TrafficFlow
from .training import TrainConfig, evaluate, prepare_flows, stratified_split, train

_NIBBLES = (0x3, 0x5, 0xA, 0xC)
_ALPHABET = tuple((a << 4) | b for a in _NIBBLES for b in _NIBBLES)

# trimmed-header template: 12 bytes of address-less IPv4 + 4 bytes of
# port-less UDP, reusing few distinct byte values so header nodes stay
# scarce and class-neutral. Slots 14-15 are the marker slots; their default
# value 0x14 also fills slots 10-13 so that (a) overwriting them never
# removes a value from the node set and (b) the two marker placements see
# the same neighbor VALUE sets within one PMI window of the boundary. The
# random byte at slot 12 sits inside the boundary window on purpose: it
# randomizes co-occurrence counts there, so edge EXISTENCE around the
# markers is noisy while the edge TYPES (which segment holds the markers)
# stay exact.
_HEADER_TEMPLATE = bytes([
    0x45, 0x00, 0x00, 0x28, 0x00, 0x00, 0x40, 0x00, 0x11, 0x00, 0x14, 0x14,
    0x00, 0x14, 0x14, 0x14,
])
_HEADER_RANDOM_POSITIONS = (5, 9, 12)

# marker bytes used by the default recipes; written into the header tail or
# prepended to the payload, i.e. around the same stream position, so mainly
# the edge types around them separate the two placements
_MARKERS = (0x66, 0x99)
_MARKER_SLOTS = (14, 15)


@dataclass(frozen=True)
class ClassRecipe:
    header_template: bytes
    header_random_positions: tuple[int, ...]
    payload_vocab: tuple[tuple[int, ...], ...]  # n-grams of byte values
    noise_rate: float
    run_repeats: int = 3  # consecutive repetitions of each drawn n-gram
    header_markers: tuple[int, ...] = ()   # bytes written into the marker slots
    payload_markers: tuple[int, ...] = ()  # bytes prepended to the payload
    marker_slots: tuple[int, ...] = _MARKER_SLOTS

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        if not self.payload_vocab:
            raise ValueError("payload vocabulary must be non-empty")
        if self.run_repeats < 1:
            raise ValueError("run_repeats must be >= 1")
        if self.header_markers and len(self.header_markers) > len(self.marker_slots):
            raise ValueError("more header markers than marker slots")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    flows_per_class: int
    packets_per_flow: tuple[int, int]
    payload_bytes: tuple[int, int]
    recipes: tuple[ClassRecipe, ...]

    def __post_init__(self):
        if len(self.recipes) != self.num_classes:
            raise ValueError("one recipe per class required")
        if len(set(self.recipes)) != self.num_classes:
            raise ValueError("recipes must be pairwise distinct")


def default_spec(num_classes: int = 3, flows_per_class: int = 100,
                 packets_per_flow: tuple[int, int] = (5, 10),
                 payload_bytes: tuple[int, int] = (24, 36),
                 noise_rate: float = 0.02) -> SynthSpec:
    """Co-occurrence-coded classes over a shared alphabet (see module doc).

    Consecutive class pairs (2k+1, 2k+2) share their payload pairing and
    differ only in the marker placement (header end vs payload start), so
    that part of the signal is carried purely by edge types.
    """
    n = len(_ALPHABET)
    recipes = []
    for c in range(num_classes):
        # pair-sharing stride: classes 1 and 2 (then 3 and 4, ...) use the
        # same pairing; odd strides are coprime with the 16-byte alphabet
        stride = 3 + 2 * ((c + 1) // 2)
        vocab = tuple((_ALPHABET[k], _ALPHABET[(k + stride) % n]) for k in range(n))
        if c >= 1 and c % 2 == 0:
            markers = {"header_markers": (), "payload_markers": _MARKERS}
        else:
            markers = {"header_markers": _MARKERS, "payload_markers": ()}
        recipes.append(ClassRecipe(_HEADER_TEMPLATE, _HEADER_RANDOM_POSITIONS,
                                   vocab, noise_rate, **markers))
    return SynthSpec(num_classes, flows_per_class, packets_per_flow,
                     payload_bytes, tuple(recipes))


def benchmark_config(seed: int = 7) -> TrainConfig:
    """Desk-scale benchmark configuration: paper defaults scaled to 10
    epochs, with the learning-rate pair and gradient clipping tuned for the
    synthetic corpus (hyperparameters are per-dataset, as in the appendix
    table; the anchor-sum contrastive terms need the smaller step)."""
    return TrainConfig(epochs=10, lr_max=3e-3, lr_min=3e-5,
                       grad_clip_norm=5.0, seed=seed)


def disjoint_spec(num_classes: int = 3, flows_per_class: int = 20,
                  packets_per_flow: tuple[int, int] = (3, 6),
                  payload_bytes: tuple[int, int] = (16, 24)) -> SynthSpec:
    """Noise-free classes with disjoint byte alphabets (marginally separable)."""
    recipes = []
    for c in range(num_classes):
        lo = 32 + 16 * c
        vocab = tuple((b, b + 1) for b in range(lo, lo + 14, 2))
        recipes.append(ClassRecipe(_HEADER_TEMPLATE, _HEADER_RANDOM_POSITIONS,
                                   vocab, 0.0))
    return SynthSpec(num_classes, flows_per_class, packets_per_flow,
                     payload_bytes, tuple(recipes))


def spec_from_json(path: str | Path) -> SynthSpec:
    """Load a custom SynthSpec from JSON.

    Schema: {"num_classes", "flows_per_class", "packets_per_flow": [lo, hi],
    "payload_bytes": [lo, hi], "recipes": [{"header_template_hex",
    "header_random_positions", "payload_vocab" (lists of byte values),
    "noise_rate", optional "run_repeats", "header_markers",
    "payload_markers", "marker_slots"}, ...]}.
    """
    doc = json.loads(Path(path).read_text())
    recipes = []
    for r in doc["recipes"]:
        recipes.append(ClassRecipe(
            header_template=bytes.fromhex(r["header_template_hex"]),
            header_random_positions=tuple(r["header_random_positions"]),
            payload_vocab=tuple(tuple(g) for g in r["payload_vocab"]),
            noise_rate=float(r["noise_rate"]),
            run_repeats=int(r.get("run_repeats", 3)),
            header_markers=tuple(r.get("header_markers", ())),
            payload_markers=tuple(r.get("payload_markers", ())),
            marker_slots=tuple(r.get("marker_slots", _MARKER_SLOTS))))
    return SynthSpec(int(doc["num_classes"]), int(doc["flows_per_class"]),
                     tuple(doc["packets_per_flow"]), tuple(doc["payload_bytes"]),
                     tuple(recipes))


def _payload(recipe: ClassRecipe, target_len: int, rng: np.random.Generator) -> bytes:
    out: list[int] = list(recipe.payload_markers)
    vocab = recipe.payload_vocab
    while len(out) < target_len:
        gram = vocab[int(rng.integers(len(vocab)))]
        out.extend(gram * recipe.run_repeats)
    if recipe.noise_rate > 0.0:
        noisy = rng.random(len(out)) < recipe.noise_rate
        for i in np.flatnonzero(noisy):
            out[i] = int(rng.integers(256))
    return bytes(out)


def _header(recipe: ClassRecipe, rng: np.random.Generator) -> bytes:
    header = bytearray(recipe.header_template)
    for pos in recipe.header_random_positions:
        header[pos] = int(rng.integers(256))
    for slot, value in zip(recipe.marker_slots, recipe.header_markers):
        header[slot] = value
    return bytes(header)


def generate(spec: SynthSpec, seed: int) -> list[TrafficFlow]:
    """Deterministic synthetic flows satisfying every ingest invariant."""
    flows: list[TrafficFlow] = []
    for label in range(spec.num_classes):
        recipe = spec.recipes[label]
        for i in range(spec.flows_per_class):
            rng = np.random.default_rng([seed, label, i])
            n_packets = int(rng.integers(spec.packets_per_flow[0],
                                         spec.packets_per_flow[1] + 1))
            ts = int(rng.integers(1_600_000_000_000_000, 1_700_000_000_000_000))
            packets = []
            for p in range(n_packets):
                target = int(rng.integers(spec.payload_bytes[0], spec.payload_bytes[1] + 1))
                direction = FWD if p == 0 or rng.random() < 0.5 else BWD
                packets.append(PacketRecord(_header(recipe, rng),
                                            _payload(recipe, target, rng),
                                            direction, ts))
                ts += int(rng.integers(1_000, 200_000))
            flows.append(TrafficFlow(f"synth-c{label}-f{i}", packets, label))
    return flows


# ---------------------------------------------------------------------------
# ablation harness


SWEEP_AXES = ("views", "unit_pairs", "hetero", "alpha", "beta")


def ablation_sweep(flows: list[TrafficFlow], base_cfg: TrainConfig, axis: str,
                   values: list | None = None) -> list[dict]:
    """Train and evaluate once per sweep point; all points share the seed.

    Axes: single views {2,4,6,8,10}, all C(5,2) view pairs, heterogeneous
    vs collapsed edge types, and the two contrastive weights.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}")
    if values is None:
        values = {
            "views": [(2,), (4,), (6,), (8,), (10,)],
            "unit_pairs": [tuple(p) for p in combinations((2, 4, 6, 8, 10), 2)],
            "hetero": [False, True],
            "alpha": [0.0, 0.25, 0.5, 0.75, 1.0],
            "beta": [0.0, 0.25, 0.5, 0.75, 1.0],
        }[axis]
    train_flows, test_flows = stratified_split(flows, seed=base_cfg.seed)
    rows: list[dict] = []
    for value in values:
        if axis in ("views", "unit_pairs"):
            cfg = replace(base_cfg, views=tuple(value))
            setting = {"views": ",".join(map(str, value))}
        elif axis == "hetero":
            cfg = replace(base_cfg, tie_edge_types=bool(value))
            setting = {"hetero": "collapsed" if value else "typed"}
        else:
            cfg = replace(base_cfg, **{axis: float(value)})
            setting = {axis: float(value)}
        result = train(train_flows, test_flows, cfg)
        prepared = prepare_flows(test_flows, cfg.views, cfg.pmi_window)
        metrics = evaluate(result.params, prepared, cfg, result.num_classes)
        rows.append({**setting, **metrics,
                     "best_epoch": result.report.best_epoch,
                     "wall_clock_s": round(result.report.wall_clock_s, 3)})
    return rows


def write_sweep(rows: list[dict], path: str | Path) -> None:
    """Persist sweep rows as .csv or .json chosen by file extension."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    else:
        path.write_text(json.dumps(rows, indent=2) + "\n")
