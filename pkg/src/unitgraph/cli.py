"""Command-line entry points for the traffic-unit graph pipeline."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .graphs import PmiConfig, build_views, to_dot, write_graph_cache
from .ingest import ingest_directory, read_flow_store, write_flow_store
from .synth import ablation_sweep, default_spec, generate, spec_from_json, write_sweep
from .training import TrainConfig, evaluate, load_checkpoint, load_train_config, \
    prepare_flows, save_checkpoint, stratified_split, train
from .units import tokenize_packet


def _parse_views(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _cmd_ingest(args) -> int:
    flows, classes, report = ingest_directory(args.pcap_dir, args.labels, args.block_seconds)
    write_flow_store(flows, args.out)
    print(f"wrote {len(flows)} flows to {args.out}")
    print(f"classes: {json.dumps(classes)}")
    print(f"report: {json.dumps(report.as_dict())}")
    return 0


def _cmd_synth(args) -> int:
    if args.spec:
        spec = spec_from_json(args.spec)
    else:
        spec = default_spec(num_classes=args.classes, flows_per_class=args.flows_per_class)
    flows = generate(spec, seed=args.seed)
    write_flow_store(flows, args.out)
    print(f"wrote {len(flows)} flows ({spec.num_classes} classes) to {args.out}")
    return 0


def _cmd_build(args) -> int:
    flows = read_flow_store(args.flows)
    views = list(_parse_views(args.views))
    cfg = PmiConfig(args.window)
    per_flow = [[build_views(p, views, cfg) for p in f.packets] for f in flows]
    write_graph_cache(args.out, per_flow, [f.label for f in flows], cfg, views)
    graphs = sum(len(p) for p in per_flow) * len(views)
    print(f"wrote {graphs} graphs to {args.out}")
    return 0


def _cmd_inspect(args) -> int:
    flows = read_flow_store(args.flows)
    pkt = flows[args.flow].packets[args.pkt]
    if args.dot:
        graph = build_views(pkt, [args.view], PmiConfig(args.window))[args.view]
        print(to_dot(graph))
    else:
        for width, seq in tokenize_packet(pkt, list(_parse_views(args.views))).items():
            print(f"view {width} header: {' '.join(map(str, seq.header_units))}")
            print(f"view {width} payload: {' '.join(map(str, seq.payload_units))}")
    return 0


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "views":
            parser.add_argument(flag, type=_parse_views, default=None)
        elif f.type == "bool":
            parser.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"),
                                default=None)
        elif f.type == "int":
            parser.add_argument(flag, type=int, default=None)
        else:
            parser.add_argument(flag, type=float, default=None)


def _overrides(args) -> dict:
    return {f.name: getattr(args, f.name) for f in fields(TrainConfig)
            if getattr(args, f.name, None) is not None}


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config, _overrides(args))
    flows = read_flow_store(args.flows)
    train_flows, test_flows = stratified_split(flows, seed=cfg.seed)
    result = train(train_flows, test_flows, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result, cfg, out / "best.npz")
    (out / "train_report.jsonl").write_text(result.report.to_json_lines() + "\n")
    print(f"best epoch {result.report.best_epoch}: "
          f"flow macro-F1 {result.report.best_flow_macro_f1:.4f}")
    print(f"final: {json.dumps(result.report.final_metrics)}")
    print(f"checkpoint: {out / 'best.npz'}")
    return 0


def _cmd_eval(args) -> int:
    params, cfg, num_classes = load_checkpoint(args.ckpt)
    flows = read_flow_store(args.flows)
    prepared = prepare_flows(flows, cfg.views, cfg.pmi_window)
    metrics = evaluate(params, prepared, cfg, num_classes)
    text = json.dumps(metrics, indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(text)
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_train_config(args.config, _overrides(args))
    flows = read_flow_store(args.flows)
    rows = ablation_sweep(flows, cfg, args.axis)
    write_sweep(rows, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitgraph",
                                     description="Traffic-unit graph classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse pcaps into a labeled flow store")
    p.add_argument("--pcap-dir", required=True)
    p.add_argument("--labels", default=None, help="CSV of filename,label rows")
    p.add_argument("--block-seconds", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate synthetic labeled flows")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--flows-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--spec", default=None, help="JSON file with custom recipes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build", help="precompute traffic graphs for a flow store")
    p.add_argument("--flows", required=True)
    p.add_argument("--views", default="4,8")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("inspect", help="print unit sequences or a graph as DOT")
    p.add_argument("--flows", required=True)
    p.add_argument("--flow", type=int, required=True)
    p.add_argument("--pkt", type=int, required=True)
    p.add_argument("--units", action="store_true")
    p.add_argument("--views", default="4,8")
    p.add_argument("--dot", action="store_true")
    p.add_argument("--view", type=int, default=8)
    p.add_argument("--window", type=int, default=5)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("train", help="train on a flow store (internal 9:1 split)")
    p.add_argument("--flows", required=True)
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--out", required=True)
    _add_config_overrides(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a flow store")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--flows", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--axis", required=True,
                   choices=("views", "unit_pairs", "hetero", "alpha", "beta"))
    p.add_argument("--out", required=True)
    _add_config_overrides(p)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
