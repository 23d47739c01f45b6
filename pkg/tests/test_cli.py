"""End-to-end CLI flows: synth -> train -> eval, ingest, build, inspect."""
import json

from conftest import make_pcap, tcp_frame
from unitgraph.cli import main
from unitgraph.ingest import read_flow_store


def test_synth_then_train_then_eval(tmp_path, capsys):
    flows = tmp_path / "flows.jsonl"
    ckpt_dir = tmp_path / "ckpt"
    report = tmp_path / "report.json"
    assert main(["synth", "--classes", "2", "--flows-per-class", "6",
                 "--seed", "3", "--out", str(flows)]) == 0
    assert len(read_flow_store(flows)) == 12

    assert main(["train", "--flows", str(flows), "--out", str(ckpt_dir),
                 "--epochs", "1", "--batch-size", "4", "--num-layers", "1",
                 "--embed-dim", "4", "--hidden-dim", "6", "--seed", "0"]) == 0
    assert (ckpt_dir / "best.npz").exists()
    lines = (ckpt_dir / "train_report.jsonl").read_text().strip().splitlines()
    assert len(lines) == 1 and "loss_total" in json.loads(lines[0])

    assert main(["eval", "--ckpt", str(ckpt_dir / "best.npz"),
                 "--flows", str(flows), "--json", str(report)]) == 0
    metrics = json.loads(report.read_text())
    for key in ("flow_accuracy", "flow_macro_f1", "packet_accuracy", "packet_macro_f1"):
        assert 0.0 <= metrics[key] <= 1.0


def test_synth_with_custom_spec_file(tmp_path):
    spec = {
        "num_classes": 2, "flows_per_class": 3, "packets_per_flow": [2, 4],
        "payload_bytes": [10, 14],
        "recipes": [
            {"header_template_hex": "45000028" + "00" * 12,
             "header_random_positions": [5], "payload_vocab": [[1, 2], [3, 4]],
             "noise_rate": 0.0},
            {"header_template_hex": "45000028" + "00" * 12,
             "header_random_positions": [5], "payload_vocab": [[5, 6], [7, 8]],
             "noise_rate": 0.0},
        ],
    }
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / "flows.jsonl"
    assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
    flows = read_flow_store(out)
    assert len(flows) == 6
    assert all(2 <= len(f.packets) <= 4 for f in flows)
    payload_bytes = {b for f in flows if f.label == 0 for p in f.packets
                     for b in p.payload_bytes}
    assert payload_bytes <= {1, 2, 3, 4}


def test_config_file_with_flag_override(tmp_path):
    flows = tmp_path / "flows.jsonl"
    main(["synth", "--classes", "2", "--flows-per-class", "4", "--out", str(flows)])
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("epochs = 5\nbatch_size = 4\nnum_layers = 1\n"
                   "embed_dim = 4\nhidden_dim = 6\nviews = [8]\n")
    out = tmp_path / "ckpt"
    assert main(["train", "--flows", str(flows), "--config", str(cfg),
                 "--out", str(out), "--epochs", "1"]) == 0  # flag wins
    lines = (out / "train_report.jsonl").read_text().strip().splitlines()
    assert len(lines) == 1


def test_ingest_directory(tmp_path, capsys):
    pcap_dir = tmp_path / "captures"
    for cls in ("chat", "video"):
        d = pcap_dir / cls
        d.mkdir(parents=True)
        frames = [(i * 1000, tcp_frame(sport=1000 + i % 2, payload=bytes([i + 1] * 6)))
                  for i in range(6)]
        (d / "sample.pcap").write_bytes(make_pcap(frames))
    out = tmp_path / "flows.jsonl"
    assert main(["ingest", "--pcap-dir", str(pcap_dir), "--out", str(out)]) == 0
    flows = read_flow_store(out)
    assert {f.label for f in flows} == {0, 1}
    printed = capsys.readouterr().out
    assert '"chat": 0' in printed and '"video": 1' in printed


def test_ingest_with_labels_csv(tmp_path):
    pcap_dir = tmp_path / "caps"
    pcap_dir.mkdir()
    (pcap_dir / "a.pcap").write_bytes(make_pcap([(0, tcp_frame(payload=b"xx"))]))
    (pcap_dir / "b.pcap").write_bytes(make_pcap([(0, tcp_frame(payload=b"yy"))]))
    labels = tmp_path / "labels.csv"
    labels.write_text("a.pcap,alpha\nb.pcap,beta\n")
    out = tmp_path / "flows.jsonl"
    assert main(["ingest", "--pcap-dir", str(pcap_dir), "--labels", str(labels),
                 "--out", str(out)]) == 0
    assert len(read_flow_store(out)) == 2


def test_build_and_inspect(tmp_path, capsys):
    flows = tmp_path / "flows.jsonl"
    main(["synth", "--classes", "2", "--flows-per-class", "2", "--out", str(flows)])
    cache = tmp_path / "graphs.bin"
    assert main(["build", "--flows", str(flows), "--views", "4,8",
                 "--window", "5", "--out", str(cache)]) == 0
    assert cache.exists()

    assert main(["inspect", "--flows", str(flows), "--flow", "0", "--pkt", "0",
                 "--units", "--views", "4,8"]) == 0
    out = capsys.readouterr().out
    assert "view 4 header:" in out and "view 8 payload:" in out

    assert main(["inspect", "--flows", str(flows), "--flow", "0", "--pkt", "0",
                 "--dot", "--view", "8"]) == 0
    assert "graph traffic_units" in capsys.readouterr().out


def test_sweep_cli(tmp_path):
    flows = tmp_path / "flows.jsonl"
    main(["synth", "--classes", "2", "--flows-per-class", "5", "--out", str(flows)])
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--flows", str(flows), "--axis", "hetero",
                 "--out", str(out), "--epochs", "1", "--batch-size", "4",
                 "--num-layers", "1", "--embed-dim", "4", "--hidden-dim", "6"]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 rows
