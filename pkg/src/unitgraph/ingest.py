"""Packet capture ingestion: pcap parsing, anonymization, flow assembly.

Only classic pcap (both byte orders) with Ethernet link type is accepted.
Anonymization deletes the Ethernet header, the IPv4 source/destination
addresses, and the TCP/UDP port bytes outright, so no model input can carry
endpoint identity. Flows are bidirectional 5-tuples capped at 15 packets.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1

MAX_FLOW_PACKETS = 15
MAX_RAW_FLOW_LENGTH = 10000

FWD = "fwd"
BWD = "bwd"


class BadMagic(ValueError):
    """File does not start with a classic-pcap magic number."""


class Truncated(ValueError):
    """A pcap record header or body is shorter than declared."""


class UnsupportedLinkType(ValueError):
    """Capture link type is not Ethernet."""


class MalformedHeader(ValueError):
    """Frame length fields are inconsistent with the frame size."""


class SchemaViolation(ValueError):
    """A flow-store line does not match the JSON-lines schema."""


@dataclass(frozen=True)
class RawCapturePacket:
    timestamp_us: int
    link_bytes: bytes
    orig_len: int


@dataclass(frozen=True)
class PacketRecord:
    header_bytes: bytes
    payload_bytes: bytes
    direction: str  # FWD or BWD
    timestamp_us: int


@dataclass
class TrafficFlow:
    flow_key: str
    packets: list[PacketRecord]
    label: int


@dataclass
class IngestReport:
    frames: int = 0
    kept: int = 0
    skipped_non_ipv4: int = 0
    skipped_non_tcp_udp: int = 0
    skipped_empty_payload: int = 0
    malformed: int = 0
    flows: int = 0
    dropped_overlong_flows: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def validate_flow(flow: TrafficFlow) -> None:
    """Raise ValueError when a flow violates the record invariants."""
    if not isinstance(flow.label, int) or flow.label < 0:
        raise ValueError(f"label must be a non-negative int, got {flow.label!r}")
    if not 1 <= len(flow.packets) <= MAX_FLOW_PACKETS:
        raise ValueError(f"flow has {len(flow.packets)} packets, expected 1..{MAX_FLOW_PACKETS}")
    prev_ts = None
    for pkt in flow.packets:
        if not pkt.header_bytes or not pkt.payload_bytes:
            raise ValueError("packet with empty header or payload")
        if pkt.direction not in (FWD, BWD):
            raise ValueError(f"bad direction {pkt.direction!r}")
        if prev_ts is not None and pkt.timestamp_us < prev_ts:
            raise ValueError("packets not time-ordered")
        prev_ts = pkt.timestamp_us


# ---------------------------------------------------------------------------
# pcap parsing


def parse_pcap(path: str | Path) -> list[RawCapturePacket]:
    """Read a classic pcap file (either byte order) into raw packets."""
    blob = Path(path).read_bytes()
    if len(blob) < 24:
        raise BadMagic(f"{path}: file shorter than a pcap global header")
    if blob[:4] == b"\xa1\xb2\xc3\xd4":
        endian = ">"
    elif blob[:4] == b"\xd4\xc3\xb2\xa1":
        endian = "<"
    else:
        raise BadMagic(f"{path}: unknown magic {blob[:4].hex()}")
    network = struct.unpack(endian + "I", blob[20:24])[0]
    if network != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"{path}: link type {network}, expected Ethernet(1)")

    packets: list[RawCapturePacket] = []
    off = 24
    rec = struct.Struct(endian + "IIII")
    while off < len(blob):
        if off + 16 > len(blob):
            raise Truncated(f"{path}: record header at byte {off} is incomplete")
        ts_sec, ts_usec, incl_len, orig_len = rec.unpack_from(blob, off)
        off += 16
        if off + incl_len > len(blob):
            raise Truncated(f"{path}: record body at byte {off} shorter than {incl_len}")
        packets.append(RawCapturePacket(ts_sec * 1_000_000 + ts_usec,
                                        blob[off:off + incl_len], orig_len))
        off += incl_len
    return packets


# ---------------------------------------------------------------------------
# anonymization

_ETH_HLEN = 14
_ETHERTYPE_IPV4 = 0x0800
_PROTO_TCP = 6
_PROTO_UDP = 17


@dataclass(frozen=True)
class _Dissected:
    header_bytes: bytes
    payload_bytes: bytes
    proto: int
    src: tuple[bytes, int]  # (ip bytes, port)
    dst: tuple[bytes, int]
    skip: str | None  # populated instead of the fields above when skipped


def _dissect(frame: bytes) -> _Dissected:
    empty = (b"", 0)
    if len(frame) < _ETH_HLEN:
        raise MalformedHeader("frame shorter than an Ethernet header")
    ethertype = struct.unpack(">H", frame[12:14])[0]
    if ethertype != _ETHERTYPE_IPV4:
        return _Dissected(b"", b"", 0, empty, empty, "non_ipv4")
    ip = frame[_ETH_HLEN:]
    if len(ip) < 20:
        raise MalformedHeader("IPv4 section shorter than 20 bytes")
    if ip[0] >> 4 != 4:
        raise MalformedHeader(f"IP version {ip[0] >> 4} under an IPv4 ethertype")
    ihl = (ip[0] & 0xF) * 4
    total_len = struct.unpack(">H", ip[2:4])[0]
    if ihl < 20 or total_len < ihl or len(ip) < total_len:
        raise MalformedHeader("IPv4 length fields inconsistent with frame size")
    proto = ip[9]
    if proto not in (_PROTO_TCP, _PROTO_UDP):
        return _Dissected(b"", b"", proto, empty, empty, "non_tcp_udp")
    src_ip, dst_ip = ip[12:16], ip[16:20]
    trimmed_ip = ip[:12] + ip[20:ihl]
    transport = ip[ihl:total_len]
    if proto == _PROTO_TCP:
        if len(transport) < 20:
            raise MalformedHeader("TCP section shorter than 20 bytes")
        thl = (transport[12] >> 4) * 4
        if thl < 20 or thl > len(transport):
            raise MalformedHeader("TCP data offset inconsistent with frame size")
    else:
        if len(transport) < 8:
            raise MalformedHeader("UDP section shorter than 8 bytes")
        udp_len = struct.unpack(">H", transport[4:6])[0]
        if udp_len < 8 or udp_len > len(transport):
            raise MalformedHeader("UDP length field inconsistent with frame size")
        transport = transport[:udp_len]
        thl = 8
    src_port, dst_port = struct.unpack(">HH", transport[:4])
    src, dst = (src_ip, src_port), (dst_ip, dst_port)
    trimmed_transport = transport[4:thl]
    payload = transport[thl:]
    if not payload:
        # keeps its 5-tuple: payload-less packets still count toward the raw
        # flow length and define block boundaries
        return _Dissected(b"", b"", proto, src, dst, "empty_payload")
    return _Dissected(trimmed_ip + trimmed_transport, payload, proto, src, dst, None)


def anonymize(link_frame: bytes) -> tuple[bytes, bytes] | None:
    """Strip Ethernet header, IP addresses, and ports from one frame.

    Returns (header_bytes, payload_bytes), or None when the frame is skipped
    (non-IPv4, non-TCP/UDP, or empty payload). Address and port bytes are
    deleted, not zeroed.
    """
    d = _dissect(link_frame)
    if d.skip is not None:
        return None
    return d.header_bytes, d.payload_bytes


# ---------------------------------------------------------------------------
# flow assembly


def _flow_key_digest(proto: int, ep_a: tuple[bytes, int], ep_b: tuple[bytes, int],
                     block: int | None) -> str:
    material = b"%d|%s:%d|%s:%d|%s" % (
        proto, ep_a[0], ep_a[1], ep_b[0], ep_b[1],
        b"-" if block is None else str(block).encode())
    return hashlib.sha1(material).hexdigest()[:16]


def assemble_flows(packets: list[RawCapturePacket], label: int,
                   block_seconds: int | None = None,
                   report: IngestReport | None = None) -> list[TrafficFlow]:
    """Group raw packets into labeled bidirectional flows.

    Pipeline per flow: optional split into non-overlapping time blocks
    (relative to the flow's first packet), drop block-flows longer than
    10000 raw packets, anonymize and drop payload-less packets, then keep
    the first 15 survivors. Malformed frames are counted and skipped.
    """
    report = report if report is not None else IngestReport()
    # (key tuple) -> list of (ts, dissected)
    groups: dict[tuple, list[tuple[int, _Dissected]]] = {}
    order: list[tuple] = []
    for raw in packets:
        report.frames += 1
        try:
            d = _dissect(raw.link_bytes)
        except MalformedHeader:
            report.malformed += 1
            continue
        if d.skip == "non_ipv4":
            report.skipped_non_ipv4 += 1
            continue
        if d.skip == "non_tcp_udp":
            report.skipped_non_tcp_udp += 1
            continue
        # empty-payload packets stay in the raw group: they count toward the
        # 10000-packet length filter and define block boundaries
        key = (d.proto, *sorted([d.src, d.dst]))
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append((raw.timestamp_us, d))

    flows: list[TrafficFlow] = []
    for key in order:
        entries = groups[key]
        if block_seconds is None:
            blocks = [(None, entries)]
        else:
            span = block_seconds * 1_000_000
            t0 = entries[0][0]
            blocked: dict[int, list[tuple[int, _Dissected]]] = {}
            for ts, d in entries:
                blocked.setdefault((ts - t0) // span, []).append((ts, d))
            blocks = sorted(blocked.items())
        for block_idx, block_entries in blocks:
            if len(block_entries) > MAX_RAW_FLOW_LENGTH:
                report.dropped_overlong_flows += 1
                continue
            first_src = block_entries[0][1].src  # first raw packet orients the flow
            records: list[PacketRecord] = []
            for ts, d in block_entries:
                if d.skip == "empty_payload":
                    report.skipped_empty_payload += 1
                    continue
                direction = FWD if d.src == first_src else BWD
                records.append(PacketRecord(d.header_bytes, d.payload_bytes, direction, ts))
                report.kept += 1
                if len(records) == MAX_FLOW_PACKETS:
                    break
            if not records:
                continue
            proto, ep_a, ep_b = key
            flows.append(TrafficFlow(_flow_key_digest(proto, ep_a, ep_b, block_idx),
                                     records, label))
            report.flows += 1
    return flows


# ---------------------------------------------------------------------------
# flow store (JSON lines)


def write_flow_store(flows: list[TrafficFlow], path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for flow in flows:
            doc = {
                "label": flow.label,
                "flow_key": flow.flow_key,
                "packets": [
                    {"ts_us": p.timestamp_us, "dir": p.direction,
                     "header_hex": p.header_bytes.hex(), "payload_hex": p.payload_bytes.hex()}
                    for p in flow.packets
                ],
            }
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_flow_store(path: str | Path) -> list[TrafficFlow]:
    flows: list[TrafficFlow] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaViolation(f"{path}:{lineno}: not valid JSON: {e}") from e
            flows.append(_flow_from_doc(doc, f"{path}:{lineno}"))
    return flows


def _flow_from_doc(doc: dict, where: str) -> TrafficFlow:
    try:
        label, flow_key, packets = doc["label"], doc["flow_key"], doc["packets"]
    except (KeyError, TypeError) as e:
        raise SchemaViolation(f"{where}: missing field {e}") from e
    if not isinstance(label, int) or not isinstance(flow_key, str) or not isinstance(packets, list):
        raise SchemaViolation(f"{where}: wrong field type")
    records = []
    for i, p in enumerate(packets):
        try:
            ts, direction = p["ts_us"], p["dir"]
            header_hex, payload_hex = p["header_hex"], p["payload_hex"]
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"{where}: packet {i} missing field {e}") from e
        if direction not in (FWD, BWD) or not isinstance(ts, int):
            raise SchemaViolation(f"{where}: packet {i} has bad dir/ts_us")
        try:
            header = bytes.fromhex(header_hex)
            payload = bytes.fromhex(payload_hex)
        except (ValueError, TypeError) as e:
            raise SchemaViolation(f"{where}: packet {i} has non-hex bytes") from e
        records.append(PacketRecord(header, payload, direction, ts))
    flow = TrafficFlow(flow_key, records, label)
    try:
        validate_flow(flow)
    except ValueError as e:
        raise SchemaViolation(f"{where}: {e}") from e
    return flow


# ---------------------------------------------------------------------------
# labeled directory ingestion (CLI backend)


def read_label_csv(path: str | Path) -> dict[str, str]:
    """CSV of `filename,label` rows mapping pcap names to class names."""
    mapping: dict[str, str] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: expected 'filename,label' rows, got {row!r}")
            mapping[row[0].strip()] = row[1].strip()
    return mapping


def ingest_directory(pcap_dir: str | Path, labels_csv: str | Path | None = None,
                     block_seconds: int | None = None
                     ) -> tuple[list[TrafficFlow], dict[str, int], IngestReport]:
    """Ingest every *.pcap under a directory tree.

    Class names come from the labels CSV when given, otherwise from the
    pcap's immediate parent directory name. Returns (flows, class->index,
    report); class indices are assigned in sorted class-name order.
    """
    pcap_dir = Path(pcap_dir)
    files = sorted(pcap_dir.rglob("*.pcap"))
    if not files:
        raise FileNotFoundError(f"no .pcap files under {pcap_dir}")
    mapping = read_label_csv(labels_csv) if labels_csv else None
    named: list[tuple[Path, str]] = []
    for f in files:
        rel = f.relative_to(pcap_dir).as_posix()
        if mapping is not None:
            if rel not in mapping and f.name not in mapping:
                raise ValueError(f"{f}: no label in CSV for {rel!r}")
            named.append((f, mapping.get(rel, mapping.get(f.name))))
        else:
            if f.parent == pcap_dir:
                raise ValueError(f"{f}: top-level pcap needs a labels CSV")
            named.append((f, f.parent.name))
    classes = {name: idx for idx, name in enumerate(sorted({n for _, n in named}))}
    report = IngestReport()
    flows: list[TrafficFlow] = []
    for f, name in named:
        flows.extend(assemble_flows(parse_pcap(f), classes[name], block_seconds, report))
    return flows, classes, report
