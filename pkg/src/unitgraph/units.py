"""Aggregation of packet bytes into N-bit traffic units.

A traffic unit is the integer value of N consecutive bits of the byte stream,
MSB-first within each byte; a trailing remainder shorter than N bits is
dropped rather than padded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import PacketRecord

SUPPORTED_WIDTHS = (2, 4, 6, 8, 10)


class UnsupportedWidth(ValueError):
    """Requested unit bit width is not one of the supported widths."""


class DegenerateSegment(ValueError):
    """A header or payload segment tokenizes to zero units."""


@dataclass(frozen=True)
class UnitSequence:
    bit_width: int
    header_units: list[int]
    payload_units: list[int]


def tokenize(data: bytes, bit_width: int) -> list[int]:
    """Split a byte string into non-overlapping bit_width-bit unit values."""
    if bit_width not in SUPPORTED_WIDTHS:
        raise UnsupportedWidth(f"bit width {bit_width} not in {SUPPORTED_WIDTHS}")
    n_units = (8 * len(data)) // bit_width
    if n_units == 0:
        return []
    if bit_width == 8:
        return list(data)
    if bit_width == 4:
        out = []
        for b in data:
            out.append(b >> 4)
            out.append(b & 0xF)
        return out
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    chunks = bits[: n_units * bit_width].reshape(n_units, bit_width)
    weights = 1 << np.arange(bit_width - 1, -1, -1)
    return (chunks @ weights).tolist()


def tokenize_packet(pkt: PacketRecord, views: list[int]) -> dict[int, UnitSequence]:
    """Tokenize header and payload at every requested width.

    Raises DegenerateSegment when either segment yields no units at some
    view (e.g. a 1-byte payload at 10-bit width).
    """
    if not views:
        raise ValueError("views must be non-empty")
    out: dict[int, UnitSequence] = {}
    for width in views:
        header = tokenize(pkt.header_bytes, width)
        payload = tokenize(pkt.payload_bytes, width)
        if not header or not payload:
            seg = "header" if not header else "payload"
            raise DegenerateSegment(
                f"{seg} of {len(pkt.header_bytes) if seg == 'header' else len(pkt.payload_bytes)}"
                f" byte(s) yields no {width}-bit units")
        out[width] = UnitSequence(width, header, payload)
    return out
