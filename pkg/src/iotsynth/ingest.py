"""Capture parsing, direction assignment and traffic-window sampling.

Capture framing (libpcap / pcapng) is walked by a small strict reader so that
truncated or corrupt files are rejected; the frames themselves are dissected
with scapy.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CaptureParseError, EmptyCaptureError

log = logging.getLogger(__name__)

PROTOCOLS: tuple[str, ...] = (
    "ARP", "LLC", "IP", "ICMP", "ICMPv6", "EAPOL", "TCP", "UDP",
    "HTTP", "HTTPS", "DHCP", "BOOTP", "SSDP", "DNS", "MDNS", "NTP",
)
PROTO_INDEX = {name: i for i, name in enumerate(PROTOCOLS)}
N_PROTOCOLS = len(PROTOCOLS)

CAPTURE_SUFFIXES = (".pcap", ".pcapng", ".cap")


class Direction(str, Enum):
    INCOMING = "Incoming"
    OUTGOING = "Outgoing"


def flags_from_names(names: Iterable[str]) -> tuple[int, ...]:
    bits = [0] * N_PROTOCOLS
    for name in names:
        bits[PROTO_INDEX[name]] = 1
    return tuple(bits)


def flag_names(flags: Sequence[int]) -> list[str]:
    return [PROTOCOLS[i] for i, bit in enumerate(flags) if bit]


@dataclass(frozen=True)
class RawPacket:
    timestamp: float
    frame_length: int
    src_address: str | None
    dst_address: str | None
    src_port: int | None
    dst_port: int | None
    protocol_flags: tuple[int, ...]


@dataclass(frozen=True)
class PacketRecord:
    """Address-free packet metadata, the unit every downstream stage works on."""

    frame_length: int
    direction: Direction
    duration: float
    src_port: int | None
    dst_port: int | None
    protocol_flags: tuple[int, ...]
    capture_id: str
    device_id: str

    def to_dict(self) -> dict:
        return {
            "frame_length": self.frame_length,
            "direction": self.direction.value,
            "duration": self.duration,
            "src_port": self.src_port,
            "dst_port": self.dst_port,
            "protocol_flags": list(self.protocol_flags),
            "capture_id": self.capture_id,
            "device_id": self.device_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PacketRecord":
        return cls(
            frame_length=int(d["frame_length"]),
            direction=Direction(d["direction"]),
            duration=float(d["duration"]),
            src_port=None if d.get("src_port") is None else int(d["src_port"]),
            dst_port=None if d.get("dst_port") is None else int(d["dst_port"]),
            protocol_flags=tuple(int(b) for b in d["protocol_flags"]),
            capture_id=str(d["capture_id"]),
            device_id=str(d["device_id"]),
        )


@dataclass
class TrafficWindow:
    device_id: str
    packets: list[PacketRecord]
    capture_id: str = ""
    start_offset: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.packets)

    @property
    def lengths(self) -> list[int]:
        return [p.frame_length for p in self.packets]

    @property
    def directions(self) -> list[Direction]:
        return [p.direction for p in self.packets]


# ---------------------------------------------------------------------------
# capture container framing

_PCAP_MAGICS = {
    b"\xd4\xc3\xb2\xa1": ("<", 1e-6),
    b"\xa1\xb2\xc3\xd4": (">", 1e-6),
    b"\x4d\x3c\xb2\xa1": ("<", 1e-9),
    b"\xa1\xb2\x3c\x4d": (">", 1e-9),
}
_PCAPNG_SHB = 0x0A0D0D0A


def _iter_pcap(data: bytes, path: str) -> Iterator[tuple[float, int, bytes]]:
    endian, resolution = _PCAP_MAGICS[data[:4]]
    if len(data) < 24:
        raise CaptureParseError(f"{path}: truncated global header")
    linktype = struct.unpack(endian + "I", data[20:24])[0] & 0x0FFFFFFF
    pos = 24
    while pos < len(data):
        if pos + 16 > len(data):
            raise CaptureParseError(f"{path}: truncated record header at byte {pos}")
        sec, frac, caplen, _wirelen = struct.unpack(endian + "IIII", data[pos:pos + 16])
        pos += 16
        if pos + caplen > len(data):
            raise CaptureParseError(f"{path}: truncated packet data at byte {pos}")
        yield sec + frac * resolution, linktype, data[pos:pos + caplen]
        pos += caplen


def _iter_pcapng(data: bytes, path: str) -> Iterator[tuple[float, int, bytes]]:
    endian = "<"
    interfaces: list[tuple[int, float]] = []
    pos = 0
    while pos < len(data):
        if pos + 12 > len(data):
            raise CaptureParseError(f"{path}: truncated block header at byte {pos}")
        block_type = struct.unpack(endian + "I", data[pos:pos + 4])[0]
        if block_type == _PCAPNG_SHB:
            bom = data[pos + 8:pos + 12]
            if bom == b"\x4d\x3c\x2b\x1a":
                endian = "<"
            elif bom == b"\x1a\x2b\x3c\x4d":
                endian = ">"
            else:
                raise CaptureParseError(f"{path}: bad pcapng byte-order magic")
            interfaces = []
        total = struct.unpack(endian + "I", data[pos + 4:pos + 8])[0]
        if total < 12 or total % 4 or pos + total > len(data):
            raise CaptureParseError(f"{path}: truncated or malformed block at byte {pos}")
        trailer = struct.unpack(endian + "I", data[pos + total - 4:pos + total])[0]
        if trailer != total:
            raise CaptureParseError(f"{path}: block length mismatch at byte {pos}")
        body = data[pos + 8:pos + total - 4]
        if block_type == 1:  # interface description
            linktype = struct.unpack(endian + "H", body[:2])[0]
            interfaces.append((linktype, _pcapng_tsresol(body[8:], endian)))
        elif block_type == 6:  # enhanced packet
            iface, ts_hi, ts_lo, caplen, _ = struct.unpack(endian + "IIIII", body[:20])
            if iface >= len(interfaces) or 20 + caplen > len(body):
                raise CaptureParseError(f"{path}: malformed enhanced packet block at byte {pos}")
            linktype, res = interfaces[iface]
            yield ((ts_hi << 32) | ts_lo) * res, linktype, body[20:20 + caplen]
        elif block_type == 3:  # simple packet, no timestamp
            if not interfaces:
                raise CaptureParseError(f"{path}: simple packet block before interface")
            wirelen = struct.unpack(endian + "I", body[:4])[0]
            linktype, _ = interfaces[0]
            yield 0.0, linktype, body[4:4 + wirelen]
        pos += total


def _pcapng_tsresol(options: bytes, endian: str) -> float:
    pos = 0
    while pos + 4 <= len(options):
        code, length = struct.unpack(endian + "HH", options[pos:pos + 4])
        if code == 0:
            break
        if code == 9 and length >= 1:
            v = options[pos + 4]
            return 2.0 ** -(v & 0x7F) if v & 0x80 else 10.0 ** -v
        pos += 4 + ((length + 3) // 4) * 4
    return 1e-6


def read_frames(path: str | Path) -> list[tuple[float, int, bytes]]:
    """Return ``(timestamp, linktype, frame_bytes)`` for every frame in a capture."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        return []
    if data[:4] in _PCAP_MAGICS:
        return list(_iter_pcap(data, path))
    if len(data) >= 4 and struct.unpack("<I", data[:4])[0] == _PCAPNG_SHB:
        return list(_iter_pcapng(data, path))
    raise CaptureParseError(f"{path}: not a libpcap or pcapng file")


# ---------------------------------------------------------------------------
# frame dissection

_DHCP_COOKIE = b"\x63\x82\x53\x63"


def _dissect(frame: bytes, linktype: int):
    from scapy.layers.inet import IP
    from scapy.layers.inet6 import IPv6
    from scapy.layers.l2 import CookedLinux, Ether, Loopback

    if linktype == 1:
        return Ether(frame)
    if linktype in (101, 12, 14):
        return IPv6(frame) if frame[:1] and frame[0] >> 4 == 6 else IP(frame)
    if linktype == 113:
        return CookedLinux(frame)
    if linktype == 0:
        return Loopback(frame)
    if linktype == 276:
        from scapy.layers.l2 import CookedLinuxV2
        return CookedLinuxV2(frame)
    raise ValueError(f"unsupported link type {linktype}")


def dissect_frame(frame: bytes, linktype: int) -> tuple[str | None, str | None, int | None, int | None, tuple[int, ...]]:
    """Dissect one frame into ``(src, dst, sport, dport, flags)``."""
    from scapy.layers.eap import EAPOL
    from scapy.layers.inet import ICMP, IP, TCP, UDP
    from scapy.layers.inet6 import IPv6
    from scapy.layers.l2 import ARP, LLC
    from scapy.packet import NoPayload

    pkt = _dissect(frame, linktype)
    names: set[str] = set()
    src = dst = None
    sport = dport = None
    transport = None
    layer = pkt
    while layer is not None and not isinstance(layer, NoPayload):
        cls = type(layer)
        if cls is IP:
            names.add("IP")
            if src is None:
                src, dst = layer.src, layer.dst
        elif cls is IPv6:
            if src is None:
                src, dst = layer.src, layer.dst
        elif cls is ARP:
            names.add("ARP")
            if src is None:
                src, dst = layer.psrc, layer.pdst
        elif cls is LLC:
            names.add("LLC")
        elif cls is ICMP:
            names.add("ICMP")
        elif cls.__name__.startswith("ICMPv6"):
            names.add("ICMPv6")
        elif cls is EAPOL:
            names.add("EAPOL")
        elif cls in (TCP, UDP) and transport is None:
            transport = layer
            names.add(cls.__name__)
            sport, dport = int(layer.sport), int(layer.dport)
        layer = layer.payload

    if transport is not None:
        ports = {sport, dport}
        payload = bytes(transport.payload)
        if "TCP" in names:
            if ports & {80, 8080} and payload:
                names.add("HTTP")
            if 443 in ports:
                names.add("HTTPS")
        else:
            if ports & {67, 68}:
                names.add("BOOTP")
                if payload[236:240] == _DHCP_COOKIE:
                    names.add("DHCP")
            if 1900 in ports:
                names.add("SSDP")
            if 5353 in ports:
                names.add("MDNS")
            if 123 in ports:
                names.add("NTP")
        if 53 in ports:
            names.add("DNS")
    return src, dst, sport, dport, flags_from_names(names)


def parse_capture(path: str | Path) -> list[RawPacket]:
    """Parse a libpcap/pcapng file into one ``RawPacket`` per link-layer frame.

    Raises ``CaptureParseError`` for unrecognised or truncated files. A frame
    that cannot be dissected still yields a record (all flags zero, no
    addresses) and a logged warning.
    """
    frames = read_frames(path)
    if not frames:
        log.warning("capture %s contains no packets", path)
        return []
    out = []
    zero = (0,) * N_PROTOCOLS
    for i, (ts, linktype, frame) in enumerate(frames):
        try:
            src, dst, sport, dport, flags = dissect_frame(frame, linktype)
        except Exception as exc:  # noqa: BLE001 - any dissector failure degrades to an unflagged record
            log.warning("%s: frame %d could not be dissected (%s)", path, i, exc)
            src = dst = None
            sport = dport = None
            flags = zero
        out.append(RawPacket(
            timestamp=float(ts),
            frame_length=max(1, len(frame)),
            src_address=src,
            dst_address=dst,
            src_port=sport,
            dst_port=dport,
            protocol_flags=flags,
        ))
    return out


def infer_device_address(raws: Sequence[RawPacket]) -> str:
    """Most frequent address over src and dst fields; ties go to the smallest."""
    counts: Counter[str] = Counter()
    for r in raws:
        for addr in (r.src_address, r.dst_address):
            if addr is not None:
                counts[addr] += 1
    if not counts:
        raise EmptyCaptureError("no addressed packets to infer a device address from")
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def normalize(raws: Sequence[RawPacket], device_address: str | None, capture_id: str,
              device_id: str) -> list[PacketRecord]:
    ordered = sorted(raws, key=lambda r: r.timestamp)
    records = []
    for i, r in enumerate(ordered):
        duration = ordered[i + 1].timestamp - r.timestamp if i + 1 < len(ordered) else 0.0
        direction = (Direction.OUTGOING if r.src_address is not None and r.src_address == device_address
                     else Direction.INCOMING)
        records.append(PacketRecord(
            frame_length=r.frame_length,
            direction=direction,
            duration=duration,
            src_port=r.src_port,
            dst_port=r.dst_port,
            protocol_flags=tuple(r.protocol_flags),
            capture_id=capture_id,
            device_id=device_id,
        ))
    return records


def ingest_capture(path: str | Path, device_id: str, capture_id: str | None = None,
                   device_address: str | None = None) -> list[PacketRecord]:
    raws = parse_capture(path)
    if not raws:
        return []
    if device_address is None:
        device_address = infer_device_address(raws)
    return normalize(raws, device_address, capture_id or Path(path).stem, device_id)


def capture_files(device_dir: str | Path) -> list[Path]:
    return sorted(p for p in Path(device_dir).iterdir() if p.suffix in CAPTURE_SUFFIXES)


def ingest_device(dataset_root: str | Path, device_id: str) -> dict[str, list[PacketRecord]]:
    """Parse every capture of ``dataset_root/<device_id>/``, keyed by capture id."""
    out = {}
    for path in capture_files(Path(dataset_root) / device_id):
        out[path.stem] = ingest_capture(path, device_id, path.stem)
    return out


def make_windows(records_by_capture: Mapping[str, Sequence[PacketRecord]], L: int, n: int,
                 seed: int) -> list[TrafficWindow]:
    """Sample ``n`` windows of ``L`` consecutive records, never crossing captures.

    Start offsets are drawn uniformly without replacement from every valid
    ``(capture, offset)`` pair. Windows may overlap.
    """
    if L < 2:
        raise ValueError("window length must be >= 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    candidates = [(cid, off)
                  for cid in sorted(records_by_capture)
                  for off in range(len(records_by_capture[cid]) - L + 1)]
    if len(candidates) < n:
        log.warning("only %d windows of length %d available, %d requested", len(candidates), L, n)
    if not candidates:
        return []
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(candidates), size=min(n, len(candidates)), replace=False))
    windows = []
    for idx in picks:
        cid, off = candidates[idx]
        packets = list(records_by_capture[cid][off:off + L])
        windows.append(TrafficWindow(packets[0].device_id, packets, cid, off))
    return windows


# ---------------------------------------------------------------------------
# persistence

def write_records(path: str | Path, records: Iterable[PacketRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path: str | Path) -> list[PacketRecord]:
    with open(path) as fh:
        return [PacketRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_windows(path: str | Path, windows: Sequence[TrafficWindow]) -> None:
    write_records(path, (p for w in windows for p in w.packets))


def read_windows(path: str | Path, L: int) -> list[TrafficWindow]:
    """Read a JSONL record file back into consecutive windows of ``L`` records."""
    records = read_records(path)
    if len(records) % L:
        raise ValueError(f"{path}: {len(records)} records is not a multiple of L={L}")
    out = []
    for i in range(0, len(records), L):
        chunk = records[i:i + L]
        out.append(TrafficWindow(chunk[0].device_id, chunk, chunk[0].capture_id, 0))
    return out


def write_window_manifest(path: str | Path, windows: Sequence[TrafficWindow]) -> None:
    rows = [{"capture_id": w.capture_id, "start_offset": w.start_offset} for w in windows]
    with open(path, "w") as fh:
        json.dump({"windows": rows}, fh, indent=1)
