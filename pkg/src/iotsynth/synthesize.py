"""Materialise synthetic metadata windows as wire-format packets.

Every non-modelled header field and the whole payload are filled with seeded
random values, so payloads look like ciphertext. Only Ethernet/ARP/IPv4/
TCP/UDP/ICMP headers are built for real; application protocols ride as
random payload bytes of the right size.
"""

from __future__ import annotations

import ipaddress
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import PROTO_INDEX, Direction, TrafficWindow, flag_names

log = logging.getLogger(__name__)

ETHER, ARP_LEN, IPV4, TCP_LEN, UDP_LEN, ICMP_LEN = 14, 28, 20, 20, 8, 8
# header bytes above the link layer
_L3_OVERHEAD = {
    "TCP": IPV4 + TCP_LEN,
    "UDP": IPV4 + UDP_LEN,
    "ICMP": IPV4 + ICMP_LEN,
    "IP": IPV4,
    "ARP": ARP_LEN,
    "RAW": 0,
}


def min_frame(stack: str, linktype: int = 1) -> int:
    return _L3_OVERHEAD[stack] + (0 if linktype == 101 else ETHER)


_TCP_FLAGS = ("A", "PA", "S", "SA", "FA", "R", "RA", "PA")
_STAND_IN = ("HTTP", "HTTPS", "DHCP", "BOOTP", "SSDP", "DNS", "MDNS", "NTP", "LLC", "EAPOL", "ICMPv6")
LOCAL_ETHERTYPE = 0x88B5


@dataclass
class Addressing:
    device_address: str = "10.0.0.2"
    peer_network: str = "10.0.1.0/24"
    device_mac: str = "02:00:00:00:00:02"
    peer_mac: str = "02:00:00:00:01:01"
    linktype: int = 1
    start_time: float = 0.0
    window_gap: float = 1.0

    def peers(self) -> list[str]:
        return [str(h) for h in ipaddress.ip_network(self.peer_network).hosts()]


@dataclass
class PacketBlueprint:
    timestamp: float
    frame_length: int
    stack: str                      # TCP, UDP, ICMP, IP, ARP or RAW
    src_address: str
    dst_address: str
    src_mac: str
    dst_mac: str
    src_port: int | None
    dst_port: int | None
    payload_length: int
    header: dict = field(default_factory=dict)
    payload: bytes = b""
    stand_in: tuple[str, ...] = ()


def _stack(flags: Sequence[int]) -> str:
    ix = PROTO_INDEX
    if flags[ix["TCP"]]:
        return "TCP"
    if flags[ix["UDP"]]:
        return "UDP"
    if flags[ix["ICMP"]]:
        return "ICMP"
    if flags[ix["IP"]]:
        return "IP"
    if flags[ix["ARP"]]:
        return "ARP"
    return "RAW"


def build_packets(window: TrafficWindow, addressing: Addressing, rng: np.random.Generator,
                  start_time: float | None = None) -> list[PacketBlueprint]:
    """One blueprint per record, oriented by direction, sized to the exact frame length.

    Lengths below the header minimum of the chosen stack are clamped up with a
    warning rather than dropped.
    """
    peers = addressing.peers()
    peer = peers[int(rng.integers(len(peers)))]
    t = addressing.start_time if start_time is None else start_time
    out = []
    for rec in window.packets:
        stack = _stack(rec.protocol_flags)
        length = rec.frame_length
        minimum = min_frame(stack, addressing.linktype)
        if length < minimum:
            log.warning("frame length %d below %s minimum %d; clamping", length, stack, minimum)
            length = minimum
        outgoing = rec.direction == Direction.OUTGOING
        src, dst = (addressing.device_address, peer) if outgoing else (peer, addressing.device_address)
        smac, dmac = ((addressing.device_mac, addressing.peer_mac) if outgoing
                      else (addressing.peer_mac, addressing.device_mac))
        header: dict = {}
        if stack in ("TCP", "UDP", "ICMP", "IP"):
            header.update(ip_id=int(rng.integers(0, 1 << 16)), ttl=int(rng.integers(32, 256)),
                          tos=int(rng.integers(0, 256)) & 0xFC, df=bool(rng.integers(0, 2)))
        if stack == "TCP":
            header.update(seq=int(rng.integers(0, 1 << 32)), ack=int(rng.integers(0, 1 << 32)),
                          window=int(rng.integers(1, 1 << 16)),
                          flags=_TCP_FLAGS[int(rng.integers(len(_TCP_FLAGS)))])
        elif stack == "ICMP":
            header.update(type=int(rng.choice([0, 8])), id=int(rng.integers(0, 1 << 16)),
                          seq=int(rng.integers(0, 1 << 16)))
        elif stack == "ARP":
            header.update(op=int(rng.choice([1, 2])))
        elif stack == "IP":
            header.update(proto=253)
        payload_len = length - minimum
        ports = stack in ("TCP", "UDP")
        out.append(PacketBlueprint(
            timestamp=t,
            frame_length=length,
            stack=stack,
            src_address=src,
            dst_address=dst,
            src_mac=smac,
            dst_mac=dmac,
            src_port=(rec.src_port if rec.src_port is not None else int(rng.integers(49152, 65536))) if ports else None,
            dst_port=(rec.dst_port if rec.dst_port is not None else int(rng.integers(49152, 65536))) if ports else None,
            payload_length=payload_len,
            header=header,
            payload=rng.bytes(payload_len),
            stand_in=tuple(n for n in flag_names(rec.protocol_flags) if n in _STAND_IN),
        ))
        t += rec.duration
    return out


def build_capture(windows: Sequence[TrafficWindow], addressing: Addressing,
                  rng: np.random.Generator) -> list[PacketBlueprint]:
    """Blueprints for several windows laid end to end, separated by ``window_gap`` seconds."""
    out: list[PacketBlueprint] = []
    t = addressing.start_time
    for w in windows:
        bps = build_packets(w, addressing, rng, start_time=t)
        out.extend(bps)
        t = (bps[-1].timestamp if bps else t) + addressing.window_gap
    return out


def to_scapy(bp: PacketBlueprint, linktype: int = 1):
    from scapy.layers.inet import ICMP, IP, TCP, UDP
    from scapy.layers.l2 import ARP, Ether
    from scapy.packet import Raw

    h = bp.header
    if bp.stack == "ARP":
        pkt = Ether(src=bp.src_mac, dst=bp.dst_mac) / ARP(
            op=h["op"], hwsrc=bp.src_mac, psrc=bp.src_address, hwdst=bp.dst_mac, pdst=bp.dst_address)
    elif bp.stack == "RAW":
        pkt = Ether(src=bp.src_mac, dst=bp.dst_mac, type=LOCAL_ETHERTYPE)
    else:
        ip = IP(src=bp.src_address, dst=bp.dst_address, id=h["ip_id"], ttl=h["ttl"], tos=h["tos"],
                flags="DF" if h["df"] else 0)
        if bp.stack == "TCP":
            ip = ip / TCP(sport=bp.src_port, dport=bp.dst_port, seq=h["seq"], ack=h["ack"],
                          window=h["window"], flags=h["flags"])
        elif bp.stack == "UDP":
            ip = ip / UDP(sport=bp.src_port, dport=bp.dst_port)
        elif bp.stack == "ICMP":
            ip = ip / ICMP(type=h["type"], id=h["id"], seq=h["seq"])
        else:
            ip.proto = h["proto"]
        pkt = ip if linktype == 101 else Ether(src=bp.src_mac, dst=bp.dst_mac) / ip
    if bp.payload:
        pkt = pkt / Raw(load=bp.payload)
    wire = bytes(pkt)
    if len(wire) != bp.frame_length:
        raise RuntimeError(f"built {len(wire)} bytes, blueprint says {bp.frame_length}")
    return wire


def write_capture(blueprints: Sequence[PacketBlueprint], path: str | Path, linktype: int = 1) -> Path:
    """Serialise blueprints to a libpcap file with computed lengths and checksums."""
    from scapy.utils import RawPcapWriter

    if linktype not in (1, 101):
        raise ValueError("supported link types: 1 (Ethernet), 101 (raw IP)")
    if linktype == 101 and any(bp.stack in ("ARP", "RAW") for bp in blueprints):
        raise ValueError("raw-IP captures cannot carry non-IP frames")
    path = Path(path)
    with RawPcapWriter(str(path), linktype=linktype, sync=False) as writer:
        writer.write_header(None)
        for bp in blueprints:
            sec = int(bp.timestamp)
            usec = int(round((bp.timestamp - sec) * 1e6))
            if usec >= 1_000_000:
                sec, usec = sec + 1, usec - 1_000_000
            wire = to_scapy(bp, linktype)
            writer.write_packet(wire, sec=sec, usec=usec, caplen=len(wire), wirelen=len(wire))
    return path
