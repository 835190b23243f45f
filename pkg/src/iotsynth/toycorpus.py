"""Desk-scale synthetic capture corpus with planted, recorded ground truth.

Each pseudo-device emits bursts: a planted signature (fixed frame lengths
plus uniform integer jitter, fixed directions, fixed service) or a short run
of orphan packets. Gaps inside a burst are milliseconds, gaps between bursts
are around a second, and occasional idle gaps are around a minute. All
packets are IPv4 TCP or UDP so the device address is always the dominant one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

OUT, IN = "Outgoing", "Incoming"


@dataclass
class Service:
    transport: str          # "TCP" or "UDP"
    remote_port: int
    peer: str


@dataclass
class PlantedSignature:
    lengths: list[int]
    directions: list[str]
    service: str
    weight: float = 1.0


@dataclass
class ToyDevice:
    name: str
    address: str
    signatures: list[PlantedSignature]
    orphan_lengths: list[int]
    services: dict[str, Service]
    orphan_service: str
    jitter: int = 3
    p_signature: float = 0.7
    p_idle: float = 0.05
    local_ports: int = 8


@dataclass
class ToyCorpusSpec:
    devices: list[ToyDevice]
    captures_per_device: int = 20
    bursts_per_capture: int = 60
    burst_gap_ms: float = 2.0       # median intra-burst gap
    event_gap_s: float = 1.0        # median inter-burst gap
    idle_gap_s: float = 60.0


def default_toy_spec() -> ToyCorpusSpec:
    cam = ToyDevice(
        name="toycam",
        address="192.168.1.20",
        signatures=[
            PlantedSignature([120, 309], [OUT, IN], "cloud"),
            PlantedSignature([180, 236, 1026], [OUT, IN, IN], "cloud"),
            PlantedSignature([87, 143], [OUT, IN], "dns", 0.6),
            PlantedSignature([90, 90], [OUT, IN], "ntp", 0.3),
        ],
        orphan_lengths=[66, 1514, 583, 771],
        services={
            "cloud": Service("TCP", 443, "52.10.0.7"),
            "dns": Service("UDP", 53, "192.168.1.1"),
            "ntp": Service("UDP", 123, "17.253.0.12"),
        },
        orphan_service="cloud",
    )
    plug = ToyDevice(
        name="toyplug",
        address="192.168.1.31",
        signatures=[
            PlantedSignature([451, 1380, 1002, 660], [OUT, IN, OUT, IN], "cloud"),
            PlantedSignature([870, 940], [IN, OUT], "cloud"),
            PlantedSignature([1200, 1280], [OUT, IN], "mqtt", 0.8),
        ],
        orphan_lengths=[60, 1110, 1514],
        services={
            "cloud": Service("TCP", 8443, "34.200.1.9"),
            "mqtt": Service("TCP", 8883, "34.200.1.44"),
        },
        orphan_service="mqtt",
    )
    return ToyCorpusSpec(devices=[cam, plug])


def _frame(device: ToyDevice, svc: Service, local_port: int, length: int, direction: str) -> bytes:
    from scapy.layers.inet import IP, TCP, UDP
    from scapy.layers.l2 import Ether
    from scapy.packet import Raw

    out = direction == OUT
    src, dst = (device.address, svc.peer) if out else (svc.peer, device.address)
    sport, dport = (local_port, svc.remote_port) if out else (svc.remote_port, local_port)
    l4 = (TCP(sport=sport, dport=dport, flags="PA", seq=1, ack=1, window=1024) if svc.transport == "TCP"
          else UDP(sport=sport, dport=dport))
    pkt = Ether(src="02:00:00:00:00:aa", dst="02:00:00:00:00:bb") / IP(src=src, dst=dst, id=0) / l4
    pad = length - len(pkt)
    if pad < 0:
        raise ValueError(f"length {length} below header size {len(pkt)}")
    if pad:
        pkt = pkt / Raw(load=b"\x00" * pad)
    return bytes(pkt)


def _capture(device: ToyDevice, spec: ToyCorpusSpec, rng: np.random.Generator, counts: dict):
    ports = {name: [int(p) for p in rng.choice(np.arange(49152, 49152 + 64), size=device.local_ports,
                                                 replace=False)] for name in device.services}
    weights = np.array([s.weight for s in device.signatures])
    weights /= weights.sum()
    t = 1_600_000_000.0
    frames: list[tuple[float, bytes]] = []
    for _ in range(spec.bursts_per_capture):
        if rng.random() < device.p_signature:
            k = int(rng.choice(len(device.signatures), p=weights))
            sig = device.signatures[k]
            counts[k] += 1
            pkts = [(int(l + rng.integers(-device.jitter, device.jitter + 1)), d, sig.service)
                    for l, d in zip(sig.lengths, sig.directions)]
        else:
            n = int(rng.integers(1, 4))
            pkts = [(int(rng.choice(device.orphan_lengths)), OUT if rng.random() < 0.5 else IN,
                     device.orphan_service) for _ in range(n)]
        for j, (length, direction, svc_name) in enumerate(pkts):
            svc = device.services[svc_name]
            local = ports[svc_name][int(rng.integers(len(ports[svc_name])))] if j == 0 else local
            frames.append((t, _frame(device, svc, local, length, direction)))
            t += float(rng.lognormal(np.log(spec.burst_gap_ms * 1e-3), 0.5))
        gap = spec.idle_gap_s if rng.random() < device.p_idle else spec.event_gap_s
        t += float(rng.lognormal(np.log(gap), 0.3))
    return frames


def _write_pcap(path: Path, frames: list[tuple[float, bytes]]) -> None:
    from scapy.utils import RawPcapWriter

    with RawPcapWriter(str(path), linktype=1, sync=False) as w:
        w.write_header(None)
        for ts, wire in frames:
            sec = int(ts)
            usec = min(int(round((ts - sec) * 1e6)), 999_999)
            w.write_packet(wire, sec=sec, usec=usec, caplen=len(wire), wirelen=len(wire))


def make_toy_corpus(spec: ToyCorpusSpec | None = None, seed: int = 0,
                    out_dir: str | Path = "toy_corpus") -> Path:
    """Write ``out_dir/<device>/capture_XX.pcap`` plus ``ground_truth.json``.

    The sidecar records the planted signatures as per-position (min, max)
    ranges with directions, the duration regime and the port profile.
    """
    spec = spec or default_toy_spec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    truth: dict = {"seed": seed, "captures_per_device": spec.captures_per_device, "devices": {}}
    for device, ss in zip(spec.devices, root.spawn(len(spec.devices))):
        ddir = out / device.name
        ddir.mkdir(exist_ok=True)
        counts = {k: 0 for k in range(len(device.signatures))}
        for c, css in enumerate(ss.spawn(spec.captures_per_device)):
            frames = _capture(device, spec, np.random.default_rng(css), counts)
            _write_pcap(ddir / f"capture_{c:02d}.pcap", frames)
        truth["devices"][device.name] = {
            "address": device.address,
            "signatures": [
                {"ranges": [[l - device.jitter, l + device.jitter, d] for l, d in zip(s.lengths, s.directions)],
                 "service": s.service, "occurrences": counts[k]}
                for k, s in enumerate(device.signatures)],
            "orphan_lengths": device.orphan_lengths,
            "services": {k: asdict(v) for k, v in device.services.items()},
            "durations_s": {"intra_burst_median": spec.burst_gap_ms * 1e-3, "inter_burst_median": spec.event_gap_s,
                            "idle_median": spec.idle_gap_s, "p_idle": device.p_idle},
        }
        log.info("toy device %s: %d captures", device.name, spec.captures_per_device)
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    return out


def spec_from_dict(d: dict) -> ToyCorpusSpec:
    devices = []
    for dev in d["devices"]:
        dev = dict(dev)
        dev["signatures"] = [PlantedSignature(**s) for s in dev["signatures"]]
        dev["services"] = {k: Service(**v) for k, v in dev["services"].items()}
        devices.append(ToyDevice(**dev))
    rest = {k: v for k, v in d.items() if k != "devices"}
    return ToyCorpusSpec(devices=devices, **rest)
