import json
import logging

import dpkt
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scapy.layers.dhcp import BOOTP, DHCP
from scapy.layers.inet import ICMP, IP, TCP, UDP
from scapy.layers.l2 import ARP, Ether
from scapy.packet import Raw
from scapy.utils import PcapNgWriter, RawPcapWriter

from conftest import IN, OUT, rec
from iotsynth.errors import CaptureParseError, EmptyCaptureError
from iotsynth.ingest import (N_PROTOCOLS, PROTO_INDEX, PacketRecord, RawPacket, flag_names, infer_device_address,
                             ingest_capture, make_windows, normalize, parse_capture, read_records, read_windows,
                             write_records, write_window_manifest, write_windows)

DEV, PEER = "192.168.0.10", "93.184.216.34"


def write_frames(path, frames, linktype=1):
    with RawPcapWriter(str(path), linktype=linktype, sync=False) as w:
        w.write_header(None)
        for ts, data in frames:
            sec = int(ts)
            w.write_packet(data, sec=sec, usec=int(round((ts - sec) * 1e6)), caplen=len(data), wirelen=len(data))
    return path


def handshake():
    e = Ether(src="02:00:00:00:00:01", dst="02:00:00:00:00:02")
    return [
        e / IP(src=DEV, dst=PEER) / TCP(sport=50000, dport=443, flags="S"),
        e / IP(src=PEER, dst=DEV) / TCP(sport=443, dport=50000, flags="SA"),
        e / IP(src=DEV, dst=PEER) / TCP(sport=50000, dport=443, flags="A"),
    ]


# --- parse_capture -----------------------------------------------------------

def test_empty_capture_file_gives_empty_list_and_warning(tmp_path, caplog):
    p = tmp_path / "empty.pcap"
    p.write_bytes(b"")
    with caplog.at_level(logging.WARNING):
        assert parse_capture(p) == []
    assert "no packets" in caplog.text


def test_header_only_capture_is_empty(tmp_path):
    p = write_frames(tmp_path / "h.pcap", [])
    assert parse_capture(p) == []


def test_handshake_matches_independent_dissector(tmp_path):
    p = write_frames(tmp_path / "hs.pcap", [(1.0 + i * 0.25, bytes(f)) for i, f in enumerate(handshake())])
    ours = parse_capture(p)
    with open(p, "rb") as fh:
        theirs = []
        for ts, buf in dpkt.pcap.Reader(fh):
            eth = dpkt.ethernet.Ethernet(buf)
            ip = eth.data
            theirs.append((ts, len(buf), ip.data.sport, ip.data.dport,
                           ".".join(map(str, ip.src)), ".".join(map(str, ip.dst))))
    assert len(ours) == 3
    for r, (ts, length, sport, dport, src, dst) in zip(ours, theirs):
        assert r.timestamp == pytest.approx(ts, abs=1e-6)
        assert (r.frame_length, r.src_port, r.dst_port, r.src_address, r.dst_address) == (length, sport, dport,
                                                                                          src, dst)
        assert set(flag_names(r.protocol_flags)) == {"IP", "TCP", "HTTPS"}


def test_random_bytes_raise(tmp_path):
    p = tmp_path / "junk.pcap"
    p.write_bytes(np.random.default_rng(0).bytes(300))
    with pytest.raises(CaptureParseError):
        parse_capture(p)


@pytest.mark.parametrize("cut", [10, 30, -7])
def test_truncated_capture_raises(tmp_path, cut):
    p = write_frames(tmp_path / "t.pcap", [(1.0, bytes(f)) for f in handshake()])
    data = p.read_bytes()
    p.write_bytes(data[:cut])
    with pytest.raises(CaptureParseError):
        parse_capture(p)


def test_pcapng_is_read(tmp_path):
    p = tmp_path / "hs.pcapng"
    w = PcapNgWriter(str(p))
    for i, f in enumerate(handshake()):
        f.time = 100 + i
        w.write(f)
    w.close()
    out = parse_capture(p)
    assert [r.frame_length for r in out] == [len(f) for f in handshake()]
    assert [r.src_port for r in out] == [50000, 443, 50000]
    assert [round(r.timestamp) for r in out] == [100, 101, 102]


def test_undissectable_frame_degrades_to_zero_flags(tmp_path, caplog):
    p = write_frames(tmp_path / "odd.pcap", [(0.0, b"\x01\x02\x03\x04")], linktype=147)
    with caplog.at_level(logging.WARNING):
        out = parse_capture(p)
    assert len(out) == 1 and out[0].protocol_flags == (0,) * N_PROTOCOLS
    assert out[0].src_address is None
    assert "could not be dissected" in caplog.text


@pytest.mark.parametrize("pkt, expected", [
    (IP(src=DEV, dst=PEER) / UDP(sport=5000, dport=53) / Raw(b"q" * 12), {"IP", "UDP", "DNS"}),
    (IP(src=DEV, dst=PEER) / UDP(sport=123, dport=123) / Raw(b"\x00" * 48), {"IP", "UDP", "NTP"}),
    (IP(src=DEV, dst="224.0.0.251") / UDP(sport=5353, dport=5353), {"IP", "UDP", "MDNS"}),
    (IP(src=DEV, dst="239.255.255.250") / UDP(sport=4000, dport=1900), {"IP", "UDP", "SSDP"}),
    (IP(src="0.0.0.0", dst="255.255.255.255") / UDP(sport=68, dport=67) / BOOTP() / DHCP(options=[
        ("message-type", "discover"), "end"]), {"IP", "UDP", "BOOTP", "DHCP"}),
    (IP(src=DEV, dst=PEER) / UDP(sport=68, dport=67) / Raw(b"\x00" * 20), {"IP", "UDP", "BOOTP"}),
    (IP(src=DEV, dst=PEER) / TCP(sport=40000, dport=80) / Raw(b"GET / HTTP/1.1\r\n\r\n"), {"IP", "TCP", "HTTP"}),
    (IP(src=DEV, dst=PEER) / TCP(sport=40000, dport=80, flags="S"), {"IP", "TCP"}),
    (IP(src=DEV, dst=PEER) / ICMP(), {"IP", "ICMP"}),
])
def test_protocol_flags(tmp_path, pkt, expected):
    frame = Ether() / pkt
    p = write_frames(tmp_path / "f.pcap", [(0.0, bytes(frame))])
    (r,) = parse_capture(p)
    assert set(flag_names(r.protocol_flags)) == expected
    has_transport = r.protocol_flags[PROTO_INDEX["TCP"]] or r.protocol_flags[PROTO_INDEX["UDP"]]
    assert (r.src_port is not None) == bool(has_transport)


def test_arp_addresses_and_flag(tmp_path):
    frame = Ether() / ARP(psrc=DEV, pdst=PEER)
    (r,) = parse_capture(write_frames(tmp_path / "a.pcap", [(0.0, bytes(frame))]))
    assert flag_names(r.protocol_flags) == ["ARP"]
    assert (r.src_address, r.dst_address, r.src_port) == (DEV, PEER, None)


def test_raw_ip_linktype(tmp_path):
    frames = [(0.0, bytes(IP(src=DEV, dst=PEER) / UDP(sport=1, dport=2)))]
    (r,) = parse_capture(write_frames(tmp_path / "r.pcap", frames, linktype=101))
    assert set(flag_names(r.protocol_flags)) == {"IP", "UDP"} and r.frame_length == 28


# --- infer_device_address ------------------------------------------------------

def _raw(src, dst, ts=0.0):
    return RawPacket(ts, 60, src, dst, None, None, (0,) * N_PROTOCOLS)


def test_most_common_address():
    raws = [_raw("A", "X%d" % i) for i in range(5)] + [_raw("B", "Y"), _raw("Z", "B")]
    assert infer_device_address(raws) == "A"


def test_address_tie_goes_to_smallest():
    raws = [_raw("10.0.0.9", "10.0.0.1")] * 3
    assert infer_device_address(raws) == "10.0.0.1"


def test_no_addresses_raises():
    with pytest.raises(EmptyCaptureError):
        infer_device_address([])
    with pytest.raises(EmptyCaptureError):
        infer_device_address([_raw(None, None)])


# --- normalize ------------------------------------------------------------------

def test_direction_from_source():
    out = normalize([_raw(DEV, PEER, 0.0), _raw(PEER, DEV, 1.0)], DEV, "c", "d")
    assert [r.direction for r in out] == [OUT, IN]


def test_durations_with_zero_last():
    out = normalize([_raw(DEV, PEER, t) for t in (0.0, 0.5, 2.0)], DEV, "c", "d")
    assert [r.duration for r in out] == [0.5, 1.5, 0.0]


def test_unsorted_input_is_sorted():
    out = normalize([RawPacket(2.0, 70, DEV, PEER, None, None, (0,) * 16),
                     RawPacket(0.0, 60, DEV, PEER, None, None, (0,) * 16)], DEV, "c", "d")
    assert [r.frame_length for r in out] == [60, 70]
    assert [r.duration for r in out] == [2.0, 0.0]


def test_normalize_empty():
    assert normalize([], DEV, "c", "d") == []


def test_records_drop_addresses():
    (r,) = normalize([_raw(DEV, PEER)], DEV, "c", "d")
    assert not hasattr(r, "src_address")


addresses = st.sampled_from(["10.0.0.1", "10.0.0.2", "10.0.0.3", "fe80::1"])


@given(st.lists(st.tuples(st.floats(0, 1e4, allow_nan=False), addresses, addresses), min_size=1, max_size=40))
def test_normalize_properties(rows):
    raws = [RawPacket(ts, 60, s, d, None, None, (0,) * N_PROTOCOLS) for ts, s, d in rows]
    device = infer_device_address(raws)
    out = normalize(raws, device, "c", "d")
    ts = sorted(r[0] for r in rows)
    assert all(len(r.protocol_flags) == 16 and set(r.protocol_flags) <= {0, 1} for r in out)
    assert all(r.duration >= 0 for r in out) and out[-1].duration == 0.0
    assert sum(r.duration for r in out) == pytest.approx(ts[-1] - ts[0], abs=1e-6)
    assert all(r.direction in (IN, OUT) for r in out)
    assert all(r.direction == IN for r in normalize(raws, "192.0.2.254", "c", "d"))


# --- make_windows ----------------------------------------------------------------

def _records(n, cid):
    return [rec(60 + i, capture=cid) for i in range(n)]


def test_windows_are_consecutive_runs():
    recs = {"c0": _records(100, "c0")}
    ws = make_windows(recs, 20, 3, seed=1)
    assert len(ws) == 3
    for w in ws:
        assert len(w) == 20
        assert w.packets == recs["c0"][w.start_offset:w.start_offset + 20]


def test_short_captures_give_nothing(caplog):
    with caplog.at_level(logging.WARNING):
        assert make_windows({"a": _records(5, "a"), "b": _records(19, "b")}, 20, 4, seed=0) == []
    assert "available" in caplog.text


def test_fewer_available_than_requested(caplog):
    with caplog.at_level(logging.WARNING):
        ws = make_windows({"a": _records(22, "a")}, 20, 10, seed=0)
    assert len(ws) == 3 and "available" in caplog.text


def test_same_seed_same_windows():
    recs = {"a": _records(60, "a"), "b": _records(45, "b")}
    key = lambda ws: [(w.capture_id, w.start_offset) for w in ws]  # noqa: E731
    assert key(make_windows(recs, 10, 12, 5)) == key(make_windows(recs, 10, 12, 5))
    assert key(make_windows(recs, 10, 12, 5)) != key(make_windows(recs, 10, 12, 6))


@pytest.mark.parametrize("L, n", [(1, 3), (5, 0)])
def test_window_preconditions(L, n):
    with pytest.raises(ValueError):
        make_windows({"a": _records(10, "a")}, L, n, 0)


@settings(deadline=None, max_examples=50)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=5), st.integers(2, 12), st.integers(1, 30),
       st.integers(0, 2**32 - 1))
def test_windows_never_straddle_captures(sizes, L, n, seed):
    recs = {f"c{i}": _records(k, f"c{i}") for i, k in enumerate(sizes)}
    ws = make_windows(recs, L, n, seed)
    valid = sum(max(0, k - L + 1) for k in sizes)
    assert len(ws) == min(n, valid)
    assert len({(w.capture_id, w.start_offset) for w in ws}) == len(ws)
    for w in ws:
        assert len(w) == L and {p.capture_id for p in w.packets} == {w.capture_id}
        assert w.packets == recs[w.capture_id][w.start_offset:w.start_offset + L]


def test_selection_is_uniform_over_offsets():
    recs = {"a": _records(12, "a"), "b": _records(6, "b")}   # 9 + 3 valid offsets for L=4
    counts = {}
    for seed in range(3000):
        for w in make_windows(recs, 4, 1, seed):
            counts[(w.capture_id, w.start_offset)] = counts.get((w.capture_id, w.start_offset), 0) + 1
    assert len(counts) == 12
    freq = np.array(list(counts.values())) / 3000
    assert np.all(np.abs(freq - 1 / 12) < 0.03)


# --- persistence -------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    recs = [rec(100, OUT, 0.5), rec(200, IN, 0.0, sport=None, dport=None, flags=(0,) * 16)]
    write_records(tmp_path / "r.jsonl", recs)
    assert read_records(tmp_path / "r.jsonl") == recs
    line = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert set(line) == {f for f in PacketRecord.__dataclass_fields__}


def test_windows_and_manifest(tmp_path):
    recs = {"a": _records(30, "a")}
    ws = make_windows(recs, 5, 4, 0)
    write_windows(tmp_path / "w.jsonl", ws)
    back = read_windows(tmp_path / "w.jsonl", 5)
    assert [w.packets for w in back] == [w.packets for w in ws]
    write_window_manifest(tmp_path / "m.json", ws)
    rows = json.loads((tmp_path / "m.json").read_text())["windows"]
    assert rows == [{"capture_id": "a", "start_offset": w.start_offset} for w in ws]


def test_ingest_capture_end_to_end(tmp_path):
    p = write_frames(tmp_path / "hs.pcap", [(10.0 + i, bytes(f)) for i, f in enumerate(handshake())])
    out = ingest_capture(p, "cam")
    assert [r.direction for r in out] == [OUT, IN, OUT]
    assert [r.duration for r in out] == pytest.approx([1.0, 1.0, 0.0])
    assert {r.capture_id for r in out} == {"hs"} and {r.device_id for r in out} == {"cam"}
