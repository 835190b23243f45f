import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from iotsynth.ingest import Direction, PacketRecord, TrafficWindow, flags_from_names  # noqa: E402

OUT, IN = Direction.OUTGOING, Direction.INCOMING
TCP_FLAGS = flags_from_names(["IP", "TCP", "HTTPS"])


def rec(length, direction=OUT, duration=0.01, sport=49152, dport=443, flags=TCP_FLAGS, capture="c0", device="dev"):
    return PacketRecord(length, direction, duration, sport, dport, tuple(flags), capture, device)


def window(items, device="dev", capture="c0", **kw):
    """``items`` = [(length, direction)] or [(length, direction, duration)]."""
    packets = [rec(it[0], it[1], *(it[2:3] or [0.01]), capture=capture, device=device, **kw) for it in items]
    return TrafficWindow(device, packets, capture, 0)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    from iotsynth.toycorpus import make_toy_corpus

    return make_toy_corpus(seed=7, out_dir=tmp_path_factory.mktemp("toy") / "corpus")


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
