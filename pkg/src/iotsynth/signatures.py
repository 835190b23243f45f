"""Packet-level signature mining, ranking, matching and frame tokenization.

A signature is an ordered list of ``(min_len, max_len, direction)`` ranges
found by density clustering every fixed-size subarray of the device's
length/direction flows. Windows are rewritten as non-overlapping signature
occurrences plus orphan packets, and each slot becomes a frame token.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.cluster import DBSCAN

from .errors import ConfigError, LengthMismatchError
from .ingest import Direction, PacketRecord, TrafficWindow

SCHEMA_VERSION = 1

# Distance between subarrays that disagree on a direction. Compared with ``>``
# against any finite eps, it can never fall inside a neighbourhood.
MAXIMAL = math.inf

Flow = Sequence[tuple[int, Direction]]


def flow_of(records: Sequence[PacketRecord]) -> list[tuple[int, Direction]]:
    return [(r.frame_length, r.direction) for r in records]


def _dir_bit(d: Direction) -> int:
    return 1 if d == Direction.OUTGOING else 0


@dataclass(frozen=True)
class SignatureConfig:
    d: float = 10.0
    s: int = 5
    min_size: int = 2
    max_size: int = 6

    def validate(self, L: int | None = None) -> None:
        if not self.d > 0:
            raise ConfigError("d must be > 0")
        if self.s < 2:
            raise ConfigError("s must be >= 2")
        if not 2 <= self.min_size <= self.max_size:
            raise ConfigError("need 2 <= min_size <= max_size")
        if L is not None and self.max_size > L:
            raise ConfigError("max_size must not exceed the window length")


@dataclass(frozen=True)
class Signature:
    signature_id: str
    ranges: tuple[tuple[int, int, Direction], ...]
    support_count: int = 0

    def __post_init__(self):
        if len(self.ranges) < 2:
            raise ValueError("a signature spans at least two packets")
        for lo, hi, _ in self.ranges:
            if lo > hi:
                raise ValueError(f"bad range {lo}..{hi}")

    def __len__(self) -> int:
        return len(self.ranges)

    def sort_key(self) -> tuple:
        return tuple((lo, hi, d.value) for lo, hi, d in self.ranges)

    def matches(self, flow: Flow, start: int) -> bool:
        if start < 0 or start + len(self.ranges) > len(flow):
            return False
        for (lo, hi, d), (length, direction) in zip(self.ranges, flow[start:start + len(self.ranges)]):
            if direction != d or not lo <= length <= hi:
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "signature_id": self.signature_id,
            "ranges": [[lo, hi, d.value] for lo, hi, d in self.ranges],
            "support_count": self.support_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Signature":
        ranges = tuple((int(lo), int(hi), Direction(dv)) for lo, hi, dv in d["ranges"])
        return cls(str(d["signature_id"]), ranges, int(d.get("support_count", 0)))


def signature_distance(a: Flow, b: Flow) -> float:
    """Euclidean distance over frame lengths, or ``MAXIMAL`` on any direction clash."""
    if len(a) != len(b):
        raise LengthMismatchError(f"subarray lengths differ: {len(a)} != {len(b)}")
    total = 0.0
    for (la, da), (lb, db) in zip(a, b):
        if da != db:
            return MAXIMAL
        total += (la - lb) ** 2
    return math.sqrt(total)


def _flow_arrays(flows: Sequence[Flow]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for f in flows:
        lengths = np.fromiter((x[0] for x in f), dtype=np.int64, count=len(f))
        dirs = np.fromiter((_dir_bit(x[1]) for x in f), dtype=np.int64, count=len(f))
        out.append((lengths, dirs))
    return out


def _subarrays(arrays, size):
    lens, dirs = [], []
    for lengths, d in arrays:
        if len(lengths) >= size:
            lens.append(sliding_window_view(lengths, size))
            dirs.append(sliding_window_view(d, size))
    if not lens:
        return np.empty((0, size), np.int64), np.empty((0, size), np.int64)
    return np.concatenate(lens), np.concatenate(dirs)


def extract_signatures(flows: Sequence[Flow], cfg: SignatureConfig = SignatureConfig()) -> list[Signature]:
    """Mine signatures of every size in ``[cfg.min_size, cfg.max_size]``.

    Subarrays that disagree on any direction are maximally distant, so DBSCAN
    over the whole set decomposes exactly into independent Euclidean DBSCAN
    runs, one per direction pattern.
    """
    cfg.validate()
    arrays = _flow_arrays(flows)
    found: dict[tuple, tuple[tuple[int, int, Direction], ...]] = {}
    for size in range(cfg.min_size, cfg.max_size + 1):
        lens, dirs = _subarrays(arrays, size)
        if len(lens) < cfg.s:
            continue
        weights = 1 << np.arange(size)
        patterns = dirs @ weights
        for pattern in np.unique(patterns):
            members = lens[patterns == pattern]
            if len(members) < cfg.s:
                continue
            labels = DBSCAN(eps=cfg.d, min_samples=cfg.s).fit_predict(members.astype(np.float64))
            direction = [Direction.OUTGOING if (pattern >> j) & 1 else Direction.INCOMING
                         for j in range(size)]
            for label in range(labels.max() + 1):
                cluster = members[labels == label]
                lo, hi = cluster.min(axis=0), cluster.max(axis=0)
                ranges = tuple((int(lo[j]), int(hi[j]), direction[j]) for j in range(size))
                found[tuple((a, b, c.value) for a, b, c in ranges)] = ranges
    return [Signature(f"sig{i}", found[key]) for i, key in enumerate(sorted(found))]


def _window_matrix(windows: Sequence[TrafficWindow]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([w.lengths for w in windows], dtype=np.int64).reshape(len(windows), -1)
    dirs = np.array([[_dir_bit(d) for d in w.directions] for w in windows],
                    dtype=np.int64).reshape(len(windows), -1)
    return lengths, dirs


def _match_mask(sig: Signature, lengths: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Boolean ``(n_windows, L - len(sig) + 1)`` mask of match start positions."""
    size = len(sig)
    n, L = lengths.shape
    if L < size:
        return np.zeros((n, 0), dtype=bool)
    lv = sliding_window_view(lengths, size, axis=1)
    dv = sliding_window_view(dirs, size, axis=1)
    lo = np.array([r[0] for r in sig.ranges])
    hi = np.array([r[1] for r in sig.ranges])
    want = np.array([_dir_bit(r[2]) for r in sig.ranges])
    return ((lv >= lo) & (lv <= hi) & (dv == want)).all(axis=2)


def count_support(sigs: Sequence[Signature], windows: Sequence[TrafficWindow]) -> list[Signature]:
    """Return copies of ``sigs`` with support_count = number of match positions over ``windows``."""
    if not windows:
        return [replace(s, support_count=0) for s in sigs]
    lengths, dirs = _window_matrix(windows)
    return [replace(s, support_count=int(_match_mask(s, lengths, dirs).sum())) for s in sigs]


def rank_signatures(sigs: Sequence[Signature], windows: Sequence[TrafficWindow] | None = None) -> list[Signature]:
    """Order by support x length (descending); ties prefer longer, then smaller ranges.

    When ``windows`` is given, support counts are recomputed over them first.
    """
    if windows is not None:
        sigs = count_support(sigs, windows)
    return sorted(sigs, key=lambda s: (-s.support_count * len(s), -len(s), s.sort_key()))


@dataclass
class SignatureAssignment:
    """Per-packet slot: ``(signature_id, position)`` or ``None`` for an orphan."""

    slots: list[tuple[str, int] | None]
    occurrences: list[tuple[str, int]] = field(default_factory=list)

    @property
    def n_orphans(self) -> int:
        return sum(s is None for s in self.slots)


def _greedy(L: int, ranked: Sequence[Signature], masks: Sequence[np.ndarray]) -> SignatureAssignment:
    slots: list[tuple[str, int] | None] = [None] * L
    occurrences = []
    for sig, mask in zip(ranked, masks):
        size = len(sig)
        start = 0
        while start <= L - size:
            if mask[start] and all(slots[start + j] is None for j in range(size)):
                for j in range(size):
                    slots[start + j] = (sig.signature_id, j)
                occurrences.append((sig.signature_id, start))
                start += size
            else:
                start += 1
    return SignatureAssignment(slots, occurrences)


def match_window(window: TrafficWindow | Flow, ranked: Sequence[Signature]) -> SignatureAssignment:
    """Greedy-by-rank, left-to-right first-fit, non-overlapping signature matching."""
    return match_windows([window], ranked)[0]


def match_windows(windows: Sequence[TrafficWindow | Flow], ranked: Sequence[Signature]) -> list[SignatureAssignment]:
    if not windows:
        return []
    wins = [w if isinstance(w, TrafficWindow) else
            TrafficWindow("", [_flow_record(x) for x in w]) for w in windows]
    lengths, dirs = _window_matrix(wins)
    L = lengths.shape[1]
    masks = [_match_mask(s, lengths, dirs) for s in ranked]
    return [_greedy(L, ranked, [m[i] for m in masks]) for i in range(len(wins))]


def _flow_record(item: tuple[int, Direction]) -> PacketRecord:
    return PacketRecord(item[0], item[1], 0.0, None, None, (0,) * 16, "", "")


# ---------------------------------------------------------------------------
# frame tokens

@dataclass
class FrameVocab:
    """Dense frame-token table: signature slots first (by rank), then orphans, then UNK."""

    signatures: dict[str, Signature]
    slot_tokens: dict[tuple[str, int], int]
    orphan_tokens: dict[tuple[int, Direction], int]
    unk: int

    def __post_init__(self):
        self._inverse: dict[int, tuple] = {}
        for (sid, pos), t in self.slot_tokens.items():
            self._inverse[t] = ("slot", sid, pos)
        for (length, d), t in self.orphan_tokens.items():
            self._inverse[t] = ("orphan", length, d)
        self._inverse[self.unk] = ("unk",)

    def __len__(self) -> int:
        return self.unk + 1

    @property
    def size(self) -> int:
        return self.unk + 1

    def inverse(self, token: int) -> tuple:
        return self._inverse[token]

    def token_for(self, slot: tuple[str, int] | None, length: int, direction: Direction) -> int:
        if slot is not None and slot in self.slot_tokens:
            return self.slot_tokens[slot]
        return self.orphan_tokens.get((length, direction), self.unk)

    def slot_range(self, token: int) -> tuple[int, int] | None:
        """``(min, max)`` frame length bound to a signature token, else ``None``."""
        kind = self._inverse.get(token, ("unk",))
        if kind[0] != "slot":
            return None
        lo, hi, _ = self.signatures[kind[1]].ranges[kind[2]]
        return lo, hi

    def orphan_length(self, token: int) -> int | None:
        kind = self._inverse.get(token, ("unk",))
        return kind[1] if kind[0] == "orphan" else None

    def token_direction(self, token: int) -> Direction | None:
        kind = self._inverse.get(token, ("unk",))
        if kind[0] == "slot":
            return self.signatures[kind[1]].ranges[kind[2]][2]
        if kind[0] == "orphan":
            return kind[2]
        return None

    def to_dict(self) -> dict:
        return {
            "signatures": [s.to_dict() for s in self.signatures.values()],
            "slot_tokens": [[sid, pos, t] for (sid, pos), t in self.slot_tokens.items()],
            "orphan_tokens": [[length, d.value, t] for (length, d), t in self.orphan_tokens.items()],
            "unk": self.unk,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FrameVocab":
        sigs = [Signature.from_dict(s) for s in d["signatures"]]
        return cls(
            {s.signature_id: s for s in sigs},
            {(sid, int(pos)): int(t) for sid, pos, t in d["slot_tokens"]},
            {(int(length), Direction(dv)): int(t) for length, dv, t in d["orphan_tokens"]},
            int(d["unk"]),
        )


def build_frame_vocab(assignments: Sequence[SignatureAssignment], windows: Sequence[TrafficWindow],
                      ranked: Sequence[Signature]) -> FrameVocab:
    """Token per used (signature, position), per observed orphan (length, direction), plus UNK."""
    used = {slot[0] for a in assignments for slot in a.slots if slot is not None}
    orphans = set()
    for a, w in zip(assignments, windows):
        for slot, p in zip(a.slots, w.packets):
            if slot is None:
                orphans.add((p.frame_length, p.direction))
    slot_tokens: dict[tuple[str, int], int] = {}
    sigs = {}
    for sig in ranked:
        if sig.signature_id not in used:
            continue
        sigs[sig.signature_id] = sig
        for pos in range(len(sig)):
            slot_tokens[(sig.signature_id, pos)] = len(slot_tokens)
    orphan_tokens = {}
    for key in sorted(orphans, key=lambda x: (x[0], x[1].value)):
        orphan_tokens[key] = len(slot_tokens) + len(orphan_tokens)
    return FrameVocab(sigs, slot_tokens, orphan_tokens, len(slot_tokens) + len(orphan_tokens))


@dataclass
class TokenizedWindow:
    frame_tokens: list[int]
    duration_tokens: list[int]
    directions: list[int]
    protocol_flags: list[tuple[int, ...]]
    src_ports: list[int | None]
    dst_ports: list[int | None]
    frame_lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frame_tokens)


def tokenize_window(window: TrafficWindow, assignment: SignatureAssignment, vocab: FrameVocab,
                    duration_model) -> TokenizedWindow:
    from .durations import duration_to_token

    frame_tokens = [vocab.token_for(slot, p.frame_length, p.direction)
                    for slot, p in zip(assignment.slots, window.packets)]
    return TokenizedWindow(
        frame_tokens=frame_tokens,
        duration_tokens=[duration_to_token(duration_model, p.duration) for p in window.packets],
        directions=[_dir_bit(p.direction) for p in window.packets],
        protocol_flags=[tuple(p.protocol_flags) for p in window.packets],
        src_ports=[p.src_port for p in window.packets],
        dst_ports=[p.dst_port for p in window.packets],
        frame_lengths=[p.frame_length for p in window.packets],
    )


def tokenize_windows(windows: Sequence[TrafficWindow], ranked: Sequence[Signature], vocab: FrameVocab,
                     duration_model) -> list[TokenizedWindow]:
    assignments = match_windows(windows, ranked)
    return [tokenize_window(w, a, vocab, duration_model) for w, a in zip(windows, assignments)]


def save_signature_document(path: str | Path, cfg: SignatureConfig, ranked: Sequence[Signature],
                            vocab: FrameVocab, duration_model=None) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": {"d": cfg.d, "s": cfg.s, "min_size": cfg.min_size, "max_size": cfg.max_size},
        "signatures": [s.to_dict() for s in ranked],
        "frame_vocab": vocab.to_dict(),
    }
    if duration_model is not None:
        doc["duration_model"] = duration_model.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_signature_document(path: str | Path):
    """Return ``(cfg, ranked, vocab, duration_model_or_None)``."""
    from .durations import DurationModel

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    cfg = SignatureConfig(**doc["config"])
    ranked = [Signature.from_dict(s) for s in doc["signatures"]]
    vocab = FrameVocab.from_dict(doc["frame_vocab"])
    dm = DurationModel.from_dict(doc["duration_model"]) if "duration_model" in doc else None
    return cfg, ranked, vocab, dm
