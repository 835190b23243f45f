"""Packet-metadata adversaries and the real-vs-synthetic evaluation protocol.

The adversary sees, per packet of an L-packet window, the frame length,
timing, direction, protocol configuration and both ports. Everything except
timing is categorical, with vocabularies fitted on the training split only.
A single-layer LSTM classifies the sequence.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from sklearn.model_selection import StratifiedKFold, train_test_split
from torch import nn
from torch.nn import functional as F

from .errors import DataError
from .ingest import Direction, TrafficWindow

log = logging.getLogger(__name__)

UNK = 0
REAL, FAKE = 1, 0


@dataclass
class AdversaryConfig:
    folds: int = 5
    hidden: int = 64
    emb_dim: int = 16
    epochs: int = 40
    batch_size: int = 32
    lr: float = 3e-3


@dataclass
class AdversaryVocab:
    lengths: dict[int, int]
    protocols: dict[tuple[int, ...], int]
    ports: dict[int | None, int]
    timing_mean: float
    timing_std: float

    @classmethod
    def fit(cls, windows: Sequence[TrafficWindow]) -> "AdversaryVocab":
        packets = [p for w in windows for p in w.packets]
        lengths = sorted({p.frame_length for p in packets})
        protos = sorted({tuple(p.protocol_flags) for p in packets})
        ports = sorted({q for p in packets for q in (p.src_port, p.dst_port)}, key=lambda v: (v is not None, v or 0))
        durations = np.array([p.duration for p in packets], dtype=np.float64)
        std = float(durations.std()) if len(durations) else 1.0
        return cls(
            {v: i + 1 for i, v in enumerate(lengths)},
            {v: i + 1 for i, v in enumerate(protos)},
            {v: i + 1 for i, v in enumerate(ports)},
            float(durations.mean()) if len(durations) else 0.0,
            std if std > 0 else 1.0,
        )

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.lengths) + 1, len(self.protocols) + 1, len(self.ports) + 1


@dataclass
class AdversaryInput:
    length: torch.Tensor
    direction: torch.Tensor
    protocol: torch.Tensor
    src_port: torch.Tensor
    dst_port: torch.Tensor
    timing: torch.Tensor

    def __getitem__(self, idx) -> "AdversaryInput":
        return AdversaryInput(*(getattr(self, f)[idx] for f in
                                ("length", "direction", "protocol", "src_port", "dst_port", "timing")))

    def unk_rate(self, name: str) -> float:
        return float((getattr(self, name) == UNK).float().mean())


def encode_features(windows: Sequence[TrafficWindow], vocab: AdversaryVocab) -> AdversaryInput:
    rows = [w.packets for w in windows]
    return AdversaryInput(
        length=torch.tensor([[vocab.lengths.get(p.frame_length, UNK) for p in r] for r in rows], dtype=torch.long),
        direction=torch.tensor([[int(p.direction == Direction.OUTGOING) for p in r] for r in rows], dtype=torch.long),
        protocol=torch.tensor([[vocab.protocols.get(tuple(p.protocol_flags), UNK) for p in r] for r in rows],
                              dtype=torch.long),
        src_port=torch.tensor([[vocab.ports.get(p.src_port, UNK) for p in r] for r in rows], dtype=torch.long),
        dst_port=torch.tensor([[vocab.ports.get(p.dst_port, UNK) for p in r] for r in rows], dtype=torch.long),
        timing=torch.tensor([[(p.duration - vocab.timing_mean) / vocab.timing_std for p in r] for r in rows],
                            dtype=torch.float32),
    )


class LSTMClassifier(nn.Module):
    def __init__(self, vocab: AdversaryVocab, n_classes: int, cfg: AdversaryConfig):
        super().__init__()
        n_len, n_proto, n_port = vocab.sizes
        e = cfg.emb_dim
        self.length = nn.Embedding(n_len, e)
        self.direction = nn.Embedding(2, e)
        self.protocol = nn.Embedding(n_proto, e)
        self.src_port = nn.Embedding(n_port, e)
        self.dst_port = nn.Embedding(n_port, e)
        self.lstm = nn.LSTM(5 * e + 1, cfg.hidden, batch_first=True)
        self.out = nn.Linear(cfg.hidden, n_classes)

    def forward(self, x: AdversaryInput) -> torch.Tensor:
        h = torch.cat([self.length(x.length), self.direction(x.direction), self.protocol(x.protocol),
                       self.src_port(x.src_port), self.dst_port(x.dst_port), x.timing.unsqueeze(-1)], dim=-1)
        _, (hn, _) = self.lstm(h)
        return self.out(hn[-1])


@dataclass
class TrainedAdversary:
    vocab: AdversaryVocab
    model: LSTMClassifier
    labels: list[str]
    curve: list[float] = field(default_factory=list)

    @torch.no_grad()
    def predict(self, windows: Sequence[TrafficWindow]) -> np.ndarray:
        self.model.eval()
        return self.model(encode_features(windows, self.vocab)).argmax(-1).numpy()

    def accuracy(self, windows: Sequence[TrafficWindow], y: Sequence[int]) -> float:
        return float((self.predict(windows) == np.asarray(y)).mean())


def _fit(windows: Sequence[TrafficWindow], y: Sequence[int], n_classes: int, cfg: AdversaryConfig,
         seed: int, labels: list[str]) -> TrainedAdversary:
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    vocab = AdversaryVocab.fit(windows)
    x = encode_features(windows, vocab)
    y_t = torch.as_tensor(np.asarray(y), dtype=torch.long)
    model = LSTMClassifier(vocab, n_classes, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    curve = []
    model.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(len(y_t), generator=gen)
        total = 0.0
        for b in range(0, len(perm), cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            loss = F.cross_entropy(model(x[idx]), y_t[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(perm))
    model.eval()
    return TrainedAdversary(vocab, model, labels, curve)


def _balance(real: Sequence, fake: Sequence, rng: np.random.Generator):
    n = min(len(real), len(fake))
    if len(real) != len(fake):
        log.info("balancing classes: real %d, fake %d -> %d each", len(real), len(fake), n)
    pick = lambda xs: [xs[i] for i in np.sort(rng.choice(len(xs), size=n, replace=False))]  # noqa: E731
    return (pick(real), pick(fake)) if len(real) != len(fake) else (list(real), list(fake))


def train_realfake(real: Sequence[TrafficWindow], fake: Sequence[TrafficWindow],
                   cfg: AdversaryConfig = AdversaryConfig(), seed: int = 0) -> TrainedAdversary:
    """Binary real (1) vs synthetic (0) classifier on equal class counts."""
    if not real or not fake:
        raise DataError("both real and synthetic windows are required")
    real, fake = _balance(real, fake, np.random.default_rng(seed))
    return _fit(list(real) + list(fake), [REAL] * len(real) + [FAKE] * len(fake), 2, cfg, seed, ["fake", "real"])


@dataclass
class EvaluationReport:
    device_id: str
    method: str
    fold_accuracies: list[float]
    mean_accuracy: float
    n_real: int
    n_fake: int
    config: dict = field(default_factory=dict)
    fold_unk_rates: list[float] = field(default_factory=list)
    fold_train_counts: list[tuple[int, int]] = field(default_factory=list)


def cross_validate(real: Sequence[TrafficWindow], fake: Sequence[TrafficWindow], folds: int = 5,
                   cfg: AdversaryConfig = AdversaryConfig(), seed: int = 0, device_id: str = "",
                   method: str = "") -> EvaluationReport:
    """Stratified k-fold real-vs-fake accuracy on an equal amount of real and synthetic windows."""
    if folds < 2:
        raise DataError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    real, fake = _balance(real, fake, rng)
    if len(real) < folds:
        raise DataError(f"{len(real)} windows per class is fewer than {folds} folds")
    windows = list(real) + list(fake)
    y = np.array([REAL] * len(real) + [FAKE] * len(fake))
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs, unk_rates, counts = [], [], []
    for j, (tr, te) in enumerate(skf.split(np.zeros(len(y)), y)):
        tr_real = [windows[i] for i in tr if y[i] == REAL]
        tr_fake = [windows[i] for i in tr if y[i] == FAKE]
        adv = train_realfake(tr_real, tr_fake, cfg, seed + 1 + j)
        test = [windows[i] for i in te]
        accs.append(adv.accuracy(test, y[te]))
        unk_rates.append(encode_features(test, adv.vocab).unk_rate("length"))
        n_bal = min(len(tr_real), len(tr_fake))
        counts.append((n_bal, n_bal))
    return EvaluationReport(device_id, method, accs, sum(accs) / len(accs), len(real), len(fake),
                            {"folds": folds, "seed": seed, **asdict(cfg)}, unk_rates, counts)


def null_calibration(real: Sequence[TrafficWindow], folds: int = 5, cfg: AdversaryConfig = AdversaryConfig(),
                     seed: int = 0, device_id: str = "") -> EvaluationReport:
    """Real-vs-real control: a random half of the real windows is relabelled as synthetic."""
    perm = np.random.default_rng(seed).permutation(len(real))
    half = len(real) // 2
    a = [real[i] for i in np.sort(perm[:half])]
    b = [real[i] for i in np.sort(perm[half:2 * half])]
    return cross_validate(a, b, folds, cfg, seed, device_id, "real-vs-real")


def train_device_classifier(corpora: Mapping[str, Sequence[TrafficWindow]], cfg: AdversaryConfig = AdversaryConfig(),
                            seed: int = 0, test_size: float = 0.2) -> tuple[TrainedAdversary, dict[str, float]]:
    """Multi-class device-type classifier; returns held-out accuracy per device."""
    labels = sorted(corpora)
    if len(labels) < 2:
        raise DataError("device classification needs at least two device labels")
    windows = [w for lab in labels for w in corpora[lab]]
    y = np.array([i for i, lab in enumerate(labels) for _ in corpora[lab]])
    tr, te = train_test_split(np.arange(len(y)), test_size=test_size, stratify=y, random_state=seed)
    adv = _fit([windows[i] for i in tr], y[tr], len(labels), cfg, seed, labels)
    pred = adv.predict([windows[i] for i in te])
    per_device = {lab: float((pred[y[te] == i] == i).mean()) for i, lab in enumerate(labels)}
    return adv, per_device


def uniform_random_windows(like: Sequence[TrafficWindow], seed: int, max_length: int = 1514) -> list[TrafficWindow]:
    """Baseline generator: every metadata field drawn uniformly at random."""
    from .ingest import N_PROTOCOLS, PacketRecord

    rng = np.random.default_rng(seed)
    max_dur = max((p.duration for w in like for p in w.packets), default=1.0) or 1.0
    out = []
    for k, w in enumerate(like):
        packets = [PacketRecord(
            frame_length=int(rng.integers(42, max_length + 1)),
            direction=Direction.OUTGOING if rng.integers(2) else Direction.INCOMING,
            duration=float(rng.uniform(0, max_dur)),
            src_port=int(rng.integers(0, 65536)),
            dst_port=int(rng.integers(0, 65536)),
            protocol_flags=tuple(int(b) for b in rng.integers(0, 2, N_PROTOCOLS)),
            capture_id=f"uniform-{k:05d}",
            device_id=w.device_id,
        ) for _ in w.packets]
        out.append(TrafficWindow(w.device_id, packets, f"uniform-{k:05d}", 0))
    return out


def write_report_csv(reports: Sequence[EvaluationReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["device", "method", "mean_accuracy", "fold_accuracies", "n_real", "n_fake"])
        for r in reports:
            w.writerow([r.device_id, r.method, f"{r.mean_accuracy:.6f}",
                        " ".join(f"{a:.6f}" for a in r.fold_accuracies), r.n_real, r.n_fake])


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_table(rows: Sequence[EvaluationReport | Mapping]) -> str:
    """Device x method accuracy table, one column per generator."""
    cells: dict[str, dict[str, float]] = {}
    methods: list[str] = []
    for r in rows:
        device = r.device_id if isinstance(r, EvaluationReport) else r["device"]
        method = r.method if isinstance(r, EvaluationReport) else r["method"]
        acc = r.mean_accuracy if isinstance(r, EvaluationReport) else float(r["mean_accuracy"])
        cells.setdefault(device, {})[method] = acc
        if method not in methods:
            methods.append(method)
    width = max([len("Device")] + [len(d) for d in cells]) + 2
    cols = [max(len(m), 7) + 2 for m in methods]
    line = "+" + "-" * width + "+" + "+".join("-" * c for c in cols) + "+"
    out = [line, "|" + " Device".ljust(width) + "|" + "|".join((" " + m).ljust(c) for m, c in zip(methods, cols)) + "|",
           line]
    for device in sorted(cells):
        vals = [cells[device].get(m) for m in methods]
        txt = [(" " + (f"{v * 100:.1f}%" if v is not None else "-")).ljust(c) for v, c in zip(vals, cols)]
        out.append("|" + (" " + device).ljust(width) + "|" + "|".join(txt) + "|")
    out.append(line)
    return "\n".join(out)
