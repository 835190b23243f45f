"""Vector-quantized sequence-transformer autoencoder (VQ-STAE).

Each packet of a tokenized window is embedded field by field, contextualised
by a transformer encoder and snapped to its nearest codebook vector, giving
one discrete code per packet. A transformer decoder maps the quantized
sequence back to per-field categorical predictions.

The codebook follows the VQ-VAE recipe with exponential-moving-average
updates, a beta-weighted commitment loss and a straight-through estimator.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DataError, InvalidTokenError, VocabMismatchError
from .ingest import N_PROTOCOLS
from .signatures import TokenizedWindow

log = logging.getLogger(__name__)

PORT_ABSENT = 0
PORT_UNK = 1
FIELDS = ("frame", "duration", "direction", "flags", "src_port", "dst_port")


@dataclass
class VqstaeConfig:
    K: int = 64
    D: int = 64
    beta: float = 0.25
    ema_decay: float = 0.99
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.0
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    time_budget_s: float | None = None

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError(f"codebook size K={self.K} must be >= 2")
        if self.D < 1:
            raise ConfigError(f"embedding size D={self.D} must be >= 1")
        if self.D % self.n_heads:
            raise ConfigError("D must be divisible by n_heads")


@dataclass
class FeatureSpec:
    """Categorical arities of the per-packet feature vector for one device model."""

    L: int
    n_frame: int
    n_duration: int
    ports: list[int] = field(default_factory=list)   # id = index + 2

    def __post_init__(self):
        self._port_ids = {p: i + 2 for i, p in enumerate(self.ports)}

    @property
    def n_port(self) -> int:
        return len(self.ports) + 2

    def port_id(self, port: int | None) -> int:
        if port is None:
            return PORT_ABSENT
        return self._port_ids.get(port, PORT_UNK)

    def port_value(self, pid: int) -> int | None:
        """Inverse of ``port_id``; ``None`` for ABSENT, ``-1`` for UNK."""
        if pid == PORT_ABSENT:
            return None
        if pid == PORT_UNK:
            return -1
        return self.ports[pid - 2]

    @classmethod
    def from_windows(cls, windows: Sequence[TokenizedWindow], n_frame: int, n_duration: int) -> "FeatureSpec":
        ports = sorted({p for w in windows for p in (*w.src_ports, *w.dst_ports) if p is not None})
        return cls(len(windows[0]), n_frame, n_duration, ports)

    def to_dict(self) -> dict:
        return {"L": self.L, "n_frame": self.n_frame, "n_duration": self.n_duration, "ports": self.ports}


@dataclass
class FeatureVector:
    frame: int
    duration: int
    direction: int
    flags: tuple[int, ...]
    src_port: int
    dst_port: int


def featurize(window: TokenizedWindow, i: int, spec: FeatureSpec) -> FeatureVector:
    """Feature vector of packet ``i``; unseen ports map to the port UNK id."""
    return FeatureVector(
        frame=window.frame_tokens[i],
        duration=window.duration_tokens[i],
        direction=window.directions[i],
        flags=tuple(window.protocol_flags[i]),
        src_port=spec.port_id(window.src_ports[i]),
        dst_port=spec.port_id(window.dst_ports[i]),
    )


def featurize_batch(windows: Sequence[TokenizedWindow], spec: FeatureSpec) -> dict[str, torch.Tensor]:
    for w in windows:
        if len(w) != spec.L:
            raise VocabMismatchError(f"window length {len(w)} != model length {spec.L}")
        if max(w.frame_tokens) >= spec.n_frame or min(w.frame_tokens) < 0:
            raise VocabMismatchError("frame token outside the model vocabulary")
        if max(w.duration_tokens) >= spec.n_duration or min(w.duration_tokens) < 0:
            raise VocabMismatchError("duration token outside the model vocabulary")
    return {
        "frame": torch.tensor([w.frame_tokens for w in windows], dtype=torch.long),
        "duration": torch.tensor([w.duration_tokens for w in windows], dtype=torch.long),
        "direction": torch.tensor([w.directions for w in windows], dtype=torch.long),
        "flags": torch.tensor([[list(f) for f in w.protocol_flags] for w in windows], dtype=torch.long),
        "src_port": torch.tensor([[spec.port_id(p) for p in w.src_ports] for w in windows], dtype=torch.long),
        "dst_port": torch.tensor([[spec.port_id(p) for p in w.dst_ports] for w in windows], dtype=torch.long),
    }


def quantize(codebook, z) -> tuple[int, np.ndarray]:
    """Nearest codebook entry by squared Euclidean distance, lowest index on ties."""
    cb = np.asarray(codebook, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    dist = ((cb - z[None, :]) ** 2).sum(axis=1)
    code = int(np.argmin(dist))
    return code, cb[code]


class EMACodebook(nn.Module):
    def __init__(self, K: int, D: int, decay: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.K, self.D, self.decay, self.eps = K, D, decay, eps
        self.register_buffer("embedding", torch.randn(K, D) * 0.1)
        self.register_buffer("cluster_size", torch.zeros(K))
        self.register_buffer("embed_avg", self.embedding.clone())
        self.register_buffer("initialized", torch.tensor(False))

    def codes(self, z: torch.Tensor) -> torch.Tensor:
        # exact squared differences so equidistant inputs resolve to the lowest index
        dist = ((z.unsqueeze(-2) - self.embedding) ** 2).sum(-1)
        return dist.argmin(-1)

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        return F.embedding(codes, self.embedding)

    @torch.no_grad()
    def init_from(self, flat: torch.Tensor, gen: torch.Generator) -> None:
        idx = torch.randint(len(flat), (self.K,), generator=gen)
        self.embedding.copy_(flat[idx])
        self.embed_avg.copy_(flat[idx])
        self.cluster_size.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, flat: torch.Tensor, codes: torch.Tensor) -> None:
        onehot = F.one_hot(codes, self.K).type(flat.dtype)
        self.cluster_size.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.embed_avg.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
        n = self.cluster_size.sum()
        size = (self.cluster_size + self.eps) / (n + self.K * self.eps) * n
        self.embedding.copy_(self.embed_avg / size.unsqueeze(1))

    @torch.no_grad()
    def reseed(self, dead: torch.Tensor, flat: torch.Tensor, gen: torch.Generator) -> None:
        idx = torch.randint(len(flat), (int(dead.sum()),), generator=gen)
        self.embedding[dead] = flat[idx]
        self.embed_avg[dead] = flat[idx]
        self.cluster_size[dead] = 1.0


class VqstaeModel(nn.Module):
    def __init__(self, spec: FeatureSpec, cfg: VqstaeConfig):
        super().__init__()
        cfg.validate()
        self.spec, self.cfg = spec, cfg
        D = cfg.D
        self.frame_emb = nn.Embedding(spec.n_frame, D)
        self.duration_emb = nn.Embedding(spec.n_duration, D)
        self.direction_emb = nn.Embedding(2, D)
        self.flag_proj = nn.Linear(N_PROTOCOLS, D)
        self.src_port_emb = nn.Embedding(spec.n_port, D)
        self.dst_port_emb = nn.Embedding(spec.n_port, D)
        self.enc_pos = nn.Parameter(torch.randn(spec.L, D) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(spec.L, D) * 0.02)
        self.encoder = self._stack()
        self.pre_quant = nn.Linear(D, D)
        self.codebook = EMACodebook(cfg.K, D, cfg.ema_decay)
        self.decoder = self._stack()
        self.heads = nn.ModuleDict({
            "frame": nn.Linear(D, spec.n_frame),
            "duration": nn.Linear(D, spec.n_duration),
            "direction": nn.Linear(D, 2),
            "flags": nn.Linear(D, N_PROTOCOLS * 2),
            "src_port": nn.Linear(D, spec.n_port),
            "dst_port": nn.Linear(D, spec.n_port),
        })
        self.history: list[dict] = []

    def _stack(self) -> nn.TransformerEncoder:
        cfg = self.cfg
        layer = nn.TransformerEncoderLayer(cfg.D, cfg.n_heads, cfg.ff_dim, cfg.dropout, batch_first=True)
        return nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)

    def encode_continuous(self, x: Mapping[str, torch.Tensor]) -> torch.Tensor:
        h = (self.frame_emb(x["frame"]) + self.duration_emb(x["duration"]) + self.direction_emb(x["direction"])
             + self.flag_proj(x["flags"].to(self.enc_pos.dtype)) + self.src_port_emb(x["src_port"])
             + self.dst_port_emb(x["dst_port"]) + self.enc_pos)
        return self.pre_quant(self.encoder(h))

    def decode_logits(self, q: torch.Tensor) -> dict[str, torch.Tensor]:
        h = self.decoder(q + self.dec_pos)
        out = {name: head(h) for name, head in self.heads.items()}
        out["flags"] = out["flags"].view(*h.shape[:-1], N_PROTOCOLS, 2)
        return out

    def forward(self, x, quantize: bool = True):
        z = self.encode_continuous(x)
        if not quantize:
            return self.decode_logits(z), z, z, None
        codes = self.codebook.codes(z)
        q = self.codebook.lookup(codes)
        q_st = z + (q - z).detach()
        return self.decode_logits(q_st), z, q, codes


def reconstruction_loss(logits: Mapping[str, torch.Tensor], x: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Sum over heads of the mean categorical cross-entropy (each flag is its own head)."""
    total = 0.0
    for name in FIELDS:
        lg = logits[name]
        total = total + F.cross_entropy(lg.reshape(-1, lg.shape[-1]), x[name].reshape(-1),
                                        reduction="sum") / x["frame"].numel()
    return total


def _slice(x: Mapping[str, torch.Tensor], idx) -> dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in x.items()}


def field_accuracy(model: VqstaeModel, windows: Sequence[TokenizedWindow]) -> dict[str, float]:
    x = featurize_batch(windows, model.spec)
    model.eval()
    with torch.no_grad():
        logits, *_ = model(x)
    return {name: float((logits[name].argmax(-1) == x[name]).float().mean()) for name in FIELDS}


def train_vqstae(windows: Sequence[TokenizedWindow], cfg: VqstaeConfig, spec: FeatureSpec) -> VqstaeModel:
    """Train a VQ-STAE on tokenized windows; loss history is kept on ``model.history``."""
    cfg.validate()
    if not windows:
        raise DataError("no training windows")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = VqstaeModel(spec, cfg)
    x = featurize_batch(windows, spec)
    n = len(windows)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    start = time.monotonic()

    model.train()
    with torch.no_grad():
        z0 = model.encode_continuous(_slice(x, torch.randperm(n, generator=gen)[:cfg.batch_size]))
    model.codebook.init_from(z0.reshape(-1, cfg.D), gen)

    for epoch in range(cfg.epochs):
        usage = torch.zeros(cfg.K, dtype=torch.long)
        sums = {"recon": 0.0, "commitment": 0.0, "codebook": 0.0}
        perm = torch.randperm(n, generator=gen)
        last_flat = None
        for b in range(0, n, cfg.batch_size):
            xb = _slice(x, perm[b:b + cfg.batch_size])
            logits, z, q, codes = model(xb)
            recon = reconstruction_loss(logits, xb)
            commitment = F.mse_loss(z, q.detach())
            codebook_loss = F.mse_loss(q, z.detach())
            loss = recon + cfg.beta * commitment
            opt.zero_grad()
            loss.backward()
            opt.step()
            flat = z.detach().reshape(-1, cfg.D)
            model.codebook.ema_update(flat, codes.reshape(-1))
            usage += torch.bincount(codes.reshape(-1), minlength=cfg.K)
            last_flat = flat
            w = len(perm[b:b + cfg.batch_size]) / n
            sums["recon"] += recon.item() * w
            sums["commitment"] += commitment.item() * w
            sums["codebook"] += codebook_loss.item() * w
        dead = usage == 0
        if dead.any() and epoch + 1 < cfg.epochs:
            model.codebook.reseed(dead, last_flat, gen)
        model.history.append({"epoch": epoch, **sums, "codes_used": int((~dead).sum())})
        if cfg.time_budget_s is not None and time.monotonic() - start > cfg.time_budget_s:
            log.warning("VQ-STAE time budget reached after %d epochs", epoch + 1)
            break
    model.eval()
    return model


def encode_batch(model: VqstaeModel, windows: Sequence[TokenizedWindow]) -> np.ndarray:
    x = featurize_batch(windows, model.spec)
    model.eval()
    with torch.no_grad():
        return model.codebook.codes(model.encode_continuous(x)).numpy()


def encode(model: VqstaeModel, window: TokenizedWindow) -> list[int]:
    return encode_batch(model, [window])[0].tolist()


@dataclass
class DecodedWindow:
    frame_tokens: list[int]
    duration_tokens: list[int]
    directions: list[int]
    protocol_flags: list[tuple[int, ...]]
    src_port_ids: list[int]
    dst_port_ids: list[int]


def decode_batch(model: VqstaeModel, codes) -> list[DecodedWindow]:
    codes = torch.as_tensor(np.asarray(codes), dtype=torch.long)
    if codes.ndim != 2 or codes.shape[1] != model.spec.L:
        raise VocabMismatchError(f"code sequences must have shape (m, {model.spec.L})")
    if codes.numel() and (codes.min() < 0 or codes.max() >= model.cfg.K):
        raise InvalidTokenError(f"codes must lie in [0, {model.cfg.K})")
    model.eval()
    with torch.no_grad():
        logits = model.decode_logits(model.codebook.lookup(codes))
    pred = {k: v.argmax(-1).numpy() for k, v in logits.items()}
    return [DecodedWindow(
        frame_tokens=pred["frame"][i].tolist(),
        duration_tokens=pred["duration"][i].tolist(),
        directions=pred["direction"][i].tolist(),
        protocol_flags=[tuple(int(b) for b in row) for row in pred["flags"][i]],
        src_port_ids=pred["src_port"][i].tolist(),
        dst_port_ids=pred["dst_port"][i].tolist(),
    ) for i in range(len(codes))]


def decode(model: VqstaeModel, codes: Sequence[int]) -> DecodedWindow:
    return decode_batch(model, [list(codes)])[0]


def save_model(model: VqstaeModel, directory: str | Path, extra: Mapping | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "weights.pt")
    manifest = {"kind": "vqstae", "config": asdict(model.cfg), "spec": model.spec.to_dict(),
                "history": model.history, **(extra or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_model(directory: str | Path) -> VqstaeModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    model = VqstaeModel(FeatureSpec(**manifest["spec"]), VqstaeConfig(**manifest["config"]))
    model.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
    model.history = manifest["history"]
    model.eval()
    return model
