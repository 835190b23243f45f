"""Turn decoded code sequences back into concrete packet metadata windows."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .durations import DurationModel, sample_duration
from .errors import DataError
from .ingest import PROTO_INDEX, Direction, PacketRecord, TrafficWindow
from .signatures import FrameVocab
from .vqstae import DecodedWindow, FeatureSpec

log = logging.getLogger(__name__)

EPHEMERAL_PORTS = (49152, 65535)


@dataclass
class FrameLengthConfig:
    w: int = 2
    b: int = 2
    noise_dim: int = 8
    emb_dim: int = 16
    hidden: int = 128
    epochs: int = 80
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


class FrameLengthModel(nn.Module):
    """MLP over a +/-w window of frame tokens and codes, the previous b lengths and a noise vector."""

    def __init__(self, n_frame: int, n_codes: int, lengths: Sequence[int], cfg: FrameLengthConfig,
                 support: dict[int, list[int]] | None = None, unk_lengths: dict[int, int] | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_frame, self.n_codes = n_frame, n_codes
        self.lengths = list(lengths)
        self.length_index = {v: i for i, v in enumerate(self.lengths)}
        self.support = support or {}
        self.unk_lengths = unk_lengths or {}
        span = 2 * cfg.w + 1
        self.frame_emb = nn.Embedding(n_frame + 1, cfg.emb_dim)     # last id = PAD
        self.code_emb = nn.Embedding(n_codes + 1, cfg.emb_dim)
        self.len_emb = nn.Embedding(len(self.lengths) + 1, cfg.emb_dim)
        width = (2 * span + cfg.b) * cfg.emb_dim + cfg.noise_dim
        self.mlp = nn.Sequential(
            nn.Linear(width, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, len(self.lengths)),
        )
        self.train_accuracy: float | None = None

    @property
    def pad_length_id(self) -> int:
        return len(self.lengths)

    def context(self, frames: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """Embedded token/code windows for every position, shape ``(M, L, feat)``."""
        w = self.cfg.w
        fpad = F.pad(frames, (w, w), value=self.n_frame)
        cpad = F.pad(codes, (w, w), value=self.n_codes)
        fwin = fpad.unfold(1, 2 * w + 1, 1)
        cwin = cpad.unfold(1, 2 * w + 1, 1)
        M, L = frames.shape
        return torch.cat([self.frame_emb(fwin).reshape(M, L, -1), self.code_emb(cwin).reshape(M, L, -1)], dim=-1)

    def logits(self, ctx: torch.Tensor, prev: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        lead = prev.shape[:-1]
        return self.mlp(torch.cat([ctx, self.len_emb(prev).reshape(*lead, -1), noise], dim=-1))


def _lookbehind(length_ids: torch.Tensor, b: int, pad: int) -> torch.Tensor:
    """``(M, L, b)`` ids of the b previous lengths, most recent last."""
    if b == 0:
        return length_ids.new_zeros(*length_ids.shape, 0)
    padded = F.pad(length_ids, (b, 0), value=pad)
    return padded.unfold(1, b, 1)[:, :-1]


def train_frame_length_model(frame_tokens, codes, lengths, vocab: FrameVocab, n_codes: int,
                             cfg: FrameLengthConfig = FrameLengthConfig()) -> FrameLengthModel:
    """Fit the frame-length classifier with teacher forcing on the true previous lengths."""
    frames = torch.as_tensor(np.asarray(frame_tokens), dtype=torch.long)
    codes_t = torch.as_tensor(np.asarray(codes), dtype=torch.long)
    lens = np.asarray(lengths)
    if frames.numel() == 0:
        raise DataError("no windows to train the frame-length model on")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    distinct = sorted(int(v) for v in np.unique(lens))
    support: dict[int, set[int]] = {}
    unk = Counter()
    for tok, length in zip(frames.reshape(-1).tolist(), lens.reshape(-1).tolist()):
        support.setdefault(tok, set()).add(int(length))
        if vocab.orphan_length(tok) is not None:
            unk[int(length)] += 1
    if not unk:
        unk = Counter(int(v) for v in lens.reshape(-1))
    model = FrameLengthModel(len(vocab), n_codes, distinct, cfg,
                             {t: sorted(s) for t, s in support.items()}, dict(sorted(unk.items())))
    targets = torch.as_tensor(np.vectorize(model.length_index.get)(lens), dtype=torch.long)
    prev = _lookbehind(targets, cfg.b, model.pad_length_id)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    M, L = frames.shape
    flat_idx = torch.arange(M * L)
    for _ in range(cfg.epochs):
        perm = flat_idx[torch.randperm(M * L, generator=gen)]
        for s in range(0, M * L, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            rows, cols = idx // L, idx % L
            ctx = model.context(frames[rows], codes_t[rows])[torch.arange(len(idx)), cols]
            noise = torch.randn(len(idx), cfg.noise_dim, generator=gen)
            loss = F.cross_entropy(model.logits(ctx, prev[rows, cols], noise), targets[rows, cols])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        ctx = model.context(frames, codes_t)
        noise = torch.randn(M, L, cfg.noise_dim, generator=gen)
        pred = model.logits(ctx, prev, noise).argmax(-1)
    model.train_accuracy = float((pred == targets).float().mean())
    return model


@torch.no_grad()
def predict_frame_lengths_batch(model: FrameLengthModel, vocab: FrameVocab, frame_tokens, codes,
                                rng: np.random.Generator) -> np.ndarray:
    """Autoregressive left-to-right sampling of frame lengths for ``M`` windows at once.

    Orphan tokens return their bound length; signature tokens sample from the
    model restricted to lengths seen with that token, then clamp into the
    signature range; UNK draws from the empirical orphan length distribution.
    """
    frames = torch.as_tensor(np.asarray(frame_tokens), dtype=torch.long)
    codes_t = torch.as_tensor(np.asarray(codes), dtype=torch.long)
    M, L = frames.shape
    cfg = model.cfg
    model.eval()
    # out-of-vocabulary tokens are treated as UNK (the last id) for the context too
    ctx = model.context(frames.clamp(0, model.n_frame - 1), codes_t)
    pad = model.pad_length_id
    history = torch.full((M, cfg.b + L), pad, dtype=torch.long)
    out = np.zeros((M, L), dtype=np.int64)
    unk_vals = np.array(list(model.unk_lengths), dtype=np.int64)
    unk_p = np.array(list(model.unk_lengths.values()), dtype=np.float64)
    unk_p = unk_p / unk_p.sum() if len(unk_p) else unk_p
    lengths = np.asarray(model.lengths)

    for t in range(L):
        prev = history[:, t:t + cfg.b]
        noise = torch.as_tensor(rng.standard_normal((M, cfg.noise_dim)), dtype=torch.float32)
        probs = torch.softmax(model.logits(ctx[:, t], prev, noise), dim=-1).double().numpy()
        for i in range(M):
            tok = int(frames[i, t])
            fixed = vocab.orphan_length(tok)
            if fixed is not None:
                value = fixed
            elif tok == vocab.unk or tok >= len(vocab):
                value = int(rng.choice(unk_vals, p=unk_p)) if len(unk_vals) else int(lengths[0])
            else:
                p = probs[i]
                allowed = model.support.get(tok)
                if allowed:
                    mask = np.zeros_like(p)
                    mask[[model.length_index[v] for v in allowed]] = 1.0
                    p = p * mask
                    p = p / p.sum() if p.sum() > 0 else mask / mask.sum()
                value = int(lengths[rng.choice(len(p), p=p / p.sum())])
                bounds = vocab.slot_range(tok)
                if bounds is not None:
                    value = min(max(value, bounds[0]), bounds[1])
            out[i, t] = value
            history[i, cfg.b + t] = model.length_index.get(value, pad)
    return out


def predict_frame_lengths(model: FrameLengthModel, vocab: FrameVocab, frame_tokens: Sequence[int],
                          codes: Sequence[int], rng: np.random.Generator) -> list[int]:
    return predict_frame_lengths_batch(model, vocab, [list(frame_tokens)], [list(codes)], rng)[0].tolist()


_REQUIRES_TCP = ("HTTP", "HTTPS")
_REQUIRES_UDP = ("DHCP", "BOOTP", "SSDP", "MDNS", "NTP")


def sanitize_flags(flags: Sequence[int]) -> tuple[int, ...]:
    """Make a decoded flag vector internally consistent (one transport, IP under it)."""
    f = [int(b) for b in flags]
    ix = PROTO_INDEX
    if f[ix["TCP"]] and f[ix["UDP"]]:
        f[ix["UDP"]] = 0
    if f[ix["TCP"]] or f[ix["UDP"]] or f[ix["ICMP"]]:
        f[ix["IP"]] = 1
    if f[ix["IP"]]:
        f[ix["ARP"]] = 0
    for name in _REQUIRES_TCP:
        if not f[ix["TCP"]]:
            f[ix[name]] = 0
    for name in _REQUIRES_UDP:
        if not f[ix["UDP"]]:
            f[ix[name]] = 0
    if not (f[ix["TCP"]] or f[ix["UDP"]]):
        f[ix["DNS"]] = 0
    return tuple(f)


@dataclass
class SyntheticWindow(TrafficWindow):
    provenance: dict = field(default_factory=dict)

    @property
    def timestamps(self) -> list[float]:
        ts = np.concatenate([[0.0], np.cumsum([p.duration for p in self.packets])[:-1]])
        return ts.tolist()


def _port(pid: int, spec: FeatureSpec, has_transport: bool, rng: np.random.Generator) -> int | None:
    if not has_transport:
        return None
    value = spec.port_value(pid)
    if value is None or value < 0:
        return int(rng.integers(EPHEMERAL_PORTS[0], EPHEMERAL_PORTS[1] + 1))
    return value


def assemble_flow(decoded: DecodedWindow, frame_lengths: Sequence[int], duration_model: DurationModel,
                  spec: FeatureSpec, rng: np.random.Generator, capture_id: str, device_id: str,
                  provenance: dict | None = None) -> SyntheticWindow:
    """Combine decoded fields, predicted lengths and sampled durations into L records."""
    packets = []
    for i in range(len(decoded.frame_tokens)):
        flags = sanitize_flags(decoded.protocol_flags[i])
        transport = bool(flags[PROTO_INDEX["TCP"]] or flags[PROTO_INDEX["UDP"]])
        packets.append(PacketRecord(
            frame_length=int(frame_lengths[i]),
            direction=Direction.OUTGOING if decoded.directions[i] else Direction.INCOMING,
            duration=sample_duration(duration_model, decoded.duration_tokens[i], rng),
            src_port=_port(decoded.src_port_ids[i], spec, transport, rng),
            dst_port=_port(decoded.dst_port_ids[i], spec, transport, rng),
            protocol_flags=flags,
            capture_id=capture_id,
            device_id=device_id,
        ))
    return SyntheticWindow(device_id, packets, capture_id, 0, provenance=dict(provenance or {}))


def reconstruct_windows(decoded: Sequence[DecodedWindow], codes, frame_model: FrameLengthModel,
                        vocab: FrameVocab, duration_model: DurationModel, spec: FeatureSpec,
                        rng: np.random.Generator, device_id: str, batch_id: str,
                        provenance: dict | None = None) -> list[SyntheticWindow]:
    if not decoded:
        return []
    lengths = predict_frame_lengths_batch(frame_model, vocab, [d.frame_tokens for d in decoded], codes, rng)
    return [assemble_flow(d, lengths[i], duration_model, spec, rng, f"{batch_id}-{i:05d}", device_id, provenance)
            for i, d in enumerate(decoded)]


def save_frame_model(model: FrameLengthModel, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), d / "weights.pt")
    manifest = {"kind": "frame_length", "config": asdict(model.cfg), "n_frame": model.n_frame,
                "n_codes": model.n_codes, "lengths": model.lengths,
                "support": {str(k): v for k, v in model.support.items()},
                "unk_lengths": {str(k): v for k, v in model.unk_lengths.items()},
                "train_accuracy": model.train_accuracy}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_frame_model(directory: str | Path) -> FrameLengthModel:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    model = FrameLengthModel(m["n_frame"], m["n_codes"], m["lengths"], FrameLengthConfig(**m["config"]),
                             {int(k): v for k, v in m["support"].items()},
                             {int(k): v for k, v in m["unk_lengths"].items()})
    model.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
    model.train_accuracy = m["train_accuracy"]
    model.eval()
    return model
