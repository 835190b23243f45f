"""SeqGAN over VQ code sequences.

The generator is an autoregressive stochastic policy over the K codes; the
discriminator scores complete length-C sequences. Intermediate generation
steps receive Monte-Carlo rollout rewards and the generator is updated with
REINFORCE.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, DataError, ModeCollapseError

log = logging.getLogger(__name__)


@dataclass
class GanTrainConfig:
    pretrain_epochs: int = 150
    adversarial_rounds: int = 10
    n_roll: int = 16
    batch_size: int = 64
    lr_pretrain: float = 1e-2
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-3
    disc_steps: int = 3
    disc_pretrain_epochs: int = 5
    variety_tau: float = 0.3
    temperature: float = 1.0
    emb_dim: int = 32
    hidden_dim: int = 32
    seed: int = 0

    def validate(self) -> None:
        for name in ("pretrain_epochs", "n_roll", "batch_size", "disc_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.adversarial_rounds < 0:
            raise ConfigError("adversarial_rounds must be >= 0")
        if not 0 < self.variety_tau <= 1:
            raise ConfigError("variety_tau must lie in (0, 1]")


class Policy(nn.Module):
    """Autoregressive policy: ``initial`` gives the start input, ``step`` the next-code logits."""

    vocab_size: int
    seq_len: int
    temperature: float = 1.0

    def initial(self, batch: int):
        raise NotImplementedError

    def step(self, tokens: torch.Tensor, state):
        raise NotImplementedError


class LSTMGenerator(Policy):
    def __init__(self, vocab_size: int, seq_len: int, emb_dim: int = 32, hidden_dim: int = 32,
                 temperature: float = 1.0):
        super().__init__()
        self.vocab_size, self.seq_len, self.temperature = vocab_size, seq_len, temperature
        self.hidden_dim = hidden_dim
        self.emb = nn.Embedding(vocab_size + 1, emb_dim)  # last id is the start token
        self.cell = nn.LSTMCell(emb_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, vocab_size)

    def initial(self, batch: int):
        z = torch.zeros(batch, self.hidden_dim, dtype=self.out.weight.dtype)
        return torch.full((batch,), self.vocab_size, dtype=torch.long), (z, z.clone())

    def step(self, tokens, state):
        h, c = self.cell(self.emb(tokens), state)
        return self.out(h), (h, c)


class TabularPolicy(Policy):
    """First-order Markov policy with an explicit logit table; used for enumerable toy cases."""

    def __init__(self, vocab_size: int, seq_len: int, logits: torch.Tensor | None = None):
        super().__init__()
        self.vocab_size, self.seq_len = vocab_size, seq_len
        if logits is None:
            logits = torch.zeros(vocab_size + 1, vocab_size)
        self.table = nn.Parameter(torch.as_tensor(logits, dtype=torch.float64).clone())

    def initial(self, batch: int):
        return torch.full((batch,), self.vocab_size, dtype=torch.long), None

    def step(self, tokens, state):
        return self.table[tokens], None


def _scaled(gen: Policy, logits: torch.Tensor, temperature: float | None) -> torch.Tensor:
    t = gen.temperature if temperature is None else temperature
    return logits / t


def step_distributions(gen: Policy, seqs: torch.Tensor) -> torch.Tensor:
    """Teacher-forced next-code probabilities, shape ``(B, C, K)``."""
    return torch.softmax(_teacher_forced_logits(gen, seqs), dim=-1)


def _teacher_forced_logits(gen: Policy, seqs: torch.Tensor) -> torch.Tensor:
    tokens, state = gen.initial(len(seqs))
    out = []
    for t in range(seqs.shape[1]):
        logits, state = gen.step(tokens, state)
        out.append(logits)
        tokens = seqs[:, t]
    return torch.stack(out, dim=1)


def sequence_log_probs(gen: Policy, seqs: torch.Tensor) -> torch.Tensor:
    """Per-step log p(y_t | y_<t), shape ``(B, C)``."""
    logp = torch.log_softmax(_teacher_forced_logits(gen, seqs), dim=-1)
    return logp.gather(-1, seqs.unsqueeze(-1)).squeeze(-1)


@torch.no_grad()
def _complete(gen: Policy, prefix: torch.Tensor, rng: torch.Generator, temperature: float | None = None):
    B, t = prefix.shape
    tokens, state = gen.initial(B)
    for i in range(t):
        _, state = gen.step(tokens, state)
        tokens = prefix[:, i]
    out = [prefix]
    for _ in range(gen.seq_len - t):
        logits, state = gen.step(tokens, state)
        probs = torch.softmax(_scaled(gen, logits, temperature), dim=-1)
        tokens = torch.multinomial(probs, 1, generator=rng).squeeze(1)
        out.append(tokens.unsqueeze(1))
    return torch.cat(out, dim=1)


def sample_tensor(gen: Policy, m: int, rng: torch.Generator, temperature: float | None = None) -> torch.Tensor:
    return _complete(gen, torch.zeros(m, 0, dtype=torch.long), rng, temperature)


def sample(gen: Policy, m: int, seed: int, temperature: float | None = None) -> list[list[int]]:
    """Draw ``m`` code sequences of length C, reproducible under ``seed``."""
    if m == 0:
        return []
    rng = torch.Generator().manual_seed(seed)
    gen.eval()
    return sample_tensor(gen, m, rng, temperature).tolist()


class CNNDiscriminator(nn.Module):
    """Convolutional classifier over complete code sequences (SeqGAN reference layout)."""

    def __init__(self, vocab_size: int, seq_len: int, emb_dim: int = 64,
                 filters: Sequence[tuple[int, int]] = ((2, 32), (3, 32), (4, 32), (5, 32)),
                 dropout: float = 0.25):
        super().__init__()
        self.seq_len = seq_len
        self.emb = nn.Embedding(vocab_size, emb_dim)
        self.convs = nn.ModuleList(nn.Conv1d(emb_dim, n, k) for k, n in filters if k <= seq_len)
        total = sum(c.out_channels for c in self.convs)
        self.highway = nn.Linear(total, total)
        self.gate = nn.Linear(total, total)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(total, 1)

    def logits(self, seqs: torch.Tensor) -> torch.Tensor:
        if seqs.shape[1] != self.seq_len:
            raise ValueError("the discriminator only scores complete sequences")
        e = self.emb(seqs).transpose(1, 2)
        h = torch.cat([F.relu(c(e)).max(dim=2).values for c in self.convs], dim=1)
        g = torch.sigmoid(self.gate(h))
        h = g * F.relu(self.highway(h)) + (1 - g) * h
        return self.out(self.dropout(h)).squeeze(1)

    def forward(self, seqs: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(seqs))


@torch.no_grad()
def rollout_reward(gen: Policy, disc: Callable[[torch.Tensor], torch.Tensor], prefix: Sequence[int],
                   n_roll: int, rng: torch.Generator | None = None) -> float:
    """Expected discriminator score of completions of ``prefix``.

    A complete prefix is scored directly; otherwise the score is averaged over
    ``n_roll`` completions sampled from ``gen``.
    """
    prefix_t = torch.as_tensor([list(prefix)], dtype=torch.long).reshape(1, -1)
    if prefix_t.shape[1] == gen.seq_len:
        return float(disc(prefix_t)[0])
    rng = rng or torch.Generator().manual_seed(0)
    full = _complete(gen, prefix_t.repeat(n_roll, 1), rng)
    return float(disc(full).mean())


@torch.no_grad()
def rollout_rewards(gen: Policy, disc, seqs: torch.Tensor, n_roll: int, rng: torch.Generator) -> torch.Tensor:
    """Per-step rewards ``Q[b, t]`` for the action at step t of every sequence."""
    B, C = seqs.shape
    Q = torch.empty(B, C, dtype=torch.float64)
    for t in range(1, C):
        full = _complete(gen, seqs[:, :t].repeat_interleave(n_roll, dim=0), rng)
        Q[:, t - 1] = disc(full).reshape(B, n_roll).mean(1).double()
    Q[:, C - 1] = disc(seqs).double()
    return Q


def policy_gradient_loss(gen: Policy, seqs: torch.Tensor, rewards: torch.Tensor) -> torch.Tensor:
    """REINFORCE surrogate whose negative gradient estimates grad E[reward]."""
    logp = sequence_log_probs(gen, seqs)
    return -(logp * rewards.to(logp.dtype)).sum(1).mean()


def _as_tensor(codes) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(codes), dtype=torch.long)
    if t.ndim != 2 or len(t) == 0:
        raise DataError("need a non-empty batch of equal-length code sequences")
    return t


def pretrain(gen: Policy, real_codes, cfg: GanTrainConfig) -> Policy:
    """Maximum-likelihood pretraining; per-epoch NLL is stored on ``gen.nll_history``."""
    cfg.validate()
    if len(real_codes) == 0:
        raise DataError("no real sequences to pretrain on")
    data = _as_tensor(real_codes)
    if data.shape[1] != gen.seq_len:
        raise DataError(f"sequences have length {data.shape[1]}, generator expects {gen.seq_len}")
    torch.manual_seed(cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr_pretrain)
    gen.nll_history = []
    gen.train()
    for _ in range(cfg.pretrain_epochs):
        perm = torch.randperm(len(data), generator=rng)
        total = 0.0
        for b in range(0, len(data), cfg.batch_size):
            batch = data[perm[b:b + cfg.batch_size]]
            nll = -sequence_log_probs(gen, batch).sum(1).mean()
            opt.zero_grad()
            nll.backward()
            opt.step()
            total += nll.item() * len(batch)
        gen.nll_history.append(total / len(data))
    gen.eval()
    return gen


def train_discriminator(disc: CNNDiscriminator, real: torch.Tensor, fake: torch.Tensor, epochs: int,
                        opt: torch.optim.Optimizer, rng: torch.Generator, batch_size: int = 64) -> float:
    x = torch.cat([real, fake])
    y = torch.cat([torch.ones(len(real)), torch.zeros(len(fake))])
    disc.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=rng)
        for b in range(0, len(x), batch_size):
            idx = perm[b:b + batch_size]
            loss = F.binary_cross_entropy_with_logits(disc.logits(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    disc.eval()
    return discriminator_accuracy(disc, real, fake)


@torch.no_grad()
def discriminator_accuracy(disc, real, fake) -> float:
    real, fake = torch.as_tensor(np.asarray(real)), torch.as_tensor(np.asarray(fake))
    correct = (disc(real) >= 0.5).sum() + (disc(fake) < 0.5).sum()
    return float(correct) / (len(real) + len(fake))


def adversarial_train(gen: Policy, disc: CNNDiscriminator, real_codes, cfg: GanTrainConfig):
    """Alternate REINFORCE generator steps and discriminator updates.

    Per-round curves land on ``gen.curves``. With zero rounds the generator
    is returned untouched.
    """
    cfg.validate()
    if len(real_codes) == 0:
        raise DataError("no real sequences for adversarial training")
    real = _as_tensor(real_codes)
    curves = list(getattr(gen, "curves", []))
    if cfg.adversarial_rounds == 0:
        return gen, disc
    torch.manual_seed(cfg.seed + 1)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    g_opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr_generator)
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr_discriminator)

    gen.eval()
    fake = sample_tensor(gen, len(real), rng)
    train_discriminator(disc, real, fake, cfg.disc_pretrain_epochs, d_opt, rng, cfg.batch_size)

    for rnd in range(cfg.adversarial_rounds):
        gen.eval()
        seqs = sample_tensor(gen, cfg.batch_size, rng)
        rewards = rollout_rewards(gen, disc, seqs, cfg.n_roll, rng)
        gen.train()
        loss = policy_gradient_loss(gen, seqs, rewards)
        g_opt.zero_grad()
        loss.backward()
        g_opt.step()
        gen.eval()
        with torch.no_grad():
            nll = float(-sequence_log_probs(gen, real).sum(1).mean())
        acc = 0.0
        for _ in range(cfg.disc_steps):
            fake = sample_tensor(gen, len(real), rng)
            acc = train_discriminator(disc, real, fake, 1, d_opt, rng, cfg.batch_size)
        curves.append({"round": rnd, "disc_accuracy": acc, "mean_reward": float(rewards.mean()), "nll": nll})
    gen.curves = curves
    return gen, disc


@dataclass
class VarietyResult:
    passed: bool
    distinct_ratio: float
    modal_share: float
    modal_sequence: tuple[int, ...] = field(default_factory=tuple)


def variety_check(samples: Sequence[Sequence[int]], tau: float) -> VarietyResult:
    if not samples:
        raise ValueError("variety check needs at least one sample")
    counts: dict[tuple[int, ...], int] = {}
    for s in samples:
        key = tuple(int(c) for c in s)
        counts[key] = counts.get(key, 0) + 1
    modal, modal_count = max(counts.items(), key=lambda kv: (kv[1], [-c for c in kv[0]]))
    ratio = len(counts) / len(samples)
    return VarietyResult(ratio >= tau, ratio, modal_count / len(samples), modal)


def sample_with_variety_guard(gen: Policy, m: int, seed: int, cfg: GanTrainConfig,
                              restart: Callable[[int], Policy] | None = None):
    """Sample ``m`` sequences, recovering from low variety instead of emitting it.

    Temperature is raised by 0.2 up to three times; after that the generator
    is rebuilt by ``restart(new_seed)`` (adversarial training redone from the
    pretrained checkpoint) and the ladder repeats once. Returns
    ``(samples, attempts)``.
    """
    attempts = []
    generators = [(gen, seed)]
    for round_ in range(2):
        g, s = generators[-1]
        base = g.temperature
        for bump in range(4):
            temp = base + 0.2 * bump
            out = sample(g, m, s + bump, temperature=temp)
            res = variety_check(out, cfg.variety_tau)
            attempts.append({"restart": round_, "temperature": temp, "distinct_ratio": res.distinct_ratio,
                             "modal_share": res.modal_share, "passed": res.passed})
            if res.passed:
                return out, attempts
            log.warning("low variety (%.3f < %.3f) at temperature %.2f", res.distinct_ratio, cfg.variety_tau, temp)
        if restart is None or round_ == 1:
            break
        new_seed = s + 1000
        generators.append((restart(new_seed), new_seed))
    raise ModeCollapseError(f"generated samples failed the variety check: {attempts}")


def save_checkpoint(gen: LSTMGenerator, disc: CNNDiscriminator, directory: str | Path, cfg: GanTrainConfig,
                    extra: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    torch.save(gen.state_dict(), d / "generator.pt")
    torch.save(disc.state_dict(), d / "discriminator.pt")
    manifest = {"kind": "seqgan", "config": asdict(cfg), "vocab_size": gen.vocab_size, "seq_len": gen.seq_len,
                "nll_history": getattr(gen, "nll_history", []), **(extra or {})}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_curves(d / "curves.csv", getattr(gen, "curves", []), getattr(gen, "nll_history", []))


def load_checkpoint(directory: str | Path) -> tuple[LSTMGenerator, CNNDiscriminator, GanTrainConfig]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = GanTrainConfig(**manifest["config"])
    gen = LSTMGenerator(manifest["vocab_size"], manifest["seq_len"], cfg.emb_dim, cfg.hidden_dim, cfg.temperature)
    gen.load_state_dict(torch.load(d / "generator.pt", weights_only=True))
    disc = CNNDiscriminator(manifest["vocab_size"], manifest["seq_len"])
    disc.load_state_dict(torch.load(d / "discriminator.pt", weights_only=True))
    gen.nll_history = manifest["nll_history"]
    gen.eval()
    disc.eval()
    return gen, disc, cfg


def write_curves(path: str | Path, curves: Sequence[dict], nll_history: Sequence[float] = ()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "round", "disc_accuracy", "mean_reward", "nll"])
        for i, nll in enumerate(nll_history):
            w.writerow(["pretrain", i, "", "", f"{nll:.6f}"])
        for row in curves:
            w.writerow(["adversarial", row["round"], f"{row['disc_accuracy']:.6f}",
                        f"{row['mean_reward']:.6f}", f"{row['nll']:.6f}"])
