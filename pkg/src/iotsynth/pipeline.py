"""Config-driven per-device pipeline with manifests and resume.

Layout of an output directory::

    <out>/run.json
    <out>/report.csv, report.txt
    <out>/<device>/<stage>/manifest.json + stage outputs

A stage is skipped on rerun when its manifest exists, its recorded outputs
exist with the recorded hashes, its config section hash is unchanged and its
upstream manifests are the ones it was built from.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import yaml

from .errors import ConfigError, StageError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DATASET_ENV = "IOTSYNTH_DATASET_ROOT"
STAGES = ("ingest", "signatures", "durations", "vqstae", "seqgan", "reconstruct", "generate", "synthesize",
          "evaluate")
UPSTREAM = {
    "ingest": (),
    "signatures": ("ingest",),
    "durations": ("ingest",),
    "vqstae": ("ingest", "signatures", "durations"),
    "seqgan": ("vqstae",),
    "reconstruct": ("ingest", "signatures", "durations", "vqstae"),
    "generate": ("signatures", "durations", "vqstae", "seqgan", "reconstruct"),
    "synthesize": ("generate",),
    "evaluate": ("ingest", "generate"),
}
METHOD = "iotsynth"


# ---------------------------------------------------------------------------
# configuration

def _defaults(cls) -> dict:
    return asdict(cls())


def _section_defaults() -> dict:
    from .adversary import AdversaryConfig
    from .reconstruct import FrameLengthConfig
    from .seqgan import GanTrainConfig
    from .signatures import SignatureConfig
    from .synthesize import Addressing
    from .vqstae import VqstaeConfig

    return {
        "signatures": _defaults(SignatureConfig),
        "vqstae": _defaults(VqstaeConfig),
        "gan": _defaults(GanTrainConfig),
        "reconstruction": _defaults(FrameLengthConfig),
        "adversary": _defaults(AdversaryConfig),
        "addressing": _defaults(Addressing),
    }


@dataclass
class PipelineConfig:
    dataset_root: str = ""
    output_dir: str = "iotsynth_out"
    devices: list[str] = field(default_factory=list)
    L: int = 20
    n: int = 256
    n_synthetic: int | None = None
    duration_k: int = 8
    master_seed: int = 0
    workers: int = 1
    baselines: dict[str, str] = field(default_factory=dict)
    uniform_baseline: bool = True
    null_experiment: bool = True
    signatures: dict = field(default_factory=dict)
    vqstae: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    reconstruction: dict = field(default_factory=dict)
    adversary: dict = field(default_factory=dict)
    addressing: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for name, default in _section_defaults().items():
            section = getattr(self, name)
            unknown = set(section) - set(default)
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
            setattr(self, name, {**default, **section})

    # typed views ----------------------------------------------------------
    def signature_config(self):
        from .signatures import SignatureConfig
        return SignatureConfig(**self.signatures)

    def vqstae_config(self, seed: int):
        from .vqstae import VqstaeConfig
        return VqstaeConfig(**{**self.vqstae, "seed": seed})

    def gan_config(self, seed: int):
        from .seqgan import GanTrainConfig
        return GanTrainConfig(**{**self.gan, "seed": seed})

    def frame_config(self, seed: int):
        from .reconstruct import FrameLengthConfig
        return FrameLengthConfig(**{**self.reconstruction, "seed": seed})

    def adversary_config(self):
        from .adversary import AdversaryConfig
        return AdversaryConfig(**self.adversary)

    def addressing_config(self):
        from .synthesize import Addressing
        return Addressing(**self.addressing)

    # ---------------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def resolved_devices(self) -> list[str]:
        if self.devices:
            return list(self.devices)
        root = Path(self.dataset_root)
        return sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []

    def validate(self) -> "PipelineConfig":
        if not self.dataset_root:
            self.dataset_root = os.environ.get(DATASET_ENV, "")
        if not self.dataset_root:
            raise ConfigError(f"no dataset root given (config, --dataset-root or ${DATASET_ENV})")
        root = Path(self.dataset_root)
        if not root.is_dir():
            raise ConfigError(f"dataset root {root} does not exist")
        devices = self.resolved_devices()
        if not devices:
            raise ConfigError(f"no device directories under {root}")
        for dev in devices:
            if not (root / dev).is_dir():
                raise ConfigError(f"device directory {root / dev} does not exist")
        for name, path in self.baselines.items():
            for dev in devices:
                p = Path(path.format(device=dev))
                if not p.is_file():
                    raise ConfigError(f"baseline {name}: {p} does not exist")
        if self.L < 2:
            raise ConfigError("L must be >= 2")
        if self.n < 1 or (self.n_synthetic is not None and self.n_synthetic < 1):
            raise ConfigError("n and n_synthetic must be >= 1")
        if self.duration_k < 1:
            raise ConfigError("duration_k must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.signature_config().validate(self.L)
            self.vqstae_config(0).validate()
            self.gan_config(0).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def section(self, stage: str) -> dict:
        """The config fields a stage's outputs depend on."""
        base = {"L": self.L, "master_seed": self.master_seed}
        per_stage = {
            "ingest": {"dataset_root": str(Path(self.dataset_root).resolve()), "n": self.n},
            "signatures": {"signatures": self.signatures},
            "durations": {"duration_k": self.duration_k},
            "vqstae": {"vqstae": self.vqstae},
            "seqgan": {"gan": self.gan},
            "reconstruct": {"reconstruction": self.reconstruction},
            "generate": {"n_synthetic": self.n_synthetic, "n": self.n, "variety_tau": self.gan["variety_tau"]},
            "synthesize": {"addressing": self.addressing},
            "evaluate": {"adversary": self.adversary, "baselines": self.baselines,
                         "uniform_baseline": self.uniform_baseline, "null_experiment": self.null_experiment},
        }
        return {**base, **per_stage[stage]}


def load_config(path: str | Path) -> PipelineConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return PipelineConfig.from_dict(data)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(cfg: PipelineConfig, overrides: Mapping[str, str]) -> PipelineConfig:
    """Apply ``a.b=value`` style overrides; values are parsed as YAML scalars."""
    d = copy.deepcopy(cfg.to_dict())
    for key, raw in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"cannot override {key}: {p} is not a section")
            node = node[p]
        if parts[-1] not in node and node is d:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = _parse_scalar(raw) if isinstance(raw, str) else raw
    return PipelineConfig.from_dict(d)


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_outputs(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): _hash_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p != root / "manifest.json"}


def stage_seed(master_seed: int, stage: str, device: str) -> int:
    """Independent, order-free seed per (stage, device) derived from the master seed."""
    ss = np.random.SeedSequence([master_seed, STAGES.index(stage), zlib.crc32(device.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------------------
# stage implementations; each reads upstream outputs from disk

class Context:
    def __init__(self, cfg: PipelineConfig, device: str):
        self.cfg = cfg
        self.device = device
        self.root = Path(cfg.output_dir) / device

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg.master_seed, stage, self.device)

    # shared loaders -----------------------------------------------------
    def windows(self):
        from .ingest import read_windows
        return read_windows(self.dir("ingest") / "windows.jsonl", self.cfg.L)

    def signature_doc(self):
        from .signatures import load_signature_document
        return load_signature_document(self.dir("signatures") / "signatures.json")

    def duration_model(self):
        from .durations import DurationModel
        return DurationModel.from_dict(json.loads((self.dir("durations") / "durations.json").read_text()))

    def tokenized(self):
        from .signatures import tokenize_windows
        _, ranked, vocab, _ = self.signature_doc()
        return tokenize_windows(self.windows(), ranked, vocab, self.duration_model())

    def vqstae(self):
        from .vqstae import load_model
        return load_model(self.dir("vqstae") / "model")


def stage_ingest(ctx: Context, out: Path, seed: int) -> dict:
    from .ingest import ingest_device, make_windows, write_records, write_window_manifest, write_windows

    records = ingest_device(ctx.cfg.dataset_root, ctx.device)
    if not records:
        raise ValueError(f"no captures for device {ctx.device}")
    write_records(out / "records.jsonl", (r for cid in sorted(records) for r in records[cid]))
    windows = make_windows(records, ctx.cfg.L, ctx.cfg.n, seed)
    write_windows(out / "windows.jsonl", windows)
    write_window_manifest(out / "windows_manifest.json", windows)
    return {"captures": len(records), "records": sum(map(len, records.values())), "windows": len(windows)}


def stage_signatures(ctx: Context, out: Path, seed: int) -> dict:
    from .ingest import read_records
    from .signatures import (build_frame_vocab, extract_signatures, flow_of, match_windows, rank_signatures,
                             save_signature_document)

    by_capture: dict[str, list] = {}
    for r in read_records(ctx.dir("ingest") / "records.jsonl"):
        by_capture.setdefault(r.capture_id, []).append(r)
    flows = [flow_of(by_capture[c]) for c in sorted(by_capture)]
    cfg = ctx.cfg.signature_config()
    windows = ctx.windows()
    ranked = rank_signatures(extract_signatures(flows, cfg), windows)
    assignments = match_windows(windows, ranked)
    vocab = build_frame_vocab(assignments, windows, ranked)
    save_signature_document(out / "signatures.json", cfg, ranked, vocab)
    orphans = sum(a.n_orphans for a in assignments)
    return {"signatures": len(ranked), "used_signatures": len(vocab.signatures), "frame_vocab": len(vocab),
            "orphan_fraction": orphans / (len(windows) * ctx.cfg.L)}


def stage_durations(ctx: Context, out: Path, seed: int) -> dict:
    from .durations import fit_duration_partitions

    durations = [p.duration for w in ctx.windows() for p in w.packets]
    model = fit_duration_partitions(durations, ctx.cfg.duration_k)
    (out / "durations.json").write_text(json.dumps(model.to_dict(), indent=1, sort_keys=True))
    return {"k": model.k, "centroids_log10": model.centroids}


def stage_vqstae(ctx: Context, out: Path, seed: int) -> dict:
    from .vqstae import FeatureSpec, encode_batch, field_accuracy, save_model, train_vqstae

    tokenized = ctx.tokenized()
    _, _, vocab, _ = ctx.signature_doc()
    spec = FeatureSpec.from_windows(tokenized, len(vocab), ctx.duration_model().k)
    model = train_vqstae(tokenized, ctx.cfg.vqstae_config(seed), spec)
    acc = field_accuracy(model, tokenized)
    save_model(model, out / "model", {"field_accuracy": acc})
    codes = encode_batch(model, tokenized)
    (out / "codes.json").write_text(json.dumps(codes.tolist()))
    return {"field_accuracy": acc, "codes_used": len(np.unique(codes))}


def stage_seqgan(ctx: Context, out: Path, seed: int) -> dict:
    from .seqgan import save_checkpoint

    codes = json.loads((ctx.dir("vqstae") / "codes.json").read_text())
    cfg = ctx.cfg.gan_config(seed)
    K = ctx.cfg.vqstae["K"]
    gen, disc = _train_gan(codes, K, ctx.cfg.L, cfg)
    save_checkpoint(gen, disc, out / "checkpoint", cfg)
    last = gen.curves[-1] if getattr(gen, "curves", None) else {}
    return {"final_nll": gen.nll_history[-1] if gen.nll_history else None, "last_round": last}


def _train_gan(codes, K: int, L: int, cfg):
    import torch

    from .seqgan import CNNDiscriminator, LSTMGenerator, adversarial_train, pretrain

    torch.manual_seed(cfg.seed)
    gen = LSTMGenerator(K, L, cfg.emb_dim, cfg.hidden_dim, cfg.temperature)
    pretrain(gen, codes, cfg)
    disc = CNNDiscriminator(K, L)
    return adversarial_train(gen, disc, codes, cfg)


def stage_reconstruct(ctx: Context, out: Path, seed: int) -> dict:
    from .reconstruct import save_frame_model, train_frame_length_model

    tokenized = ctx.tokenized()
    _, _, vocab, _ = ctx.signature_doc()
    codes = json.loads((ctx.dir("vqstae") / "codes.json").read_text())
    model = train_frame_length_model([t.frame_tokens for t in tokenized], codes,
                                     [t.frame_lengths for t in tokenized], vocab, ctx.cfg.vqstae["K"],
                                     ctx.cfg.frame_config(seed))
    save_frame_model(model, out / "frame_model")
    return {"train_accuracy": model.train_accuracy}


def stage_generate(ctx: Context, out: Path, seed: int) -> dict:
    from .ingest import write_windows
    from .reconstruct import load_frame_model, reconstruct_windows
    from .seqgan import load_checkpoint, sample_with_variety_guard
    from .vqstae import decode_batch

    gen, _, gcfg = load_checkpoint(ctx.dir("seqgan") / "checkpoint")
    codes_real = json.loads((ctx.dir("vqstae") / "codes.json").read_text())
    m = ctx.cfg.n_synthetic or ctx.cfg.n

    def restart(new_seed: int):
        g, _ = _train_gan(codes_real, ctx.cfg.vqstae["K"], ctx.cfg.L, dataclasses.replace(gcfg, seed=new_seed))
        return g

    samples, attempts = sample_with_variety_guard(gen, m, seed, gcfg, restart)
    model = ctx.vqstae()
    _, _, vocab, _ = ctx.signature_doc()
    decoded = decode_batch(model, samples)
    frame_model = load_frame_model(ctx.dir("reconstruct") / "frame_model")
    provenance = {"generator": METHOD, "device": ctx.device, "seed": seed}
    windows = reconstruct_windows(decoded, samples, frame_model, vocab, ctx.duration_model(), model.spec,
                                  np.random.default_rng(seed), ctx.device, f"{ctx.device}-syn", provenance)
    write_windows(out / "synthetic.jsonl", windows)
    (out / "codes.json").write_text(json.dumps(samples))
    return {"windows": len(windows), "variety_attempts": attempts}


def stage_synthesize(ctx: Context, out: Path, seed: int) -> dict:
    from .ingest import read_windows
    from .synthesize import build_capture, write_capture

    windows = read_windows(ctx.dir("generate") / "synthetic.jsonl", ctx.cfg.L)
    addressing = ctx.cfg.addressing_config()
    blueprints = build_capture(windows, addressing, np.random.default_rng(seed))
    write_capture(blueprints, out / "synthetic.pcap", addressing.linktype)
    stand_ins = sorted({n for bp in blueprints for n in bp.stand_in})
    return {"packets": len(blueprints), "payload_stand_ins": stand_ins}


def stage_evaluate(ctx: Context, out: Path, seed: int) -> dict:
    from .adversary import cross_validate, null_calibration, uniform_random_windows
    from .ingest import read_windows

    cfg = ctx.cfg.adversary_config()
    real = ctx.windows()
    fake = read_windows(ctx.dir("generate") / "synthetic.jsonl", ctx.cfg.L)
    reports = [cross_validate(real, fake, cfg.folds, cfg, seed, ctx.device, METHOD)]
    if ctx.cfg.uniform_baseline:
        reports.append(cross_validate(real, uniform_random_windows(real, seed), cfg.folds, cfg, seed,
                                      ctx.device, "uniform"))
    for name, path in sorted(ctx.cfg.baselines.items()):
        ext = read_windows(path.format(device=ctx.device), ctx.cfg.L)
        reports.append(cross_validate(real, ext, cfg.folds, cfg, seed, ctx.device, name))
    if ctx.cfg.null_experiment:
        reports.append(null_calibration(real, cfg.folds, cfg, seed, ctx.device))
    rows = [asdict(r) for r in reports]
    (out / "evaluation.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    return {r.method: r.mean_accuracy for r in reports}


STAGE_FUNCS: dict[str, Callable[[Context, Path, int], dict]] = {
    "ingest": stage_ingest,
    "signatures": stage_signatures,
    "durations": stage_durations,
    "vqstae": stage_vqstae,
    "seqgan": stage_seqgan,
    "reconstruct": stage_reconstruct,
    "generate": stage_generate,
    "synthesize": stage_synthesize,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------------------
# orchestration

def _manifest_path(ctx: Context, stage: str) -> Path:
    return ctx.dir(stage) / "manifest.json"


def _upstream_hashes(ctx: Context, stage: str) -> dict[str, str]:
    return {u: _hash_file(_manifest_path(ctx, u)) for u in UPSTREAM[stage]}


def stage_complete(ctx: Context, stage: str, extra_outputs: tuple[Path, ...] = ()) -> bool:
    mpath = _manifest_path(ctx, stage)
    if not mpath.is_file() or any(not p.is_file() for p in extra_outputs):
        return False
    try:
        manifest = json.loads(mpath.read_text())
        if manifest.get("stage_config_hash") != _hash_obj(ctx.cfg.section(stage)):
            return False
        if manifest.get("upstream") != _upstream_hashes(ctx, stage):
            return False
    except (OSError, ValueError):
        return False
    for rel, digest in manifest.get("outputs", {}).items():
        p = ctx.dir(stage) / rel
        if not p.is_file() or _hash_file(p) != digest:
            return False
    return True


def _run_stage(ctx: Context, stage: str) -> dict:
    import shutil

    import torch

    out = ctx.dir(stage)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    seed = ctx.seed(stage)
    torch.manual_seed(seed)
    summary = STAGE_FUNCS[stage](ctx, out, seed)
    manifest = {
        "stage": stage,
        "device": ctx.device,
        "schema_version": SCHEMA_VERSION,
        "stage_seed": seed,
        "master_seed": ctx.cfg.master_seed,
        "config_hash": _hash_obj({k: v for k, v in ctx.cfg.to_dict().items() if k not in ("workers",)}),
        "stage_config_hash": _hash_obj(ctx.cfg.section(stage)),
        "upstream": _upstream_hashes(ctx, stage),
        "outputs": _hash_outputs(out),
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return manifest


@dataclass
class DeviceResult:
    device: str
    executed: list[str]
    skipped: list[str]


def run_device(cfg: PipelineConfig, device: str, until: str = "evaluate") -> DeviceResult:
    """Run (or resume) the stages of one device up to and including ``until``."""
    import torch

    torch.set_num_threads(1)
    ctx = Context(cfg, device)
    ctx.root.mkdir(parents=True, exist_ok=True)
    report = Path(cfg.output_dir) / "report.csv"
    executed, skipped = [], []
    for stage in STAGES[:STAGES.index(until) + 1]:
        extra = (report,) if stage == "evaluate" else ()
        if stage_complete(ctx, stage, extra):
            skipped.append(stage)
            continue
        log.info("[%s] running stage %s", device, stage)
        try:
            _run_stage(ctx, stage)
        except Exception as exc:
            (ctx.root / "error.txt").write_text(f"{stage}: {type(exc).__name__}: {exc}\n")
            raise StageError(stage, device, exc) from exc
        executed.append(stage)
    err = ctx.root / "error.txt"
    if err.exists():
        err.unlink()
    return DeviceResult(device, executed, skipped)


@dataclass
class RunResult:
    output_dir: Path
    devices: dict[str, DeviceResult]
    report: Path | None = None


def write_report(cfg: PipelineConfig, devices: list[str]) -> Path:
    from .adversary import EvaluationReport, render_table, write_report_csv

    reports = []
    for dev in devices:
        rows = json.loads((Path(cfg.output_dir) / dev / "evaluate" / "evaluation.json").read_text())
        reports += [EvaluationReport(**{**r, "fold_train_counts": [tuple(c) for c in r["fold_train_counts"]]})
                    for r in rows]
    out = Path(cfg.output_dir)
    write_report_csv(reports, out / "report.csv")
    (out / "report.txt").write_text(render_table(reports) + "\n")
    return out / "report.csv"


def run_pipeline(cfg: PipelineConfig, until: str = "evaluate") -> RunResult:
    """Validate, then run every configured device up to ``until``, resuming completed stages."""
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until}")
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    devices = cfg.resolved_devices()
    (out / "run.json").write_text(json.dumps({"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
                                              "config_hash": _hash_obj(cfg.to_dict()), "devices": devices},
                                             indent=1, sort_keys=True))
    results: dict[str, DeviceResult] = {}
    if cfg.workers > 1 and len(devices) > 1:
        with ProcessPoolExecutor(min(cfg.workers, len(devices)), mp_context=get_context("spawn")) as pool:
            futures = {dev: pool.submit(run_device, cfg, dev, until) for dev in devices}
            for dev, fut in futures.items():
                results[dev] = fut.result()
    else:
        for dev in devices:
            results[dev] = run_device(cfg, dev, until)
    report = None
    if until == "evaluate":
        try:
            report = write_report(cfg, devices)
        except Exception as exc:
            raise StageError("evaluate", None, exc) from exc
    return RunResult(out, results, report)
