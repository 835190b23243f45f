"""Command-line entry point.

Exit codes: 0 success, 1 configuration or validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, IotSynthError, StageError

log = logging.getLogger("iotsynth")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2

# subcommand -> last stage it runs (earlier stages are resumed or run as needed)
PIPELINE_COMMANDS = {
    "ingest": ("ingest", "parse captures and sample windows"),
    "mine-signatures": ("durations", "extract signatures, frame vocabulary and duration partitions"),
    "train": ("reconstruct", "train the autoencoder, sequence GAN and frame-length model"),
    "generate": ("generate", "sample synthetic metadata windows (JSONL)"),
    "synth-pcap": ("synthesize", "write synthetic windows as pcap files"),
    "evaluate": ("evaluate", "real-vs-synthetic adversary evaluation and report.csv"),
    "run-all": ("evaluate", "every stage end to end"),
}


def _pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML pipeline config")
    p.add_argument("--dataset-root", help="dataset root (default: config, then $IOTSYNTH_DATASET_ROOT)")
    p.add_argument("-o", "--output-dir", help="artifact directory")
    p.add_argument("--devices", nargs="+", help="device ids (default: every directory under the dataset root)")
    p.add_argument("--seed", type=int, dest="master_seed", help="master seed")
    p.add_argument("--workers", type=int, help="devices processed concurrently")
    p.add_argument("--linktype", type=int, choices=(1, 101), help="pcap link type for synthesized captures")
    p.add_argument("--device-address", help="address used as the synthetic device")
    p.add_argument("--peer-network", help="CIDR the synthetic peers are drawn from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. --set vqstae.epochs=50")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in PIPELINE_COMMANDS.items():
        _pipeline_args(sub.add_parser(name, help=help_))

    rep = sub.add_parser("report", help="render report.csv as a table")
    rep.add_argument("path", help="report.csv or the artifact directory holding it")

    toy = sub.add_parser("make-toy-corpus", help="write the synthetic toy capture corpus")
    toy.add_argument("-o", "--output-dir", required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--spec", help="YAML toy-corpus spec (default: built-in two-device spec)")
    return parser


def resolve_config(args: argparse.Namespace):
    from .pipeline import PipelineConfig, apply_overrides, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    for attr, key in (("dataset_root", "dataset_root"), ("output_dir", "output_dir"), ("devices", "devices"),
                      ("master_seed", "master_seed"), ("workers", "workers"), ("linktype", "addressing.linktype"),
                      ("device_address", "addressing.device_address"),
                      ("peer_network", "addressing.peer_network")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    return apply_overrides(cfg, overrides)


def _run_pipeline_command(args) -> int:
    from .pipeline import dump_config, run_pipeline

    cfg = resolve_config(args)
    if args.print_config:
        print(dump_config(cfg), end="")
        return EXIT_OK
    result = run_pipeline(cfg, until=PIPELINE_COMMANDS[args.command][0])
    for dev, r in result.devices.items():
        print(f"{dev}: ran {', '.join(r.executed) or 'nothing'}; resumed {', '.join(r.skipped) or 'nothing'}")
    if result.report is not None:
        print((result.output_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def _report(args) -> int:
    from .adversary import read_report_csv, render_table

    path = Path(args.path)
    if path.is_dir():
        path = path / "report.csv"
    if not path.is_file():
        raise ConfigError(f"{path} does not exist")
    print(render_table(read_report_csv(path)))
    return EXIT_OK


def _toy(args) -> int:
    import yaml

    from .toycorpus import make_toy_corpus, spec_from_dict

    spec = None
    if args.spec:
        try:
            spec = spec_from_dict(yaml.safe_load(Path(args.spec).read_text()))
        except (OSError, TypeError, KeyError, yaml.YAMLError) as exc:
            raise ConfigError(f"bad toy-corpus spec {args.spec}: {exc}") from exc
    out = make_toy_corpus(spec, args.seed, args.output_dir)
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return _report(args)
        if args.command == "make-toy-corpus":
            return _toy(args)
        return _run_pipeline_command(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except IotSynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
