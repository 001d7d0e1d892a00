"""Command-line interface.

Subcommands: ``synth-data``, ``train``, ``eval``, ``sweep-anomalous``,
``sweep-contamination``, ``export-embeddings``. Exit code 0 on success;
on failure a machine-readable JSON error line goes to stderr and the exit
code is 2 for configuration/validation problems, 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import experiment
from .config import load_config
from .dataset import synth_generate, write_dcase_layout
from .errors import AsdkitError, ConfigurationError, ValidationError


def _add_common(parser: argparse.ArgumentParser, seed: bool = True) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file path")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    if seed:
        parser.add_argument("--seed", type=int, default=None, help="override the root seed")
    parser.add_argument(
        "--target-type",
        action="append",
        default=None,
        help="restrict to one machine type (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asdkit",
        description="Machine-sound anomaly detection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="materialize the synthetic corpus as WAV files")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None, help="override the corpus seed")

    p = sub.add_parser("train", help="train extractors and detectors")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate stored artifacts on the test split")
    _add_common(p, seed=False)
    p.add_argument("--artifacts", type=Path, default=None, help="artifact dir (default: --out)")

    for name in ("sweep-anomalous", "sweep-contamination"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} grid, retraining per point")
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--summary", action="store_true", help="print mean±stderr tables")

    p = sub.add_parser("export-embeddings", help="dump per-chunk embeddings to CSV")
    _add_common(p, seed=False)
    p.add_argument("--artifacts", type=Path, default=None, help="artifact dir (default: --out)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")

    return parser


def _run(args: argparse.Namespace) -> int:
    config = load_config(args.config)

    if args.command == "synth-data":
        spec = config.synth
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
        dataset = synth_generate(spec)
        written = write_dcase_layout(dataset, args.out)
        print(f"wrote {len(written)} WAV files under {args.out}")
        return 0

    if args.command == "train":
        summary = experiment.run_train(
            config, args.out, seed=args.seed, target_types=args.target_type
        )
        for mtype, info in summary["types"].items():
            print(f"{mtype}: checkpoint + {len(info['detectors'])} detectors, "
                  f"final loss {info['final_loss']:.4f}")
        return 0

    if args.command == "eval":
        artifacts = args.artifacts or args.out
        report = experiment.run_eval(
            config, artifacts, out_dir=args.out, target_types=args.target_type
        )
        for mtype, ru in sorted(report.rollups.items()):
            print(f"{mtype}: aAUC {ru.aauc_mean:.4f}  mAUC {ru.auc_min:.4f}")
        return 0

    if args.command == "sweep-anomalous":
        results = experiment.sweep_anomalous(config, args.out, jobs=args.jobs)
        if args.summary:
            print(experiment.summarize_sweep(results))
        print(f"wrote {Path(args.out) / 'sweep_anomalous.csv'}")
        return 0

    if args.command == "sweep-contamination":
        results = experiment.sweep_contamination(config, args.out, jobs=args.jobs)
        if args.summary:
            print(experiment.summarize_sweep(results))
        print(experiment.contamination_trend_note(results))
        print(f"wrote {Path(args.out) / 'sweep_contamination.csv'}")
        return 0

    if args.command == "export-embeddings":
        artifacts = args.artifacts or args.out
        out_path = Path(args.out) / "embeddings.csv"
        n = experiment.export_embeddings(
            config, artifacts, out_path, split=args.split, target_types=args.target_type
        )
        print(f"wrote {n} rows to {out_path}")
        return 0

    raise ConfigurationError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ConfigurationError, ValidationError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except AsdkitError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
