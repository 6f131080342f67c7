"""Command-line entry point: ``memfail <stage> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error (including a
feature-schema mismatch between a model and its input).
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .pipeline import DEFAULT_FLOW, ConfigError, DataError, load_config, run_stage
from .trace import TraceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--workdir", help="directory holding stage inputs and outputs")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="worker threads (accepted; execution is single-threaded)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="memfail", description="DRAM failure prediction pipeline")
    p.add_argument("--version", action="version", version=f"memfail {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic trace with ground truth")
    s.add_argument("--profile", help="purley, whitley or k920")
    s.add_argument("--n-dimms", type=int, dest="n_dimms")
    s.add_argument("--days", type=float, dest="duration_days")

    s = sub.add_parser("ingest", parents=[common], help="convert a CSV or JSONL log into the canonical trace")
    s.add_argument("source", nargs="?", help="input log")
    s.add_argument("--format", dest="ingest_format", choices=("csv", "jsonl"))
    s.add_argument("--column-map", dest="column_map", help="JSON file mapping canonical fields to CSV columns")
    s.add_argument("--timestamp-format", dest="timestamp_format", choices=("ms", "s", "iso"))
    s.add_argument("--reject-ceiling", type=float, dest="reject_ceiling")

    sub.add_parser("analyze", parents=[common], help="fault diagnosis and UE-rate tables")
    s = sub.add_parser("featurize", parents=[common], help="build train/holdout feature matrices")
    s.add_argument("--mode", dest="featurize_mode", choices=("batch", "stream"))
    s = sub.add_parser("train", parents=[common], help="fit a predictor")
    s.add_argument("--model", choices=("gbdt", "forest", "rules"))
    s = sub.add_parser("predict", parents=[common], help="score the holdout matrix")
    s.add_argument("--threshold", type=float, dest="decision_threshold")
    sub.add_parser("evaluate", parents=[common], help="DIMM-level precision, recall, F1 and VIRR")
    sub.add_parser("report", parents=[common], help="UE-rate tables by fault mode and bit pattern")
    s = sub.add_parser("run", parents=[common], help="run simulate through report in order")
    s.add_argument("--profile")
    s.add_argument("--n-dimms", type=int, dest="n_dimms")
    s.add_argument("--days", type=float, dest="duration_days")
    s.add_argument("--model", choices=("gbdt", "forest", "rules"))
    return p


_OVERRIDE_KEYS = ("workdir", "seed", "threads", "profile", "n_dimms", "duration_days", "ingest_format",
                  "column_map", "timestamp_format", "reject_ceiling", "featurize_mode", "model",
                  "decision_threshold")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "source", None):
        overrides["ingest_source"] = args.source
    try:
        cfg = load_config(args.config, overrides)
        stages = DEFAULT_FLOW if args.command == "run" else (args.command,)
        for stage in stages:
            path = run_stage(stage, cfg)
            print(f"{stage}: wrote {path}")
    except ConfigError as exc:
        print(f"memfail: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TraceError) as exc:
        print(f"memfail: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
