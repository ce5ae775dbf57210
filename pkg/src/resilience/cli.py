"""Command-line entry point.

Each stage subcommand runs the pipeline up to and including that stage
(earlier stages are recomputed from the same seeds, so outputs match a full
run). ``report`` re-hashes an existing output directory into a fresh
manifest. Exit codes: 0 success, 2 config validation failure, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .pipeline import STAGES, ConfigError, Pipeline, PipelineConfig, StageError, reference_config, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("resilience")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: the bundled reference synthetic config)")
    common.add_argument("--seed", type=int, help="override the config's master seed")
    common.add_argument("--out", help="override the config's output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="accepted for interface stability; stages run single-threaded, so results never depend on it")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="resilience", description="Academic resilience indicators and explained models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate (or ingest) the table",
        "indicators": "SAR1-SAR4 labels and the rates table",
        "summarize": "group contrasts per indicator",
        "grid-search": "cross-validated model comparison",
        "fit": "final boosted model per indicator",
        "explain": "SHAP matrices, rankings, beeswarm and local profiles",
        "depend": "partial dependence / odds-ratio curves",
        "subsample": "paired importance across two sub-systems",
        "report": "re-hash an output directory into manifest.json",
        "run": "all stages",
    }
    for name in (*STAGES, "run"):
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def load_config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = PipelineConfig.from_dict(reference_config())
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw["seed"] = args.seed
    if args.out:
        cfg.output_dir = args.out
    cfg.threads = args.threads
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "report":
            out = Path(cfg.output_dir)
            if not out.is_dir():
                raise ConfigError(f"output directory {out} does not exist")
            path = write_manifest(out, cfg)
            print(path)
            return EXIT_OK
        pipeline = Pipeline(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        artifacts = pipeline.run("report" if args.command == "run" else args.command)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(json.dumps({"output_dir": cfg.output_dir, "artifacts": len(artifacts)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
