"""Command line interface.

Subcommands map to pipeline stages:

  simulate     generate synthetic scans, frames, labels from a scene
  reconstruct  fuse scans into the TSDF volume and extract the mesh
  texture      visibility + view selection + color optimization + atlas
  semantic     visibility + vote accumulation + MRF label fusion
  evaluate     mesh accuracy against the analytic ground-truth scene
  all          every enabled stage in order

Flags --seed, --threads and --output-dir override the config file, as do
the environment variables LIDARMESH_SEED, LIDARMESH_THREADS and
LIDARMESH_OUTPUT_DIR (flags win).
"""

from __future__ import annotations

import argparse
import json
import sys

from .pipeline import (ConfigError, PipelineConfig, StageError, load_config,
                       run_pipeline)

_SUBCOMMANDS = {
    "simulate": [],
    "reconstruct": ["reconstruct", "mesh"],
    "texture": ["visibility", "texture"],
    "semantic": ["visibility", "semantic"],
    "evaluate": ["evaluate"],
    "all": None,  # every enabled stage
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarmesh",
        description="LiDAR mesh reconstruction, texturing and semantic labeling")
    parser.add_argument("command", choices=sorted(_SUBCOMMANDS))
    parser.add_argument("--config", required=False,
                        help="TOML or JSON pipeline configuration")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--output-dir", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = PipelineConfig(**overrides)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        json.dump({"error_type": type(exc).__name__, "message": str(exc)},
                  sys.stderr)
        sys.stderr.write("\n")
        return 2

    simulate_first = args.command == "simulate" or (
        args.command == "all" and not cfg.scans_dir)
    only = _SUBCOMMANDS[args.command]
    if args.command == "simulate":
        only = []
    try:
        results = run_pipeline(cfg, only=only, simulate_first=simulate_first)
    except StageError as exc:
        json.dump({"stage": exc.stage, "error_type": type(exc.cause).__name__,
                   "message": str(exc.cause)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except ConfigError as exc:
        json.dump({"error_type": "ConfigError", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    for stage, metrics in results.items():
        line = {k: v for k, v in metrics.items() if k != "artifacts"}
        print(f"[{stage}] " + json.dumps(line, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
