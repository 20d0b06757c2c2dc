"""Command-line entry point: ``hisr --stage NAME [--config PATH] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from .pipeline import STAGES, MissingArtifactError, Pipeline

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hisr", description="Segment-level credit assignment pipeline for the sub-goal text environment.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--stage", default="all", choices=STAGES + ("all",))
    p.add_argument("--reward", choices=cfgmod.REWARD_VARIANTS, help="reward variant for ppo-train")
    p.add_argument("--out", help="run directory (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra config override, repeatable")
    return p


def _error_line(kind: str, message: str, **extra) -> str:
    return "ERROR " + json.dumps({"type": kind, "message": message, **extra}, sort_keys=True)


def main(argv=None) -> int:
    level = os.environ.get("HISR_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        extra = {}
        for item in args.set:
            if "=" not in item:
                raise cfgmod.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            extra[k.strip()] = v.strip()
        cfg = cfgmod.load(args.config, seed=args.seed, out=args.out, reward=args.reward, **extra)
        pipe = Pipeline(cfg)
        pipe.root.mkdir(parents=True, exist_ok=True)
        (pipe.root / "config.txt").write_text(cfg.dumps())
        pipe.run(args.stage)
    except MissingArtifactError as e:
        print(_error_line("missing-artifact", str(e), stage=e.stage, needs=str(e.path), producer=e.producer))
        return 3
    except cfgmod.ConfigError as e:
        print(_error_line("config", str(e)))
        return 2
    except (ValueError, OSError) as e:
        print(_error_line(type(e).__name__, str(e)))
        return 1
    print(f"OK stage={args.stage} out={cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
