"""Command-line entry point: ``shortcut-lens {train,eval,analyze,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or request.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigValidationError, ExperimentConfig, load_config, parse_config
from .dataio import ConfigError, DataError
from .evaluation import EvalError
from .experiment import (
    UsageError,
    analyze_checkpoint,
    evaluate_checkpoint,
    out_dir_for,
    sweep_experiment,
    train_experiment,
)
from .training import NonFiniteLossError

log = logging.getLogger("shortcut_lens")


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("--out", help="output directory (default: config out_dir or runs/<name>)")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortcut-lens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train extractor (and lens)"), True)

    p = sub.add_parser("eval", help="linear-probe evaluation of a checkpoint")
    _common(p, False)
    p.add_argument("--checkpoint", help="checkpoint file (default: last one in the record)")
    p.add_argument("--untrained", action="store_true", help="evaluate a freshly initialized extractor")
    p.add_argument("--mode", choices=["auto", "concat_lensed", "duplicate", "plain"], help="override eval.mode")

    p = sub.add_parser("analyze", help="lens difference panels, mean map and per-image losses")
    _common(p, False)
    p.add_argument("--checkpoint")
    p.add_argument("--rows", type=int, help="override analysis.panel_rows")

    p = sub.add_parser("sweep", help="train and evaluate one model per lambda")
    _common(p, True)
    p.add_argument("--lambdas", type=float, nargs="+", help="override sweep.lambdas")
    p.add_argument("--parallel", type=int, help="worker processes (default: sequential)")
    return parser


def _load(args) -> ExperimentConfig:
    path = args.config
    if path is None:
        if not args.out:
            raise ConfigValidationError("--config is required unless --out holds a config.snapshot")
        path = Path(args.out) / "config.snapshot"
    cfg = load_config(path, seed=args.seed)
    update = {}
    if getattr(args, "mode", None):
        update["eval"] = cfg.eval.model_copy(update={"mode": args.mode})
    if getattr(args, "rows", None):
        update["analysis"] = cfg.analysis.model_copy(update={"panel_rows": args.rows})
    if update:
        cfg = parse_config(json.loads(cfg.model_copy(update=update).snapshot()))
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        out = out_dir_for(cfg, args.out)
        if args.command == "train":
            result = train_experiment(cfg, out, resume=args.resume)
        elif args.command == "eval":
            result = evaluate_checkpoint(cfg, out, args.checkpoint, untrained=args.untrained)
        elif args.command == "analyze":
            result = analyze_checkpoint(cfg, out, args.checkpoint)
        else:
            lambdas = args.lambdas or list(cfg.sweep.lambdas)
            result = sweep_experiment(cfg, out, lambdas, parallel=args.parallel or cfg.sweep.parallel)
    except (ConfigValidationError, UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, NonFiniteLossError, EvalError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
