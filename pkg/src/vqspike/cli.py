"""Command-line entry point: ``vqspike <command> --config <path>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import config as config_mod
from .checkpoint import CheckpointError
from .data import IdxFormatError

log = logging.getLogger("vqspike")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqspike", description="Spiking VQ autoencoder with absorbing diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vqsvae", help="train the stage-1 autoencoder")
    p.add_argument("--config", required=True, type=Path)

    p = sub.add_parser("train-sdid", help="train the stage-2 denoiser on frozen stage-1 tokens")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--vqsvae", required=True, type=Path, help="stage-1 checkpoint")

    for name, default_n in (("reconstruct", 16), ("sample", 16), ("eval", 64)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--n", type=int, default=default_n)
        p.add_argument("--out", type=Path, default=None)
    return parser


def _print_report(report: dict) -> None:
    for key, value in report.items():
        print(f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}")


def run(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    # heavy imports after argument parsing so `--help` stays fast
    from . import train

    cfg = config_mod.load(args.config)
    if args.command == "train-vqsvae":
        result = train.train_vqsvae(cfg)
        print(f"checkpoint={result['checkpoint']}")
        if result["metrics"]:
            _print_report({k: v for k, v in result["metrics"][-1].items() if k != "seconds"})
        return 0
    if args.command == "train-sdid":
        if not args.vqsvae.exists():
            raise FileNotFoundError(f"stage-1 checkpoint not found: {args.vqsvae}")
        vq = train.load_vqsvae(cfg, args.vqsvae)
        result = train.train_sdid(cfg, vq)
        print(f"checkpoint={result['checkpoint']}")
        _print_report({k: v for k, v in result["metrics"][-1].items() if k != "seconds"})
        return 0

    if args.n < 1:
        raise config_mod.ConfigError(f"--n must be positive, got {args.n}")
    out = args.out or Path(cfg.out_dir)
    for path in (cfg.vqsvae_ckpt,) + ((cfg.sdid_ckpt,) if args.command == "sample" else ()):
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    if args.command == "reconstruct":
        _print_report(train.run_reconstruct(cfg, out, args.n))
    elif args.command == "sample":
        _print_report(train.run_sample(cfg, out, args.n))
    else:
        _print_report(train.run_eval(cfg, args.n))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except (config_mod.ConfigError, CheckpointError, IdxFormatError, FileNotFoundError, ValueError,
            FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
