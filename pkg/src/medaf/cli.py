"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .errors import ArgumentError, CheckpointError, ConfigError, MedafError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (see `medaf init-config`)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--gamma", type=float)
    p.add_argument("--fusion-mode", help="gating, mean or single_expert_<i>")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--num-experts", type=int)


def _with_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="defaults to <out-dir>/final.ckpt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medaf", description="Multi-expert open-set recognition experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-config", help="print the default config as JSON")
    _common(p)

    p = sub.add_parser("train", help="train a model and write checkpoints plus a loss log")
    _common(p)

    p = sub.add_parser("calibrate", help="pick the known-acceptance threshold")
    _common(p)
    _with_checkpoint(p)

    p = sub.add_parser("evaluate", help="score test sets and write the dump and report")
    _common(p)
    _with_checkpoint(p)
    p.add_argument("--tau", type=float, help="defaults to <out-dir>/calibration.json if present")

    p = sub.add_parser("export-cams", help="write per-expert CAM heatmaps as PGM files")
    _common(p)
    _with_checkpoint(p)
    p.add_argument("--subset", choices=["test_known", "test_unknown"], default="test_known")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--cam-dir", help="defaults to <out-dir>/cams")

    p = sub.add_parser("ablate", help="run the ablation grid over seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(ex.ablation_variants(ex.ExperimentConfig())))

    p = sub.add_parser("sweep-experts", help="run the full pipeline for several expert counts")
    _common(p)
    p.add_argument("--counts", default="1,2,3,4,5")
    return parser


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from None


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    overrides = {}
    for flag, path in (("seed", "seed"), ("out_dir", "out_dir"), ("gamma", "scoring.gamma"),
                       ("fusion_mode", "ablation.fusion_mode"), ("beta1", "model.beta1"),
                       ("beta2", "model.beta2"), ("num_experts", "model.num_experts")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[path] = value
    return cfg.replace(**overrides)


def _checkpoint(args, cfg) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "final.ckpt"
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return path


def run(args: argparse.Namespace) -> None:
    cfg = resolve_config(args)
    say = print
    cmd = args.command
    if cmd == "init-config":
        sys.stdout.write(cfg.to_json())
    elif cmd == "train":
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        res = ex.train(cfg, progress=say)
        say(f"final checkpoint: {res.final_path}  best accuracy: {res.best_accuracy:.4f}")
    elif cmd == "calibrate":
        cal = ex.calibrate(cfg, _checkpoint(args, cfg))
        say(f"tau = {cal.tau!r}  acceptance = {cal.achieved_acceptance:.4f}  n = {cal.n_known_used}")
    elif cmd == "evaluate":
        tau = args.tau
        cal_file = Path(cfg.out_dir) / "calibration.json"
        if tau is None and cal_file.exists():
            tau = ex.read_calibration(cal_file).tau
        res = ex.evaluate(cfg, _checkpoint(args, cfg), tau)
        sys.stdout.write(res.report.to_text())
    elif cmd == "export-cams":
        if args.count < 1:
            raise UsageError("--count must be >= 1")
        data = getattr(ex.load_split(cfg), args.subset)
        n = min(args.count, len(data))
        if n == 0:
            raise ArgumentError(f"{args.subset} is empty")
        out = Path(args.cam_dir) if args.cam_dir else Path(cfg.out_dir) / "cams"
        paths = ex.export_cams(_checkpoint(args, cfg), data.images[:n], out, args.class_index,
                               fusion_mode=cfg.ablation.fusion_mode)
        say(f"wrote {len(paths)} files to {out}")
    elif cmd == "ablate":
        variants = args.variants.split(",") if args.variants else None
        rows = ex.ablate(cfg, _int_list(args.seeds, "--seeds"), variants, progress=say)
        say(f"{len(rows)} runs; table at {Path(cfg.out_dir) / 'ablation.csv'}")
    elif cmd == "sweep-experts":
        counts = _int_list(args.counts, "--counts")
        if not counts or min(counts) < 1:
            raise UsageError("--counts needs positive integers")
        ex.sweep_experts(cfg, counts, progress=say)
        say(f"table at {Path(cfg.out_dir) / 'sweep_experts.csv'}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run(args)
    except UsageError as exc:
        print(f"medaf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ArgumentError, json.JSONDecodeError) as exc:
        print(f"medaf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MedafError, OSError, ArithmeticError) as exc:
        print(f"medaf: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
