"""Command-line entry point: train, explain, retrieve, segment, eval-attention, gradcheck.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import imageio
from .attention import ARCH_ARITY, ROLE_NAMES, explain
from .checkpoint import load_checkpoint
from .config import build_run_config, load_records, parse_data_arg, read_config
from .evaluation import evaluate_attention, evaluate_retrieval, segment
from .gradcheck import run_gradcheck
from .train import format_log_line, train

log = logging.getLogger("simattn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _bool_arg(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {value!r}")


def _ks(value: str) -> list:
    try:
        return [int(k) for k in value.split(",") if k]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad K list {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a key = value config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("explain", help="write similarity attention heatmaps for one tuple")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", required=True, choices=sorted(ARCH_ARITY))
    p.add_argument("--images", required=True, help="comma-separated PGM/PPM paths")
    p.add_argument("--same-class", type=_bool_arg, default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--detach-weights", action="store_true")

    p = sub.add_parser("retrieve", help="Recall@K of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_ks, default=[1, 2, 4])

    p = sub.add_parser("segment", help="attention-driven mask of a query image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--negative")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("eval-attention", help="attention IoU / pointing game against ground-truth masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-second-order", action="store_true")
    return parser


def _dump(obj) -> None:
    print(json.dumps(obj, separators=(",", ":"), sort_keys=True))


def cmd_train(args) -> int:
    run = build_run_config(read_config(args.config))
    cfg = run.train
    if cfg.checkpoint_path is None:
        cfg.checkpoint_path = os.path.splitext(args.config)[0] + ".ckpt"
    if cfg.log_path is None:
        cfg.log_path = cfg.checkpoint_path + ".log.jsonl"
    records = load_records(run.data)
    result = train(records, cfg, run.encoder, progress=lambda e: print(format_log_line(e), flush=True))
    log.info("checkpoint written to %s", cfg.checkpoint_path)
    return 0 if result.log else 1


def cmd_explain(args) -> int:
    paths = [p for p in args.images.split(",") if p]
    if len(paths) != ARCH_ARITY[args.arch]:
        raise UsageError(f"--arch {args.arch} needs {ARCH_ARITY[args.arch]} images, got {len(paths)}")
    if args.arch == "siamese" and args.same_class is None:
        raise UsageError("--same-class true|false is required for siamese explanations")
    ckpt = load_checkpoint(args.checkpoint)
    images = [imageio.read_image(p) for p in paths]
    maps = explain(ckpt.params, images, args.arch, same_class=args.same_class,
                   detach_weights=args.detach_weights)
    os.makedirs(args.out_dir, exist_ok=True)
    hw = images[0].shape[:2]
    ups, written = [], []
    for i, (role, m) in enumerate(zip(ROLE_NAMES[args.arch], maps)):
        up = m.values.data if m.shape == hw else _upsample(m.values.data, hw)
        ups.append(up)
        path = os.path.join(args.out_dir, f"attention_{i}_{role}.pgm")
        imageio.write_heatmap(up, path)
        written.append(path)
    imageio.write_image(imageio.composite(images, ups), os.path.join(args.out_dir, "composite.pgm"))
    sidecar = {
        "arch": args.arch,
        "images": paths,
        "same_class": args.same_class,
        "scores": {m.source_score: m.score for m in maps},
        "heatmaps": written,
        "heatmap_normalization": "min-max per map",
        "detach_weights": args.detach_weights,
        "encoder": ckpt.encoder_config.to_dict(),
        "checkpoint": args.checkpoint,
    }
    with open(os.path.join(args.out_dir, "explain.json"), "w") as fh:
        fh.write(json.dumps(sidecar, separators=(",", ":"), sort_keys=True) + "\n")
    _dump({"scores": sidecar["scores"], "out_dir": args.out_dir})
    return 0


def _upsample(m: np.ndarray, hw) -> np.ndarray:
    from .autodiff import upsample_bilinear

    return upsample_bilinear(m, *hw).data


def cmd_retrieve(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_retrieval(ckpt.params, parse_data_arg(args.data), args.k)
    _dump(report.to_json_dict())
    return 0


def cmd_segment(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    query = imageio.read_image(args.query)
    support = imageio.read_image(args.support)
    negative = imageio.read_image(args.negative) if args.negative else None
    mask, _ = segment(ckpt.params, query, support, negative, args.threshold)
    imageio.write_image(mask.astype(np.float64), args.out)
    _dump({"out": args.out, "foreground_fraction": float(mask.mean())})
    return 0


def cmd_eval_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_attention(ckpt.params, parse_data_arg(args.data), args.threshold)
    _dump(report.to_json_dict())
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.points, args.seed, second_order=not args.no_second_order)
    _dump(report)
    return 0 if report["passed"] else 1


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "retrieve": cmd_retrieve,
    "segment": cmd_segment,
    "eval-attention": cmd_eval_attention,
    "gradcheck": cmd_gradcheck,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageError(parser.format_usage())
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"simattn: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
