from dotenv import load_dotenv
load_dotenv()

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

import settings
from exceptions import ForwardFault, FormatError, LaverError, RejectedInputError, TeacherFault, TrainingAborted

logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_REJECTED, EXIT_FORMAT, EXIT_FAULT = 0, 1, 2, 3, 4


def configure_runtime() -> None:
    if settings.DETERMINISTIC:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        logger.info("Deterministic mode: single-threaded, deterministic kernels, no prefetch")
    else:
        torch.set_num_threads(max(1, settings.NUM_THREADS))


# ── commands ──────────────────────────────────────────────────────────────────

def cmd_train(args: argparse.Namespace) -> int:
    from training.config_file import load_config
    from training.trainer import run_training

    config = load_config(args.config, mode=args.mode, seed=args.seed, steps=args.steps)
    out = args.out or Path(settings.OUT_DIR) / f"{config.mode.value}-seed{config.seed}"
    result = run_training(config, out)
    print(json.dumps({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics)}))
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    from diagnostics.report import diagnose_checkpoint, diagnose_dumps

    if bool(args.ckpt) == bool(args.dumps):
        raise RejectedInputError("pass exactly one of --ckpt or --dumps")
    if args.ckpt:
        out = args.out or Path(args.ckpt).parent / "diagnostics"
        report = diagnose_checkpoint(args.ckpt, out, probe_seed=args.probe_seed, k=args.k, use_teacher=args.teacher)
    else:
        out = args.out or Path(args.dumps) / "diagnostics"
        report = diagnose_dumps(args.dumps, out, k=args.k or 10)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_grad_check(args: argparse.Namespace) -> int:
    from training.grad_check import DEFAULT_SEEDS, run_grad_check

    seeds = args.seeds if args.seeds else DEFAULT_SEEDS
    report = run_grad_check(tolerance=args.tol, seeds=seeds, losses=args.loss)
    print(report.model_dump_json(indent=2))
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_mask_demo(args: argparse.Namespace) -> int:
    from geometry.spatial import build_mixed_layout, build_packed_layout, parse_segments, render_layout

    segments = parse_segments(args.segments)
    if args.packed:
        pad_to = args.pad_to if args.pad_to is not None else sum(seg.length for seg in segments)
        layout = build_packed_layout(segments, pad_to, rope_2d=not args.rope_1d)
    else:
        layout = build_mixed_layout(segments, mixed=not args.causal, rope_2d=not args.rope_1d)
    print(render_layout(layout))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    from training.compare import compare_files, format_table

    report = compare_files(args.a, args.b)
    print(format_table(report))
    if args.out:
        Path(args.out).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ── parser ────────────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laver", description="Masked latent reconstruction training kit")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a micro model and write metrics + checkpoint")
    train.add_argument("--config", type=Path, help="flat key = value config file")
    train.add_argument("--mode", choices=["baseline", "mim_only", "mim_ga", "laver"])
    train.add_argument("--seed", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--out", type=Path)
    train.set_defaults(handler=cmd_train)

    diagnose = sub.add_parser("diagnose", help="measure a checkpoint or LVTD dumps")
    diagnose.add_argument("--ckpt", type=Path)
    diagnose.add_argument("--dumps", type=Path)
    diagnose.add_argument("--probe-seed", type=int)
    diagnose.add_argument("--k", type=int, help="CKNNA neighbourhood size")
    diagnose.add_argument("--teacher", action="store_true", help="measure the EMA teacher instead of the student")
    diagnose.add_argument("--out", type=Path)
    diagnose.set_defaults(handler=cmd_diagnose)

    grad = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    grad.add_argument("--tol", type=float, default=1e-4)
    grad.add_argument("--seeds", type=int, nargs="+")
    grad.add_argument("--loss", nargs="+", choices=["lm", "mim", "ga", "cga", "sanity", "model"])
    grad.set_defaults(handler=cmd_grad_check)

    demo = sub.add_parser("mask-demo", help="print an attention allow-matrix")
    demo.add_argument("--segments", required=True, help="e.g. v2x2,t3 or v2x2,v1x3 with --packed")
    demo.add_argument("--packed", action="store_true")
    demo.add_argument("--pad-to", type=int)
    demo.add_argument("--causal", action="store_true", help="plain causal attention instead of mixed")
    demo.add_argument("--rope-1d", action="store_true")
    demo.set_defaults(handler=cmd_mask_demo)

    comp = sub.add_parser("compare", help="tabulate metric deltas between two runs")
    comp.add_argument("--a", type=Path, required=True)
    comp.add_argument("--b", type=Path, required=True)
    comp.add_argument("--out", type=Path)
    comp.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_runtime()
    try:
        return args.handler(args)
    except RejectedInputError as e:
        logger.error(f"Rejected input: {e}")
        return EXIT_REJECTED
    except FormatError as e:
        logger.error(f"Format error: {e}")
        return EXIT_FORMAT
    except TrainingAborted as e:
        last = e.last_record.model_dump_json() if e.last_record is not None else "none"
        logger.error(f"Training aborted: {e}; last record {last}")
        return EXIT_FAULT
    except (ForwardFault, TeacherFault) as e:
        logger.error(f"Fault: {e}")
        return EXIT_FAULT
    except LaverError as e:
        logger.error(f"Unexpected error: {e}")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
