"""Command-line entry point: ``kernelshare <subcommand> [options]``.

Exit codes: 0 on success, 1 when a pipeline phase fails, 2 on I/O or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config, parse_config
from .pipeline import PHASES, PhaseError, Run
from .runtime import benchmark, compile, count_flops
from .serialization import FormatError, load_model

EXIT_OK, EXIT_PHASE, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline config")
    common.add_argument("--model", type=Path, help="input model (.bknet)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="BLAS threads; 0 = serial and deterministic "
                                                    "(default: $BK_THREADS, else 0)")

    parser = argparse.ArgumentParser(prog="kernelshare", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the dense baseline")
    p = sub.add_parser("compress", parents=[common], help="decompose, retrain, prune, shrink, finetune")
    p.add_argument("--from", dest="start", choices=PHASES, default=PHASES[0],
                   help="resume at this phase using checkpoints already in --out")
    for phase in PHASES:
        sub.add_parser(phase, parents=[common], help=f"run only the {phase} phase")
    sub.add_parser("eval", parents=[common], help="test accuracy and MAC/parameter ledger")
    p = sub.add_parser("bench", parents=[common], help="dense vs two-stage latency")
    p.add_argument("--batch", type=int, help="batch size (default from config)")
    p.add_argument("--reps", type=int, help="timed repetitions, >= 5 (default from config)")
    p = sub.add_parser("report", parents=[common], help="consolidated CSV tables for a run directory")
    p.add_argument("run_dir", type=Path)
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("BK_THREADS")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"BK_THREADS must be an integer, got {env!r}") from None


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args, cfg: PipelineConfig) -> Path:
    if args.out is not None:
        return args.out
    return Path(cfg.base_dir) / cfg.output_dir


def _require_model(args) -> Path:
    if args.model is None:
        raise UsageError("--model is required")
    if not args.model.exists():
        raise FileNotFoundError(f"model file not found: {args.model}")
    return args.model


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_pretrain(args, cfg, threads) -> int:
    data = cfg.dataset.load(Path(cfg.base_dir))
    run = Run(_out(args, cfg), cfg, threads)
    _, block = run.timed("pretrain", pipeline.phase_pretrain, run, data)
    run.report["phases"]["pretrain"] = block
    run.write_report("pretrain_report.json")
    print(f"pretrain: test accuracy {block['accuracy_after']:.4f} -> {run.out / 'pretrain.bknet'}")
    return EXIT_OK


def cmd_compress(args, cfg, threads) -> int:
    model = _require_model(args)
    data = cfg.dataset.load(Path(cfg.base_dir))
    run = Run(_out(args, cfg), cfg, threads)
    if args.start != PHASES[0] and not (run.out / pipeline.REPORT_NAME).exists():
        raise FileNotFoundError(f"cannot resume: no {pipeline.REPORT_NAME} in {run.out}")
    pipeline.compress(run, model, data, args.start)
    final = run.report["phases"]["finetune"]
    print(f"compress: accuracy {run.report['baseline']['accuracy']:.4f} -> {final['accuracy_after']:.4f}, "
          f"coefficient sparsity {final['sparsity']['total']['sparsity_pct']:.2f}% -> {run.out}")
    return EXIT_OK


def cmd_phase(args, cfg, threads) -> int:
    model = _require_model(args)
    data = cfg.dataset.load(Path(cfg.base_dir))
    run = Run(_out(args, cfg), cfg, threads)
    run.report["input_model"] = {"sha1": pipeline.blob_sha1(model)}
    net = load_model(model)
    _, block = run.timed(args.command, pipeline.PHASE_FUNCS[args.command], run, net, data)
    run.report["phases"][args.command] = block
    run.write_report(f"{args.command}_report.json")
    print(f"{args.command}: accuracy {block['accuracy_before']:.4f} -> {block['accuracy_after']:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg, threads) -> int:
    net = load_model(_require_model(args))
    data = cfg.dataset.load(Path(cfg.base_dir))
    result = {"accuracy": pipeline.accuracy(net, data), "flops": count_flops(net).to_dict()}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _emit(result)
    return EXIT_OK


def cmd_bench(args, cfg, threads) -> int:
    net = load_model(_require_model(args))
    batch = args.batch if args.batch is not None else cfg.bench.batch_size
    reps = args.reps if args.reps is not None else cfg.bench.repetitions
    if reps < 5 or batch < 1:
        raise UsageError("--reps must be >= 5 and --batch >= 1")
    result = benchmark(compile(net), batch_size=batch, repetitions=reps, seed=cfg.seed)
    payload = {**result.to_dict(), "threads": threads}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "bench.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        result.write_csv(args.out / "bench.csv")
    _emit(payload)
    return EXIT_OK


def cmd_report(args, cfg, threads) -> int:
    run_dir = args.run_dir
    path = run_dir / pipeline.REPORT_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {pipeline.REPORT_NAME} in {run_dir}")
    report = json.loads(path.read_text())
    for art in report.get("artifacts", []):
        actual = pipeline.blob_sha1(run_dir / art["path"])
        if actual != art["sha1"]:
            raise FormatError(f"checksum mismatch for {art['path']}")
    row = pipeline.table_row(report, report["config"]["preset"])
    out = args.out or run_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table1.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=pipeline.TABLE_COLUMNS)
        writer.writeheader()
        writer.writerow(row)
    widths = run_dir / "widths.csv"
    if widths.exists() and out != run_dir:
        (out / "widths.csv").write_bytes(widths.read_bytes())
    _emit({"table": row, "widths": str(out / "widths.csv") if widths.exists() else None})
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "compress": cmd_compress,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "report": cmd_report,
    **{phase: cmd_phase for phase in PHASES},
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        threads = _threads(args)
        if threads < 0:
            raise UsageError("--threads must be >= 0")
        cfg = _config(args)
        limit = threadpool_limits(limits=1) if threads == 0 else threadpool_limits(limits=threads)
        with limit if limit is not None else nullcontext():
            return COMMANDS[args.command](args, cfg, threads)
    except PhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (ConfigError, UsageError, FormatError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
