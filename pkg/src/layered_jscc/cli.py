"""``layered-jscc`` command line: train, sweep, plot, compare.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, read_metadata, save_checkpoint
from .config import ConfigError, load_config
from .errors import LayeredJSCCError, SchemaVersionMismatch
from .evaluation import DEFAULT_REALIZATIONS, DEFAULT_SNRS, SweepResult, compare, evaluate_sweep
from .plotting import MODES, plot_results
from .schemes import DEFAULT_M, Feedback
from .training import DatasetConfig, build_model, train

log = logging.getLogger("layered_jscc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
RESOLVED_CONFIG = "config.resolved.yaml"


def _snr_list(text: str):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    if args.output is not None:
        cfg = cfg.model_copy(update={"output_dir": str(args.output)})
    tcfg = cfg.train_config()
    if args.dry_run:
        print(cfg.to_yaml(), end="")
        print(f"# parameter_count: {build_model(tcfg).parameter_count()}")
        return EXIT_OK
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(cfg.to_yaml())
    torch.manual_seed(cfg.seed)
    model, history = train(tcfg, log_path=out / "train_log.jsonl")
    ckpt = save_checkpoint(model, history, out / "checkpoint",
                           extra={"train_config": tcfg.to_dict(),
                                  "early_stopping": {"monitor": "val_loss",
                                                     "patience": tcfg.optimizer.early_stop_patience,
                                                     "max_epochs": tcfg.optimizer.max_epochs}})
    print(ckpt)
    return EXIT_OK


def _test_set(meta: dict, args):
    dcfg = dict((meta.get("train_config") or {}).get("dataset") or {})
    if args.dataset:
        dcfg["name"] = args.dataset
    if args.data_root:
        dcfg["root"] = args.data_root
    if args.test_size:
        dcfg["test_size"] = args.test_size
    dataset = DatasetConfig(**dcfg) if dcfg else DatasetConfig(name="cifar10")
    return dataset.load()[2], dataset


def cmd_sweep(args) -> int:
    try:
        meta = read_metadata(args.checkpoint)
    except SchemaVersionMismatch as exc:
        raise SchemaVersionMismatch(f"{exc}; retrain the model or check out a release that "
                                    f"writes this schema version") from exc
    model, _ = load_checkpoint(args.checkpoint)
    test, dataset = _test_set(meta, args)
    feedback = Feedback(args.feedback)
    sweep = evaluate_sweep(model, test, args.snrs, args.realizations, args.seed, args.batch_size,
                           m=args.m, feedback=feedback, channel_kind=args.channel)
    sweep.extra = {"checkpoint": str(args.checkpoint), "seed": args.seed, "m": args.m,
                   "feedback": feedback.value, "dataset": dataset.name,
                   "test_size": len(test), "batch_size": args.batch_size}
    out = args.output or Path(args.checkpoint).parent / f"sweep_{sweep.variant or 'default'}.csv".replace("=", "")
    print(sweep.save(out))
    return EXIT_OK


def cmd_plot(args) -> int:
    sweeps = [SweepResult.load(p) for p in args.results]
    for path in plot_results(sweeps, args.output, args.mode, args.snr, args.title):
        print(path)
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = SweepResult.load(args.a), SweepResult.load(args.b)
    cmp = compare(a, b, args.layer_a, args.layer_b)
    lines = ["test_snr_db,delta_db,combined_std_err,significant"]
    for snr, d, e, s in zip(cmp.test_snrs_db, cmp.delta_db, cmp.combined_err, cmp.significant):
        lines.append(f"{snr:g},{d:.6f},{e:.6f},{int(bool(s))}")
    lines.append(f"# max_abs_gap_db,{cmp.max_gap:.6f}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layered-jscc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from an experiment file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--seed", type=int)
    t.add_argument("--output", type=Path, help="override output_dir")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and parameter count only")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="evaluate a checkpoint over a grid of test SNRs")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--snrs", type=_snr_list, default=list(DEFAULT_SNRS))
    s.add_argument("--realizations", type=int, default=DEFAULT_REALIZATIONS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--m", type=int, default=DEFAULT_M, help="channel draws for the residual estimate")
    s.add_argument("--feedback", choices=[f.value for f in Feedback], default=Feedback.ESTIMATED.value)
    s.add_argument("--channel", choices=["awgn", "rayleigh_slow"], help="test channel (default: training channel)")
    s.add_argument("--dataset", choices=["cifar10", "synthetic"])
    s.add_argument("--data-root")
    s.add_argument("--test-size", type=int)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--output", type=Path)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", help="draw PSNR vs. test SNR figures from sweep files")
    pl.add_argument("results", nargs="+", type=Path)
    pl.add_argument("--mode", choices=MODES, default="layers")
    pl.add_argument("--snr", type=float, help="test SNR for the independence bars")
    pl.add_argument("--title")
    pl.add_argument("--output", type=Path, required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("compare", help="per-SNR PSNR difference between two sweeps")
    c.add_argument("a", type=Path)
    c.add_argument("b", type=Path)
    c.add_argument("--layer-a", type=int)
    c.add_argument("--layer-b", type=int)
    c.add_argument("--output", type=Path)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "realizations", 1) < 1 or getattr(args, "m", 1) < 1:
        parser.error("--realizations and --m must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LayeredJSCCError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
