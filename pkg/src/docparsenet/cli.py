"""Command-line entry point: ``docparse gen-data | train | eval | profile``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
``DOCPARSE_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, help_text
from .data import SPLITS, load_split, split_dataset, synth_generate, write_corpus
from .errors import ConfigError, ContractError, DataError, DocParseError, NumericalAbort
from .model import build
from .profiling import cost_report
from .text_embed import hash_embedding
from .train import evaluate, train

THREADS_ENV = "DOCPARSE_THREADS"


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def _page(text):
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("page takes H,W or a single size")
    return tuple(parts)


def _run_config(args) -> RunConfig:
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    for key in ("data", "out"):
        if getattr(args, key, None):
            overrides.append(f"{key}={getattr(args, key)}")
    return RunConfig.load(args.config, overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    try:
        samples = synth_generate(args.n, tuple(args.page), args.seed)
        splits = dict(zip(SPLITS, split_dataset(samples, seed=args.seed)))
    except ContractError as exc:
        raise DataError(str(exc)) from None
    embeddings = None
    if args.embeddings:
        embeddings = {s.sample_id: hash_embedding(s.text, seed=args.seed) for s in samples}
    manifest = write_corpus(out, splits, embeddings)
    counts = " ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"wrote {len(samples)} samples to {out} ({counts})")
    print(f"manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    data, out = rc["data"], rc["out"]
    if not data:
        raise ConfigError("no corpus given (--data or data= in the config)")
    if not out:
        raise ConfigError("no output directory given (--out or out= in the config)")
    train_set = load_split(data, "train")
    val_set = load_split(data, "val")
    if not train_set:
        raise DataError(f"corpus {data} has an empty train split")
    mcfg = rc.model_config()
    os.makedirs(out, exist_ok=True)
    log_path = os.path.join(out, "metrics.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    with open(os.path.join(out, "run.cfg"), "w", encoding="utf-8") as fh:
        fh.write("".join(f"{k}={_fmt(v)}\n" for k, v in rc.values.items()))
    model = build(mcfg)
    save_checkpoint(os.path.join(out, "init.dtf"), model)
    result = train(model, rc.train_config(log_path), train_set, val_set, rc.provider(), out_dir=out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epoch(s); last loss {last['loss']:.6f}; best mIoU {result.best_miou:.4f}")
    print(f"checkpoints {os.path.join(out, 'best.dtf')} {os.path.join(out, 'final.dtf')}")
    print(f"metrics {log_path}")
    return 0


def _fmt(v):
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def cmd_eval(args) -> int:
    rc = _run_config(args)
    data = rc["data"]
    if not data:
        raise ConfigError("no corpus given (--data or data= in the config)")
    expected = rc.model_config() if args.config else None
    model = load_checkpoint(args.checkpoint, expected)
    samples = load_split(data, args.split)
    if not samples:
        raise DataError(f"no samples in split {args.split!r} of {data}")
    report = evaluate(model, samples, rc.provider(), rc["batch_size"], rc["iou_mode"])
    print(report.table())
    path = args.report or f"{args.checkpoint}.{args.split}.metrics.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"split": args.split, "samples": len(samples), **report.record()}, fh, sort_keys=True)
        fh.write("\n")
    print(f"report {path}")
    return 0


def cmd_profile(args) -> int:
    rc = _run_config(args)
    model = build(rc.model_config())
    report = cost_report(model, batch=args.batch)
    if args.format in ("table", "both"):
        print(report.table())
    if args.format in ("lines", "both"):
        print("\n".join(report.lines()))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_args(p, data=True, out=False):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if data:
        p.add_argument("--data", help="corpus root")
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docparse",
        description="Train and evaluate a multi-modal document segmentation network.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    g = sub.add_parser("gen-data", help="generate a synthetic corpus", formatter_class=fmt)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--page", type=_page, default=(256, 256), help="page size H,W")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.add_argument("--embeddings", action="store_true", help="also write per-sample .embed.dtf files")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", epilog=help_text(), formatter_class=fmt)
    _add_config_args(t, out=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", epilog=help_text(), formatter_class=fmt)
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--report", help="metrics file (default: <checkpoint>.<split>.metrics.json)")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter and FLOP report", epilog=help_text(), formatter_class=fmt)
    _add_config_args(p, data=False)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--format", choices=("table", "lines", "both"), default="table")
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except DocParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # shape / contract violations surfacing from user-supplied inputs
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
