"""Command line interface.

Subcommands:

    pipeline   run a full train / calibrate / compress / finetune config
    train      train a baseline model and save a checkpoint
    compress   compress a checkpointed model (afm-mlp, svd-mlp, afm-emb,
               svd-emb, tt-emb)
    finetune   one fine-tuning epoch on a checkpointed model
    eval       AUC / LogLoss of a checkpoint on the configured test split
    bench      inference throughput of a checkpoint
    synth      generate a synthetic click log as TSV

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing or malformed files), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .compress import MLP_COMPRESSIBLE, compression_report
from .config import load_config
from .data import SynthSpec, synth_generate, write_tsv
from .errors import ConfigError, DataError, NumericError, RankError, ShapeError
from .metrics import bench_throughput
from .nn import forward, param_count
from .train import (
    TrainConfig,
    _run_compress,
    calibrate,
    evaluate_model,
    finetune,
    prepare_data,
    run_pipeline,
    train,
)


def _config_from(args, stages=None):
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if stages is not None:
        raw = dict(raw)
        raw.pop("pipeline", None)
        raw["stages"] = stages
    overrides = {
        "seed": getattr(args, "seed", None),
        "profile": getattr(args, "profile", None),
        "output_dir": getattr(args, "out", None),
    }
    return load_config(raw, overrides)


def _emit(payload: dict, report_path=None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(text + "\n")


def cmd_pipeline(args) -> int:
    rc = _config_from(args)
    manifest = run_pipeline(rc, rc.output_dir)
    print(f"pipeline complete: {len(manifest['stages'])} stages, "
          f"artifacts in {rc.output_dir}")
    return 0


def cmd_train(args) -> int:
    stage = {"stage": "train_baseline"}
    if args.epochs is not None:
        stage["epochs"] = args.epochs
    if args.learning_rate is not None:
        stage["learning_rate"] = args.learning_rate
    if args.batch_size is not None:
        stage["batch_size"] = args.batch_size
    rc = _config_from(args, stages=[stage, {"stage": "eval"}])
    run_pipeline(rc, rc.output_dir)
    print(f"baseline trained; artifacts in {rc.output_dir}")
    return 0


def cmd_compress(args) -> int:
    model = load_checkpoint(args.model_in)
    rc = _config_from(args)
    taps = None
    if args.method.startswith("afm"):
        train_ds, _ = prepare_data(rc)
        if args.method == "afm-mlp":
            ids = [f"mlp.{j}" for j in MLP_COMPRESSIBLE]
        else:
            ids = [f"emb.{i}" for i in range(model.n_fields)]
        taps = calibrate(model, train_ds, ids, batch_size=args.calib_batch_size)
    stage = {"stage": "compress", "method": args.method}
    if args.rank is not None:
        stage["rank"] = args.rank
    if args.no_insert_relu:
        stage["insert_relu"] = False
    if args.no_fuse:
        stage["fuse"] = False
    before = param_count(model)
    method, detail = _run_compress(model, stage, taps, rc.profile_defaults)
    after = param_count(model)
    save_checkpoint(model, args.model_out)
    report = compression_report(method, detail, before, after)
    _emit(report, args.report)
    return 0


def cmd_finetune(args) -> int:
    model = load_checkpoint(args.model_in)
    rc = _config_from(args)
    train_ds, test_ds = prepare_data(rc)
    defaults = {**rc.train_defaults, **rc.profile_defaults.get("finetune", {})}
    cfg = TrainConfig(
        learning_rate=args.learning_rate or defaults["learning_rate"],
        batch_size=args.batch_size or defaults["batch_size"],
        epochs=1,
        l2_ratio=defaults["l2_ratio"],
        weight_decay=defaults["weight_decay"],
        dropout=args.dropout,
        seed=rc.seed,
    )
    rows = finetune(model, train_ds, cfg, test_dataset=test_ds)
    save_checkpoint(model, args.model_out)
    _emit(rows[-1], args.report)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model_in)
    rc = _config_from(args)
    train_ds, test_ds = prepare_data(rc)
    ds = train_ds if args.split == "train" else test_ds
    report = evaluate_model(model, ds)
    _emit({"split": args.split, **report.to_dict()}, args.report)
    return 0


def cmd_bench(args) -> int:
    model = load_checkpoint(args.model_in)
    rc = _config_from(args)
    _, test_ds = prepare_data(rc)
    size = args.batch_size
    need = args.warmup + args.batches
    batches = []
    start = 0
    n = len(test_ds)
    if n < size:
        raise DataError(f"test split has {n} rows, smaller than one batch of {size}")
    while len(batches) < need:
        if start + size > n:
            start = 0
        batches.append(test_ds.batch(slice(start, start + size)))
        start += size
    report = bench_throughput(
        lambda b: forward(model, b, mode="infer"),
        batches,
        warmup=args.warmup,
        batch_size=size,
    )
    _emit(report, args.report)
    return 0


def cmd_synth(args) -> int:
    rc = _config_from(args)
    if "synth" not in rc.data:
        raise ConfigError("synth command needs a data.synth block (or the synth profile)")
    params = dict(rc.data["synth"])
    if args.n_samples is not None:
        params["n_samples"] = args.n_samples
    spec = SynthSpec(**params)
    ds = synth_generate(spec)
    write_tsv(ds, args.out)
    print(f"wrote {len(ds)} rows, {ds.n_fields} categorical fields -> {args.out}")
    return 0


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--profile", help="hyperparameter profile name")
    p.add_argument("--seed", type=int, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowrank-ctr",
        description="Low-rank compression workbench for click-through-rate models.",
    )
    parser.add_argument("--version", action="version", version=f"lowrank-ctr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run a full compression pipeline")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("train", help="train a baseline model")
    _add_config_args(p)
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="compress a checkpointed model")
    _add_config_args(p)
    p.add_argument("--model-in", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument(
        "--method",
        required=True,
        choices=["afm-mlp", "svd-mlp", "afm-emb", "svd-emb", "tt-emb"],
    )
    p.add_argument("--rank", type=int)
    p.add_argument("--no-insert-relu", action="store_true",
                   help="keep the inserted bottleneck layer linear")
    p.add_argument("--no-fuse", action="store_true",
                   help="keep embedding projections instead of fusing them")
    p.add_argument("--calib-batch-size", type=int, default=10000)
    p.add_argument("--report", help="write the compression report here")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("finetune", help="fine-tune a compressed model for one epoch")
    _add_config_args(p)
    p.add_argument("--model-in", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--report")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--model-in", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure inference throughput")
    _add_config_args(p)
    p.add_argument("--model-in", required=True)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--report")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic click data")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="TSV file to write")
    p.add_argument("--n-samples", type=int)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RankError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 3
    except (DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
