"""Command-line entry point: gen-data, train, eval, gradcheck, routing.

Exit codes: 0 ok, 2 config, 3 I/O, 4 numeric abort, 5 gradcheck failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _threads():
    n = os.environ.get("SPACE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def _load_config(path):
    from .config import ConfigError, load_config

    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None


def _load_data(path):
    from .data import SchemaError, load_dataset

    if not os.path.isdir(path):
        raise CliError(EXIT_IO, f"data directory not found: {path}")
    try:
        return load_dataset(path)
    except SchemaError as exc:
        raise CliError(EXIT_CONFIG, f"dataset error: {exc}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot read dataset: {exc}") from None


def _load_ckpt(path):
    from .trainer import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_IO, f"checkpoint error: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}") from None


def _check_schema(model, dataset):
    if model.schema.to_json() != dataset.schema.to_json():
        raise CliError(EXIT_CONFIG, "schema mismatch between checkpoint and dataset")
    if (model.cfg.seq_len, model.cfg.bin_size) != (dataset.seq_len, dataset.bin_size):
        raise CliError(EXIT_CONFIG, "seq_len/bin_size mismatch between checkpoint and dataset")


def _split(dataset, split):
    if split == "all":
        return dataset
    try:
        return dataset.subset(split)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def cmd_gen_data(args):
    from .data import generate_dataset

    run = _load_config(args.config)
    try:
        man = generate_dataset(run.schema, args.out, run.data.n_per_species, run.model.seq_len,
                               run.model.bin_size, args.seed, params=run.data.synth_params(),
                               n_eval=run.data.n_eval)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset: {exc}") from None
    for sp in man["species"]:
        print(f"{sp}: {man['counts'][sp]} records, {len(man['tracks'][sp])} tracks")
    print(f"seq_len={man['seq_len']} bin_size={man['bin_size']} seed={man['seed']} -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .model import SpaceModel
    from .trainer import NumericAbort, train

    run = _load_config(args.config)
    if args.alpha is not None:
        run.train.alpha = args.alpha
    if args.seed is not None:
        run.train.seed = args.seed
    dataset = _load_data(args.data)
    if (run.model.seq_len, run.model.bin_size) != (dataset.seq_len, dataset.bin_size):
        raise CliError(EXIT_CONFIG, "seq_len/bin_size: config disagrees with dataset manifest")
    try:
        run.train.validate(dataset.schema.n_species)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None
    train_set = _split(dataset, "train") if dataset.n_eval else dataset
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    model = SpaceModel(run.model, dataset.schema, seed=run.train.seed)
    t0 = time.time()

    def progress(rec):
        if rec["step"] % max(1, run.train.steps // 20) == 0 or rec["step"] == run.train.steps - 1:
            print(f"step {rec['step']:5d} lr {rec['lr']:.2e} poisson {rec['poisson']:.4f} "
                  f"mi {' '.join(f'{m:.3f}' for m in rec['mi'])} |g| {rec['grad_norm_preclip']:.3f}",
                  flush=True)

    try:
        train(model, train_set, run.train, log_path=log_path, ckpt_path=args.out, on_step=progress)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        raise CliError(EXIT_IO, f"write failed: {exc}") from None
    print(f"done in {time.time() - t0:.1f}s; checkpoint {args.out}; log {log_path}")
    return EXIT_OK


def cmd_eval(args):
    from .evaluate import correlation_metrics, mean_baseline, predict, write_metrics

    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    _check_schema(ckpt.model, dataset)
    data = _split(dataset, args.split)
    if args.baseline_mean:
        preds = mean_baseline(data, _split(dataset, "train") if dataset.n_eval else dataset)
    else:
        preds = predict(ckpt.model, data)
    metrics = correlation_metrics(preds, data)
    metrics["split"] = args.split
    metrics["baseline_mean"] = bool(args.baseline_mean)
    try:
        write_metrics(args.metrics_out, metrics)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write metrics: {exc}") from None
    overall = metrics["overall"]
    print("overall pearson:", "null" if overall is None else f"{overall:.4f}")
    for a, r in metrics["per_assay_type"].items():
        print(f"  {a}: {'null' if r is None else f'{r:.4f}'}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all(seed=args.seed, max_coords=args.coords)
    failed = []
    for name, err, skipped in results:
        ok = err <= args.tol
        if not ok:
            failed.append(name)
        extra = f" ({skipped} kink probes skipped)" if skipped else ""
        print(f"{name:32s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}{extra}")
    if failed:
        print(f"gradcheck failed (tol {args.tol:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_routing(args):
    from .evaluate import export_routing

    ckpt = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data)
    _check_schema(ckpt.model, dataset)
    try:
        export_routing(ckpt.model, _split(dataset, args.split), args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write routing tables: {exc}") from None
    print(f"wrote {os.path.join(args.out, 'routing_frequencies.csv')} and "
          f"{os.path.join(args.out, 'profile_routing.csv')}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="spacemoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoint + train_log.jsonl")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--alpha", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="write per-track / per-assay / overall Pearson to metrics.json")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics-out", required=True)
    e.add_argument("--split", choices=("all", "train", "eval"), default="all")
    e.add_argument("--baseline-mean", action="store_true",
                   help="score the constant per-track training-mean predictor instead of the model")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--coords", type=int, default=8, help="probed entries per tensor")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("routing", help="export encoder and decoder routing frequency tables")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--split", choices=("all", "train", "eval"), default="all")
    r.set_defaults(func=cmd_routing)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with _threads():
            return args.func(args)
    except CliError as exc:
        print(exc, file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
