"""Command line entry point: train, estimate-memory, inspect-checkpoint, bench-svd."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, describe
from .data import DataError
from .linalg import svd
from .model import ModelConfig
from .trainer import (
    ConfigError,
    DivergenceError,
    RunConfig,
    _model_config,
    estimate_memory,
    load_data,
    run_training,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# flag dest -> dotted RunConfig key
_FLAG_KEYS = {
    "method": "method",
    "rounding": "rounding",
    "weight_bits": "weight_bits",
    "state_bits": "state_bits",
    "block_size": "block_size",
    "total_steps": "total_steps",
    "batch_size": "batch_size",
    "eval_every": "eval_every",
    "lr": "optimizer.lr",
    "weight_decay": "optimizer.weight_decay",
    "alpha": "optimizer.alpha",
    "rank": "subspace.rank",
    "base_interval": "subspace.base_interval",
    "window": "subspace.window",
    "threshold": "subspace.threshold",
    "proj_bits": "subspace.proj_bits",
    "data": "data.path",
    "noise": "data.noise",
}


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    *parents, leaf = key.split(".")
    for p in parents:
        d = d.setdefault(p, {})
    d[leaf] = value


def build_config(args) -> RunConfig:
    """Config file, then named flags, then ``--set key=value`` overrides."""
    raw: dict = {}
    if args.config:
        try:
            with open(args.config, "rb") as f:
                raw = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config!r}: {e}") from e
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _set_dotted(raw, key, value)
    if getattr(args, "data", None):
        _set_dotted(raw, "data.kind", "text")
    if getattr(args, "no_adaptive", False):
        _set_dotted(raw, "subspace.adaptive", False)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set_dotted(raw, key.strip(), _parse_value(value.strip()))
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return RunConfig.from_dict(raw)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with RunConfig fields ([optimizer], [subspace], [data], [model] tables)")
    p.add_argument("--method", choices=["full_adam", "galore", "qgalore"])
    p.add_argument("--rounding", choices=["stochastic", "nearest"])
    p.add_argument("--weight-bits", dest="weight_bits", type=int, choices=[8, 16, 32])
    p.add_argument("--state-bits", dest="state_bits", type=int, choices=[8, 16, 32])
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--total-steps", dest="total_steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--base-interval", dest="base_interval", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-adaptive", dest="no_adaptive", action="store_true")
    p.add_argument("--proj-bits", dest="proj_bits", type=int, choices=[4, 8, 16, 32])
    p.add_argument("--data", help="train a char LM on this text file instead of synthetic regression")
    p.add_argument("--noise", type=float, help="target noise variance of the synthetic regression task")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any field by dotted key, e.g. --set subspace.interval_cap=400")


def cmd_train(args) -> int:
    cfg = build_config(args)
    ckpt = args.checkpoint
    if ckpt is None and args.metrics_out:
        ckpt = os.path.splitext(args.metrics_out)[0] + ".qgal"
    try:
        result = run_training(
            cfg,
            metrics_out=args.metrics_out,
            checkpoint_path=ckpt,
            checkpoint_every=args.checkpoint_every,
            resume_from=args.resume,
        )
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        print(e.record.to_json(), file=sys.stderr)
        return 3
    final = result.final
    if not args.quiet:
        for rec in result.records:
            train = "-" if rec.train_loss is None else f"{rec.train_loss:.4f}"
            print(f"step {rec.step:>6}  train {train:>8}  val {rec.val_loss:.4f}  "
                  f"lr {rec.lr:.2e}  svd {rec.svd_calls_total}")
    print(json.dumps({"step": final.step, "val_loss": final.val_loss,
                      "svd_calls_total": final.svd_calls_total, "checkpoint": ckpt}))
    return 0


def cmd_estimate_memory(args) -> int:
    cfg = build_config(args).normalized()
    if cfg.data.kind == "text":
        model = _model_config(cfg, load_data(cfg))
    else:
        model = ModelConfig(
            n_features=cfg.data.n_features, n_outputs=cfg.data.n_outputs, hidden=cfg.model.hidden
        )
    breakdown = estimate_memory(model, cfg)
    if args.json:
        print(json.dumps(breakdown, sort_keys=True))
    else:
        for k, v in breakdown.items():
            print(f"{k:<22}{v:>14,d} B")
    return 0


def cmd_inspect(args) -> int:
    print(describe(args.path))
    return 0


def cmd_bench_svd(args) -> int:
    rng = np.random.default_rng(args.seed)
    print(f"{'shape':>12} {'ms':>9} {'recon':>10} {'orth':>10}")
    for spec in args.shapes:
        m, n = (int(x) for x in spec.lower().split("x"))
        A = rng.standard_normal((m, n)).astype(np.float32)
        t = time.perf_counter()
        for _ in range(args.repeat):
            U, s, V = svd(A)
        ms = (time.perf_counter() - t) * 1e3 / args.repeat
        A64 = A.astype(np.float64)
        recon = np.linalg.norm(U.astype(np.float64) * s @ V.T.astype(np.float64) - A64) / np.linalg.norm(A64)
        k = min(m, n)
        orth = max(
            np.abs(U.T.astype(np.float64) @ U - np.eye(U.shape[1])).max(),
            np.abs(V.T.astype(np.float64) @ V - np.eye(k)).max(),
        )
        print(f"{spec:>12} {ms:>9.1f} {recon:>10.2e} {orth:>10.2e}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgalore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--metrics-out", dest="metrics_out", help="JSONL file, one record per evaluation")
    p.add_argument("--checkpoint", help="checkpoint path; may contain {step}")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate-memory", help="analytic memory breakdown for a config")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_estimate_memory)

    p = sub.add_parser("inspect-checkpoint", help="list the tensors in a checkpoint")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench-svd", help="time and check the Jacobi SVD")
    p.add_argument("shapes", nargs="*", default=["64x64", "128x512", "256x256"])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_svd)
    return parser


def _threads() -> int:
    raw = os.environ.get("QGALORE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QGALORE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("QGALORE_THREADS must be at least 1")
    return n


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (ConfigError, DataError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
