"""Helpers shared by the experiment scripts."""
from __future__ import annotations

import argparse
import json
import os
import sys

from qgalore.data import ingest_text, synthetic_corpus
from qgalore.model import ModelConfig
from qgalore.optimizer import AdamConfig
from qgalore.trainer import DataConfig, RunConfig, SubspaceConfig

DEFAULT_CORPUS = os.path.join("runs", "corpus.txt")


def base_parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--corpus", default=DEFAULT_CORPUS, help="text file; generated if missing")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--base-interval", type=int, default=200)
    p.add_argument("--out", help="write results as JSON here")
    return p


def ensure_corpus(path: str, n_bytes: int = 1_100_000, seed: int = 0):
    if not os.path.exists(path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as f:
            f.write(synthetic_corpus(n_bytes, seed))
    return ingest_text(path)


def lm_config(args, seed: int, **kw) -> RunConfig:
    sub = dict(base_interval=args.base_interval)
    sub.update(kw.pop("subspace", {}))
    opt = dict(lr=args.lr)
    opt.update(kw.pop("optimizer", {}))
    return RunConfig(
        total_steps=args.steps,
        eval_every=max(args.steps // 50, 1),
        seed=seed,
        optimizer=AdamConfig(**opt),
        subspace=SubspaceConfig(**sub),
        model=ModelConfig(**kw.pop("model", {})),
        data=DataConfig(kind="text", path=args.corpus),
        **kw,
    )


def dump(args, payload) -> None:
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
        print(f"wrote {args.out}", file=sys.stderr)
