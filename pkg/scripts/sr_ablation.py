"""Stochastic vs nearest rounding of the INT8 weight update on the char LM.

Prints final validation loss per seed and the warmup lag of the RTN run
(RTN minus SR validation loss at each evaluation inside warmup).
"""
import numpy as np

from _common import base_parser, dump, ensure_corpus, lm_config
from qgalore.trainer import run_training

args = base_parser(__doc__).parse_args()
data = ensure_corpus(args.corpus)
rows = []
for seed in args.seeds:
    curves = {}
    for rounding in ("stochastic", "nearest"):
        cfg = lm_config(args, seed, method="qgalore", rounding=rounding)
        curves[rounding] = run_training(cfg, data=data).records
    warmup = int(round(cfg.optimizer.warmup_frac * cfg.total_steps))
    lag = [n.val_loss - s.val_loss for s, n in zip(curves["stochastic"], curves["nearest"]) if 0 < s.step <= warmup]
    row = dict(seed=seed, sr=curves["stochastic"][-1].val_loss, rtn=curves["nearest"][-1].val_loss,
               warmup_lag_min=min(lag), warmup_lag_mean=float(np.mean(lag)),
               curves={k: [(r.step, r.val_loss) for r in v] for k, v in curves.items()})
    rows.append(row)
    print(f"seed {seed}: SR {row['sr']:.4f}  RTN {row['rtn']:.4f}  "
          f"warmup lag min {row['warmup_lag_min']:+.3f} mean {row['warmup_lag_mean']:+.3f}", flush=True)
wins = sum(r["sr"] <= r["rtn"] for r in rows)
print(f"SR <= RTN in {wins}/{len(rows)} seeds")
dump(args, rows)
