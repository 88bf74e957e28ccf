"""SVD count and final loss for fixed vs adaptive subspace intervals.

Sweeps the similarity threshold; a threshold above 1 never doubles, which
is the fixed-interval baseline.
"""
from _common import base_parser, dump, ensure_corpus, lm_config
from qgalore.trainer import run_training

p = base_parser(__doc__)
p.add_argument("--thresholds", type=float, nargs="+", default=[2.0, 0.6, 0.4, 0.2, 0.0])
p.add_argument("--similarity", choices=["flat", "column"], default="flat")
args = p.parse_args()
data = ensure_corpus(args.corpus)
rows = []
for seed in args.seeds:
    for tau in args.thresholds:
        cfg = lm_config(args, seed, method="qgalore",
                        subspace=dict(threshold=tau, similarity=args.similarity))
        result = run_training(cfg, data=data)
        final = result.final
        sims = [p["last_similarity"] for p in final.per_layer]
        rows.append(dict(seed=seed, threshold=tau, svd_calls=final.svd_calls_total, val_loss=final.val_loss,
                         intervals=[p["interval"] for p in final.per_layer], last_similarity=sims))
        print(f"seed {seed} tau {tau:>4}: svd {final.svd_calls_total:>4}  val {final.val_loss:.4f}  "
              f"intervals {rows[-1]['intervals']}", flush=True)
dump(args, rows)
