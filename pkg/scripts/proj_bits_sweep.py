"""Final char-LM validation loss as the projection matrix storage shrinks."""
from _common import base_parser, dump, ensure_corpus, lm_config
from qgalore.trainer import run_training

p = base_parser(__doc__)
p.add_argument("--bits", type=int, nargs="+", default=[32, 16, 8, 4])
args = p.parse_args()
data = ensure_corpus(args.corpus)
rows = []
for seed in args.seeds:
    for bits in args.bits:
        cfg = lm_config(args, seed, method="qgalore", subspace=dict(proj_bits=bits))
        final = run_training(cfg, data=data).final
        rows.append(dict(seed=seed, proj_bits=bits, val_loss=final.val_loss))
        print(f"seed {seed} proj_bits {bits:>2}: val {final.val_loss:.4f}", flush=True)
losses = [r["val_loss"] for r in rows]
print(f"spread {100 * (max(losses) / min(losses) - 1):.2f}%")
dump(args, rows)
