"""Final validation loss of FullAdam, GaLore and QGaLore on the same seeds and steps."""
from _common import base_parser, dump, ensure_corpus, lm_config
from qgalore.trainer import run_training

p = base_parser(__doc__)
p.add_argument("--full-adam-lr", type=float, default=0.01)
p.add_argument("--hidden", type=int, default=64)
args = p.parse_args()
data = ensure_corpus(args.corpus)
rows = []
for seed in args.seeds:
    row = dict(seed=seed)
    for method in ("full_adam", "galore", "qgalore"):
        opt = dict(lr=args.full_adam_lr) if method == "full_adam" else {}
        cfg = lm_config(args, seed, method=method, optimizer=opt, model=dict(lm_hidden=args.hidden))
        row[method] = run_training(cfg, data=data).final.val_loss
    rows.append(row)
    print(f"seed {seed}: " + "  ".join(f"{m} {row[m]:.4f}" for m in ("full_adam", "galore", "qgalore"))
          + f"  gap {100 * (row['qgalore'] / row['full_adam'] - 1):+.1f}%", flush=True)
dump(args, rows)
