"""Write the pseudo-English corpus used by the char-LM experiments."""
import argparse

from qgalore.data import synthetic_corpus

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("path")
p.add_argument("--bytes", type=int, default=1_100_000)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

text = synthetic_corpus(args.bytes, args.seed)
with open(args.path, "wb") as f:
    f.write(text)
print(f"{args.path}: {len(text)} bytes, {len(set(text))} distinct symbols")
