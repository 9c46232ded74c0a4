#!/usr/bin/env python3
"""Learned allocation vs uniform truncation across seeds, via the CLI pipeline.

Pretrains one desk-scale model per seed, compresses it with both methods at
the requested ratios, evaluates held-out CE with `rankalloc evaluate`, and
prints a per-seed table plus win counts.

Usage:
    python scripts/make_corpus.py --out /tmp/corpus.txt --size-mb 1.2
    python scripts/run_comparison.py --corpus /tmp/corpus.txt --out-dir /tmp/cmp
"""

import argparse
import json
import re
import subprocess
import sys
from pathlib import Path


def sh(*args) -> str:
    proc = subprocess.run([sys.executable, "-m", "rankalloc.cli", *map(str, args)],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"command failed ({proc.returncode}):\n{proc.stderr}")
    return proc.stdout


def evaluate(model, corpus, seq_len) -> float:
    out = sh("evaluate", "--model-in", model, "--corpus", corpus,
             "--seq-len", seq_len)
    return float(re.search(r"cross-entropy ([0-9.]+)", out).group(1))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--ratios", type=float, nargs="+", default=[0.8, 0.6])
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--seq-len", type=int, default=64)
    parser.add_argument("--pretrain-steps", type=int, default=600)
    parser.add_argument("--samples", type=int, default=256)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--mask-lr", type=float, default=1e-2)
    args = parser.parse_args()

    out_root = Path(args.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    wins = {ratio: 0 for ratio in args.ratios}
    rows = []
    for seed in args.seeds:
        dense = out_root / f"dense-s{seed}.rkl"
        if not dense.exists():
            sh("pretrain", "--corpus", args.corpus, "--model-out", dense,
               "--width", args.width, "--depth", args.depth,
               "--steps", args.pretrain_steps, "--seq-len", args.seq_len,
               "--seed", seed)
        for ratio in args.ratios:
            cells = {}
            for method in ("ara", "uniform"):
                run_dir = out_root / f"s{seed}-{method}-{int(ratio * 100)}"
                sh("compress", "--model-in", dense, "--corpus", args.corpus,
                   "--out-dir", run_dir, "--method", method, "--ratio", ratio,
                   "--seed", seed, "--samples", args.samples,
                   "--seq-len", args.seq_len, "--epochs", args.epochs,
                   "--batch-size", 8, "--lr", args.mask_lr)
                alloc = json.loads((run_dir / "allocation.json").read_text())
                cells[method] = (evaluate(run_dir / "compressed.rkl", args.corpus,
                                          args.seq_len),
                                 alloc["realized_ratio"])
            wins[ratio] += cells["ara"][0] < cells["uniform"][0]
            rows.append((seed, ratio, *cells["ara"], *cells["uniform"]))
            print(f"seed {seed} ratio {ratio}: learned CE {cells['ara'][0]:.4f} "
                  f"(@{cells['ara'][1]:.3f}) vs uniform {cells['uniform'][0]:.4f} "
                  f"(@{cells['uniform'][1]:.3f})")

    print("\nwin counts (learned < uniform):")
    for ratio in args.ratios:
        print(f"  ratio {ratio}: {wins[ratio]}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
