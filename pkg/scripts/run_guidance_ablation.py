#!/usr/bin/env python3
"""Effect of the guidance term: how many modules end up keeping their dense matrix.

Runs the full method twice per seed (guidance weight 100 vs 0, everything else
identical) and reports the dense-mode layer counts plus per-layer final ratios.

Usage:
    python scripts/run_guidance_ablation.py --corpus /tmp/corpus.txt --out-dir /tmp/lg
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def sh(*args) -> str:
    proc = subprocess.run([sys.executable, "-m", "rankalloc.cli", *map(str, args)],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise SystemExit(f"command failed ({proc.returncode}):\n{proc.stderr}")
    return proc.stdout


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--corpus", required=True)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--ratio", type=float, default=0.8)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--seq-len", type=int, default=64)
    args = parser.parse_args()

    out_root = Path(args.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    strictly_more = 0
    for seed in args.seeds:
        dense = out_root / f"dense-s{seed}.rkl"
        if not dense.exists():
            sh("pretrain", "--corpus", args.corpus, "--model-out", dense,
               "--width", args.width, "--depth", args.depth,
               "--seq-len", args.seq_len, "--seed", seed)
        counts = {}
        for lam1 in (100.0, 0.0):
            run_dir = out_root / f"s{seed}-lg{int(lam1)}"
            sh("compress", "--model-in", dense, "--corpus", args.corpus,
               "--out-dir", run_dir, "--method", "ara", "--ratio", args.ratio,
               "--lambda1", lam1, "--seed", seed, "--samples", 256,
               "--seq-len", args.seq_len, "--epochs", 10, "--batch-size", 8,
               "--lr", 0.01)
            alloc = json.loads((run_dir / "allocation.json").read_text())
            counts[lam1] = sum(l["mode"] == "dense" for l in alloc["layers"])
            ratios = [f"{l['name']}={l['ratio']:.2f}" for l in alloc["layers"]]
            print(f"seed {seed} lambda1={lam1:g}: {counts[lam1]} dense "
                  f"[{', '.join(ratios)}]")
        strictly_more += counts[100.0] > counts[0.0]
    print(f"\nguidance produced strictly more dense layers in "
          f"{strictly_more}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
