"""Command-line pipeline: pretrain, compress, evaluate, report.

Exit codes are a stable contract for scripting: 0 success, 2 configuration
error, 3 IO error (missing or corrupt files), 4 numerical error. All output
files are written atomically. A manifest.json snapshot of the effective
configuration accompanies every compress run so it can be reproduced
bit-for-bit.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import allocator as al
from . import baselines as bl
from . import model as mz
from .errors import ConfigError, InputError, NumericalError, RankAllocError
from .guidance import MODE_DENSE
from .io import FormatError, atomic_write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

METHODS = ("ara", "uniform", "tanh", "gumbel")

# compress settings: config-file key -> (type, default)
COMPRESS_KEYS = {
    "method": (str, "ara"),
    "ratio": (float, 0.8),
    "lambda1": (float, 100.0),
    "lambda2": (float, 100.0),
    "D": (int, 100),
    "lr": (float, 1e-3),
    "epochs": (int, 10),
    "samples": (int, 256),
    "seq-len": (int, 512),
    "batch-size": (int, 16),
    "seed": (int, 0),
    "clamp-guidance": (str, "on"),
    "damping": (float, 1e-6),
    "tanh-sharpness": (float, None),
    "gumbel-temperature": (float, 1.0),
    "baseline-lr": (float, None),
    "corpus": (str, None),
    "model-in": (str, None),
    "model-out": (str, None),
    "out-dir": (str, None),
}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; keys match CLI flags."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in COMPRESS_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_compress_settings(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit CLI flags; full snapshot returned."""
    settings = {key: default for key, (_, default) in COMPRESS_KEYS.items()}
    if args.config:
        for key, raw in parse_config_file(args.config).items():
            caster = COMPRESS_KEYS[key][0]
            try:
                settings[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: cannot parse {raw!r}") from exc
    for key in COMPRESS_KEYS:
        flag = key.replace("-", "_")
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    if settings["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {settings['method']!r}")
    if settings["clamp-guidance"] not in ("on", "off"):
        raise ConfigError("clamp-guidance must be 'on' or 'off'")
    for key in ("corpus", "model-in", "out-dir"):
        if not settings[key]:
            raise ConfigError(f"missing required setting {key!r} (flag or config file)")
    if settings["model-out"] is None:
        settings["model-out"] = str(Path(settings["out-dir"]) / "compressed.rkl")
    return settings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankalloc",
        description="SVD compression of small language models with learned "
                    "per-layer rank allocation")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="fit a byte-level model on a corpus")
    p_pre.add_argument("--corpus", required=True)
    p_pre.add_argument("--model-out", required=True)
    p_pre.add_argument("--width", type=int, default=64)
    p_pre.add_argument("--depth", type=int, default=3)
    p_pre.add_argument("--hidden", type=int, default=None)
    p_pre.add_argument("--attention", action="store_true")
    p_pre.add_argument("--steps", type=int, default=600)
    p_pre.add_argument("--lr", type=float, default=3e-3)
    p_pre.add_argument("--batch-size", type=int, default=32)
    p_pre.add_argument("--seq-len", type=int, default=64)
    p_pre.add_argument("--seed", type=int, default=0)

    p_cmp = sub.add_parser("compress", help="learn an allocation and emit the "
                                            "compressed model plus reports")
    p_cmp.add_argument("--config", help="flat key = value file; flags override it")
    p_cmp.add_argument("--method", choices=METHODS)
    p_cmp.add_argument("--ratio", type=float)
    p_cmp.add_argument("--lambda1", type=float)
    p_cmp.add_argument("--lambda2", type=float)
    p_cmp.add_argument("--D", type=int, dest="D")
    p_cmp.add_argument("--lr", type=float)
    p_cmp.add_argument("--epochs", type=int)
    p_cmp.add_argument("--samples", type=int)
    p_cmp.add_argument("--seq-len", type=int)
    p_cmp.add_argument("--batch-size", type=int)
    p_cmp.add_argument("--seed", type=int)
    p_cmp.add_argument("--clamp-guidance", choices=("on", "off"))
    p_cmp.add_argument("--damping", type=float)
    p_cmp.add_argument("--tanh-sharpness", type=float)
    p_cmp.add_argument("--gumbel-temperature", type=float)
    p_cmp.add_argument("--baseline-lr", type=float)
    p_cmp.add_argument("--corpus")
    p_cmp.add_argument("--model-in")
    p_cmp.add_argument("--model-out")
    p_cmp.add_argument("--out-dir")

    p_ev = sub.add_parser("evaluate", help="held-out CE/perplexity and parameter "
                                           "accounting of a model file")
    p_ev.add_argument("--model-in", required=True)
    p_ev.add_argument("--corpus", required=True)
    p_ev.add_argument("--seq-len", type=int, default=64)
    p_ev.add_argument("--split", choices=("heldout", "all"), default="heldout")
    p_ev.add_argument("--heldout-fraction", type=float, default=0.1)
    p_ev.add_argument("--max-windows", type=int, default=None)

    p_rep = sub.add_parser("report", help="per-layer ratio table from a run directory")
    p_rep.add_argument("--run-dir", required=True)
    return parser


def cmd_pretrain(args) -> int:
    tokens = mz.load_corpus(args.corpus)
    train, heldout = mz.split_corpus(tokens)
    model = mz.build_model(width=args.width, depth=args.depth, seed=args.seed,
                           hidden=args.hidden, attention=args.attention)
    trace = mz.pretrain(model, train, steps=args.steps, lr=args.lr,
                        batch_size=args.batch_size, seq_len=args.seq_len,
                        seed=args.seed, log_every=max(args.steps // 10, 1))
    ce, ppl = mz.evaluate_ce(model, heldout, seq_len=args.seq_len, max_windows=400)
    model.to_file(args.model_out)
    print(f"final train loss {trace[-1]:.4f}; held-out CE {ce:.4f} (ppl {ppl:.3f})")
    print(f"wrote {args.model_out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    settings = resolve_compress_settings(args)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out_dir = Path(settings["out-dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    model = mz.CompressibleModel.from_file(settings["model-in"])
    tokens = mz.load_corpus(settings["corpus"])
    train, _ = mz.split_corpus(tokens)
    cfg = al.TrainConfig(
        target_ratio=settings["ratio"], lambda1=settings["lambda1"],
        lambda2=settings["lambda2"], mask_steps=settings["D"], lr=settings["lr"],
        epochs=settings["epochs"], samples=settings["samples"],
        seq_len=settings["seq-len"], batch_size=settings["batch-size"],
        seed=settings["seed"], clamp_guidance=settings["clamp-guidance"] == "on",
        damping=settings["damping"]).validate()
    calib = mz.capture_calibration(model, train, samples=cfg.samples,
                                   seq_len=cfg.seq_len, seed=cfg.seed)

    method = settings["method"]
    if method == "ara":
        run, layers = al.train(model, calib, cfg)
    else:
        kind = bl.BaselineKind(tag=method, tanh_sharpness=settings["tanh-sharpness"],
                               gumbel_temperature=settings["gumbel-temperature"],
                               lr_override=settings["baseline-lr"])
        run, layers = bl.run_baseline(kind, model, calib, cfg)
    compressed = al.materialize(model, layers, run.final_ranks())

    model_path = Path(settings["model-out"])
    compressed.to_file(model_path)
    alloc_path = out_dir / "allocation.json"
    atomic_write_text(alloc_path, json.dumps(run.allocation_dict(), sort_keys=True,
                                             indent=2) + "\n")
    steps_path = out_dir / "steps.csv"
    atomic_write_text(steps_path, run.steps_csv())
    manifest = {
        "tool": f"rankalloc {__version__}",
        "command": "compress",
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "seed": cfg.seed,
        "settings": settings,
        "model_dims": asdict(model.dims),
        "outputs": {"model": str(model_path), "allocation": str(alloc_path),
                    "steps": str(steps_path)},
    }
    atomic_write_text(out_dir / "manifest.json",
                      json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    dense_n = run.dense_mode_count()
    print(f"method {run.method}: realized ratio {run.realized_ratio:.4f} "
          f"(target {cfg.target_ratio}), {dense_n} dense layer(s)")
    print(f"wrote {model_path}, {alloc_path}, {steps_path}, "
          f"{out_dir / 'manifest.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = mz.CompressibleModel.from_file(args.model_in)
    tokens = mz.load_corpus(args.corpus)
    if args.split == "heldout":
        _, tokens = mz.split_corpus(tokens, args.heldout_fraction)
    ce, ppl = mz.evaluate_ce(model, tokens, seq_len=args.seq_len,
                             max_windows=args.max_windows)
    dense_equiv = (model.parameter_count()
                   - model.compressible_realized_count()
                   + model.compressible_dense_count())
    print(f"cross-entropy {ce:.6f} nats/byte")
    print(f"perplexity {ppl:.6f}")
    print(f"parameters (realized) {model.parameter_count()}")
    print(f"parameters (dense-equivalent) {dense_equiv}")
    print(f"compressible ratio {model.realized_ratio():.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    alloc_path = run_dir / "allocation.json"
    missing = [str(p) for p in (alloc_path,) if not p.exists()]
    if missing:
        raise FileNotFoundError(f"run artifacts missing: {', '.join(missing)}")
    alloc = json.loads(alloc_path.read_text(encoding="utf-8"))
    lines = ["index,layer,ratio,mode,preserved"]
    for i, layer in enumerate(alloc["layers"]):
        ratio = 1.0 if layer["mode"] == MODE_DENSE else layer["ratio"]
        lines.append(f"{i},{layer['name']},{repr(ratio)},{layer['mode']},"
                     f"{repr(layer['preserved'])}")
    out = run_dir / "layers.csv"
    atomic_write_text(out, "\n".join(lines) + "\n")
    print(f"wrote {out} ({len(alloc['layers'])} layers)")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"pretrain": cmd_pretrain, "compress": cmd_compress,
                "evaluate": cmd_evaluate, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RankAllocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
