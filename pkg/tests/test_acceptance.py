"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The comparative criteria share one desk-scale grid (five seeded models, the
method matrix at ratios 0.8/0.6) built once per session; run with -s to
watch progress. Full suite takes on the order of fifteen minutes on two
CPU cores.
"""

import contextlib
import io
import json
import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rankalloc import allocator as al
from rankalloc import autodiff as ad
from rankalloc import baselines as bl
from rankalloc import cli
from rankalloc import factorization as fz
from rankalloc import masks as mk
from rankalloc import model as mz

from conftest import make_corpus

SEEDS = range(5)
WIDTH, DEPTH, SEQ = 64, 3, 64
PRETRAIN = dict(steps=600, lr=3e-3, batch_size=32, seq_len=SEQ)
DESK = dict(epochs=10, samples=256, seq_len=SEQ, batch_size=8, lr=1e-2)
TANH_ABLATION = dict(tanh_sharpness=0.5, lr_override=0.1)


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE criterion {criterion}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def run_cli(args: list[str]) -> tuple[int, str]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(args)
    return code, buf.getvalue()


def evaluate_ce(model_path: Path, corpus_path: Path) -> float:
    code, out = run_cli(["evaluate", "--model-in", str(model_path),
                         "--corpus", str(corpus_path), "--seq-len", str(SEQ)])
    assert code == 0, out
    return float(re.search(r"cross-entropy ([0-9.]+)", out).group(1))


def compress_cli(model_path: Path, corpus_path: Path, out_dir: Path, **flags) -> dict:
    args = ["compress", "--model-in", str(model_path), "--corpus", str(corpus_path),
            "--out-dir", str(out_dir)]
    merged = dict(DESK)
    merged.update(flags)
    for key, value in merged.items():
        args += [f"--{key.replace('_', '-')}", str(value)]
    code, out = run_cli(args)
    assert code == 0, out
    return json.loads((out_dir / "allocation.json").read_text())


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """1.2 MB corpus plus five seeded pretrained desk models on disk."""
    root = tmp_path_factory.mktemp("acceptance")
    corpus_path = root / "corpus.txt"
    corpus_path.write_text(make_corpus.generate_text(1_200_000, seed=0),
                           encoding="utf-8")
    tokens = mz.load_corpus(corpus_path)
    train, _ = mz.split_corpus(tokens)
    models = {}
    for seed in SEEDS:
        model = mz.build_model(width=WIDTH, depth=DEPTH, seed=seed)
        mz.pretrain(model, train, seed=seed, **PRETRAIN)
        path = root / f"dense-s{seed}.rkl"
        model.to_file(path)
        models[seed] = path
        print(f"  [desk] pretrained seed {seed}")
    return {"root": root, "corpus": corpus_path, "models": models, "train": train}


@pytest.fixture(scope="session")
def matrix(desk):
    """Method grid shared by criteria 4-7: CEs, realized ratios, dense counts."""
    corpus = desk["corpus"]
    grid = {}
    for seed in SEEDS:
        model_path = desk["models"][seed]
        row = {}
        for method, ratio in (("ara", 0.8), ("ara", 0.6),
                              ("uniform", 0.8), ("uniform", 0.6)):
            out = desk["root"] / f"s{seed}-{method}-{int(ratio * 100)}"
            alloc = compress_cli(model_path, corpus, out, method=method,
                                 ratio=ratio, seed=seed)
            row[(method, ratio)] = {
                "alloc": alloc,
                "ce": evaluate_ce(out / "compressed.rkl", corpus),
                "dir": out,
            }
        out = desk["root"] / f"s{seed}-ara-nog-80"
        alloc = compress_cli(model_path, corpus, out, method="ara", ratio=0.8,
                             seed=seed, lambda1=0)
        row[("ara-nog", 0.8)] = {"alloc": alloc, "dir": out}

        # mask-mechanism ablation: shared objective CE + ratio penalty only,
        # every entrant trained on the factored form (no dense switch)
        model = mz.CompressibleModel.from_file(model_path)
        calib = mz.capture_calibration(model, desk["train"], samples=DESK["samples"],
                                       seq_len=SEQ, seed=seed)
        cfg = al.TrainConfig(target_ratio=0.8, seed=seed, **DESK)
        stair_layers = [
            al.CompressibleLayer(l.name, l.weight, l.fact, cfg.mask_steps,
                                 dense_switch=False)
            for l in al.prepare_layers(model, calib, cfg.mask_steps)]
        run = al.train_masks(model, calib, replace(cfg, lambda1=0.0), stair_layers,
                             method="ara-mask", allow_dense=False)
        ces = {}
        compressed = al.materialize(model, stair_layers, run.final_ranks())
        path = desk["root"] / f"s{seed}-ablation-stair.rkl"
        compressed.to_file(path)
        ces["stair"] = evaluate_ce(path, corpus)
        for tag in ("tanh", "gumbel"):
            kind = bl.BaselineKind(tag=tag, **(TANH_ABLATION if tag == "tanh" else {}))
            brun, blayers = bl.run_baseline(kind, model, calib, cfg)
            bpath = desk["root"] / f"s{seed}-ablation-{tag}.rkl"
            al.materialize(model, blayers, brun.final_ranks()).to_file(bpath)
            ces[tag] = evaluate_ce(bpath, corpus)
        row["ablation"] = ces
        grid[seed] = row
        print(f"  [matrix] seed {seed} done")
    return grid


# -- criterion 1: whitened-SVD correctness -------------------------------------

def test_criterion_1_whitened_svd_correctness():
    rng = ad.make_rng(11)
    worst_rel, ey_violations = 0.0, 0
    for _ in range(100):
        m = int(rng.integers(2, 65))
        n = int(rng.integers(2, 65))
        w = rng.standard_normal((m, n))
        x = rng.standard_normal((n, 4 * n))
        fact = fz.whiten_and_decompose(w, x, damping_scale=0.0)
        # reference scale for the lossless case, where both sides are ~0
        floor = 1e-6 * np.linalg.norm(w @ x)
        for r in {1, fact.max_rank, int(rng.integers(1, fact.max_rank + 1))}:
            pair = fz.truncate(fact, r)
            direct = np.linalg.norm(w @ x - pair.left @ pair.right @ x)
            closed = fz.truncation_loss(fact, r)
            worst_rel = max(worst_rel, abs(closed - direct) / max(direct, floor))
        r = int(rng.integers(1, fact.max_rank + 1))
        if r < fact.max_rank:
            pair = fz.truncate(fact, r)
            best = np.linalg.norm(w @ x - pair.left @ pair.right @ x)
            for _ in range(100):
                rival = rng.standard_normal((m, r)) @ rng.standard_normal((r, n))
                if np.linalg.norm(w @ x - rival @ x) < best - 1e-9:
                    ey_violations += 1
    ok = worst_rel <= 1e-6 and ey_violations == 0
    report(1, ok, f"closed-form vs direct worst rel err {worst_rel:.2e}; "
                  f"{ey_violations} Eckart-Young violations over 100x100 rivals")


# -- criterion 2: mask algebra ---------------------------------------------------

def test_criterion_2_mask_algebra():
    assert mk.build_staircase(4, 8).counts.tolist() == [4, 4, 3, 3, 2, 2, 1, 1]
    rng = ad.make_rng(22)
    checked = 0
    for steps, length in ((4, 8), (10, 37), (100, 128)):
        smap = mk.build_staircase(steps, length)
        for _ in range(1000):
            theta = 3.0 * rng.standard_normal(steps)
            alpha = np.exp(theta - theta.max())
            alpha /= alpha.sum()
            p = mk.probability_mask(alpha, smap)
            assert abs(p[0] - 1.0) < 1e-12
            assert (np.diff(p) <= 1e-12).all()
            assert (p >= -1e-15).all() and (p <= 1 + 1e-12).all()
            checked += 1
        pattern = smap.matrix()
        alpha = rng.dirichlet(np.ones(steps))
        h = 1e-6
        for j in range(steps):
            up, dn = alpha.copy(), alpha.copy()
            up[j] += h
            dn[j] -= h
            row = (mk.probability_mask(up, smap)
                   - mk.probability_mask(dn, smap)) / (2 * h)
            assert np.array_equal(np.round(row), pattern[j])
            assert np.abs(row - pattern[j]).max() < 1e-7
    report(2, checked == 3000,
           f"{checked} theta draws monotone with p1=1; Jacobian equals the "
           f"staircase pattern; D=4,r=8 gives v=[4,4,3,3,2,2,1,1]")


# -- criterion 3: STE end-to-end gradient -----------------------------------------

def test_criterion_3_ste_end_to_end():
    rng = ad.make_rng(33)
    model = mz.build_model(width=8, depth=1, vocab=12, seed=2, hidden=16)
    windows = rng.integers(0, 12, size=(4, model.dims.context_order + 8))
    capture = {}
    model.loss(windows, capture=capture)
    calib = mz.CalibrationSet(
        windows=windows,
        activations={k: np.concatenate(v, axis=1) for k, v in capture.items()},
        seed=0)
    cfg = al.TrainConfig(target_ratio=0.6, lambda1=100.0, lambda2=100.0,
                         mask_steps=5, epochs=1, samples=4, seq_len=8,
                         batch_size=4, seed=0)
    layers = al.prepare_layers(model, calib, cfg.mask_steps)
    assert len(layers) == 2
    for layer in layers:
        layer.mask.theta.value[:] = rng.standard_normal((1, 5))
        layer.mask.theta.value[0, 0] += 2.0  # pull mass forward: ratio < 1
    c_total = float(model.compressible_dense_count())

    worst = 0.0
    for lam1, lam2 in ((0.0, 0.0), (cfg.lambda1, cfg.lambda2)):
        cfg_v = replace(cfg, lambda1=lam1, lambda2=lam2)
        states = {l.name: l.begin_step() for l in layers}
        assert all(states[l.name].ratio < 1.0 for l in layers)

        def masked(name, x, _states=states, _layers={l.name: l for l in layers}):
            return ad.matmul(x, ad.transpose(
                _layers[name].effective_weight(_states[name])))

        total = al.objective(model.loss(windows, layer_fn=masked),
                             [states[l.name].guidance for l in layers],
                             [states[l.name].soft_count for l in layers],
                             c_total, cfg_v)
        total.backward()
        framework = {l.name: l.mask.theta.grad.copy() for l in layers}
        for l in layers:
            l.mask.theta.zero_grad()

        # manual chain: dL/dm via mask-as-leaf, times the staircase pattern,
        # times the softmax Jacobian; plus the objective's direct sum(p) terms
        mask_leaves = {l.name: ad.param(states[l.name].binary.reshape(1, -1))
                       for l in layers}

        def leaf_masked(name, x):
            layer = next(l for l in layers if l.name == name)
            weight = ad.matmul(ad.hadamard(layer._left, mask_leaves[name]),
                               layer._right)
            return ad.matmul(x, ad.transpose(weight))

        ce_leaf = model.loss(windows, layer_fn=leaf_masked)
        ce_leaf.backward()
        n_layers = len(layers)
        for layer in layers:
            state = states[layer.name]
            grad_mask = mask_leaves[layer.name].grad[0]           # dL/dm_i
            pattern = layer.mask.smap.matrix()                    # dp_i/da_j
            grad_alpha = pattern @ grad_mask
            soft_sum = float(state.soft_count.item()) / (layer.rows + layer.cols)
            col_sums = pattern.sum(axis=1)                        # d sum(p)/da_j
            gap = (sum(states[l.name].soft_count.item() for l in layers) / c_total
                   - cfg_v.target_ratio)
            grad_alpha += (lam2 * 2.0 * gap / c_total
                           * (layer.rows + layer.cols) * col_sums)
            if lam1 and state.eval.loss > 0.0:
                grad_alpha += (-lam1 / n_layers) * layer.mask.ratio_scale * col_sums
            alpha = layer.mask.alpha_values()
            jac = np.diag(alpha) - np.outer(alpha, alpha)         # da_j/dtheta_k
            manual = grad_alpha @ jac
            worst = max(worst, np.abs(manual - framework[layer.name][0]).max())
        for leaf in mask_leaves.values():
            leaf.zero_grad()
    report(3, worst < 1e-6,
           f"manual chain vs framework dL/dtheta max abs err {worst:.2e} "
           f"(CE-only and full objective)")


# -- criterion 4: constraint satisfaction ------------------------------------------

def test_criterion_4_constraint_satisfaction(matrix):
    worst = []
    for seed in SEEDS:
        for ratio in (0.8, 0.6):
            alloc = matrix[seed][("ara", ratio)]["alloc"]
            layers = alloc["layers"]
            c_total = sum(l["rows"] * l["cols"] for l in layers)
            bound = sum(l["rows"] + l["cols"] for l in layers) / c_total
            gap = abs(alloc["realized_ratio"] - ratio)
            worst.append((gap, bound))
            assert gap <= bound + 1e-9, (seed, ratio, gap, bound)
    gap, bound = max(worst)
    report(4, True, f"post-rescale |realized - target| worst {gap:.4f} "
                    f"<= one-rank-unit bound {bound:.4f} on all 10 runs")


# -- criterion 5: learned allocation beats uniform ----------------------------------

def test_criterion_5_beats_uniform(matrix):
    wins = {0.8: 0, 0.6: 0}
    lines = []
    for seed in SEEDS:
        for ratio in (0.8, 0.6):
            ce_a = matrix[seed][("ara", ratio)]["ce"]
            ce_u = matrix[seed][("uniform", ratio)]["ce"]
            wins[ratio] += ce_a < ce_u
            lines.append(f"s{seed}@{ratio}: {ce_a:.4f} vs {ce_u:.4f}")
    ok = wins[0.8] >= 4 and wins[0.6] >= 4
    report(5, ok, f"strict CE wins over uniform: {wins[0.8]}/5 at 0.8, "
                  f"{wins[0.6]}/5 at 0.6 ({'; '.join(lines)})")


# -- criterion 6: mask ablation ordering --------------------------------------------

def test_criterion_6_mask_ablation_ordering(matrix):
    ok_count = 0
    lines = []
    for seed in SEEDS:
        ces = matrix[seed]["ablation"]
        ok = ces["stair"] <= ces["tanh"] <= ces["gumbel"]
        ok_count += ok
        lines.append(f"s{seed}: {ces['stair']:.4f} <= {ces['tanh']:.4f} "
                     f"<= {ces['gumbel']:.4f} ({'ok' if ok else 'violated'})")
    report(6, ok_count >= 4,
           f"staircase <= tanh <= gumbel in {ok_count}/5 seeds ({'; '.join(lines)})")


# -- criterion 7: guidance-term ablation --------------------------------------------

def test_criterion_7_guidance_ablation(matrix):
    strict = 0
    lines = []
    for seed in SEEDS:
        with_g = sum(l["mode"] == "dense"
                     for l in matrix[seed][("ara", 0.8)]["alloc"]["layers"])
        without_g = sum(l["mode"] == "dense"
                        for l in matrix[seed][("ara-nog", 0.8)]["alloc"]["layers"])
        strict += with_g > without_g
        lines.append(f"s{seed}: {with_g} vs {without_g}")
    report(7, strict >= 4,
           f"dense-mode layers with vs without guidance: {'; '.join(lines)} "
           f"-> strictly greater in {strict}/5 seeds")


# -- criterion 8: lossless edge at target 1 -----------------------------------------

def test_criterion_8_lossless_edge(desk):
    model_path = desk["models"][0]
    out = desk["root"] / "lossless"
    compress_cli(model_path, desk["corpus"], out, method="ara", ratio=1.0, seed=0)
    ce_dense = evaluate_ce(model_path, desk["corpus"])
    ce_comp = evaluate_ce(out / "compressed.rkl", desk["corpus"])
    byte_identical = (out / "compressed.rkl").read_bytes() == model_path.read_bytes()
    ok = abs(ce_dense - ce_comp) < 1e-6 and byte_identical
    report(8, ok, f"target 1.0: CE {ce_comp:.6f} vs dense {ce_dense:.6f} "
                  f"(|diff| {abs(ce_dense - ce_comp):.2e}); "
                  f"model file byte-identical: {byte_identical}")


# -- criterion 9: determinism --------------------------------------------------------

def test_criterion_9_determinism(desk, matrix):
    first = matrix[0][("ara", 0.8)]["dir"]
    rerun = desk["root"] / "determinism-rerun"
    compress_cli(desk["models"][0], desk["corpus"], rerun, method="ara", ratio=0.8,
                 seed=0)
    same_alloc = ((first / "allocation.json").read_bytes()
                  == (rerun / "allocation.json").read_bytes())
    same_steps = ((first / "steps.csv").read_bytes()
                  == (rerun / "steps.csv").read_bytes())
    same_model = ((first / "compressed.rkl").read_bytes()
                  == (rerun / "compressed.rkl").read_bytes())
    ok = same_alloc and same_steps and same_model
    report(9, ok, f"re-run with identical manifest: allocation {same_alloc}, "
                  f"step log {same_steps}, model file {same_model}")
