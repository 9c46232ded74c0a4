import numpy as np
import pytest

from rankalloc import allocator as al
from rankalloc import autodiff as ad
from rankalloc import baselines as bl
from rankalloc import model as mz
from rankalloc.errors import ConfigError, InputError


@pytest.fixture(scope="module")
def fitted(corpus_tokens):
    train, heldout = mz.split_corpus(corpus_tokens[:250_000])
    model = mz.build_model(width=32, depth=2, seed=1)
    mz.pretrain(model, train, steps=150, lr=3e-3, batch_size=16, seq_len=48, seed=1)
    calib = mz.capture_calibration(model, train, samples=48, seq_len=48, seed=1)
    return model, calib, heldout


def quick_cfg(**kw):
    kw.setdefault("target_ratio", 0.8)
    kw.setdefault("epochs", 2)
    kw.setdefault("samples", 48)
    kw.setdefault("seq_len", 48)
    kw.setdefault("batch_size", 16)
    kw.setdefault("lr", 1e-2)
    kw.setdefault("seed", 0)
    return al.TrainConfig(**kw)


# -- kinds ----------------------------------------------------------------------

def test_kind_validation():
    with pytest.raises(ConfigError):
        bl.BaselineKind(tag="magic").validate()
    with pytest.raises(ConfigError):
        bl.BaselineKind(tag="tanh", tanh_sharpness=-1.0).validate()
    with pytest.raises(ConfigError):
        bl.BaselineKind(tag="gumbel", gumbel_temperature=0.0).validate()
    assert bl.BaselineKind(tag="uniform").validate().tag == "uniform"


def test_kind_lr_defaults():
    cfg = quick_cfg(lr=2e-3)
    assert bl.BaselineKind(tag="gumbel").effective_lr(cfg) == 2e-3
    assert bl.BaselineKind(tag="tanh").effective_lr(cfg) == 0.1
    assert bl.BaselineKind(tag="tanh", lr_override=0.1).effective_lr(cfg) == 0.1


# -- uniform ---------------------------------------------------------------------

def test_uniform_allocate_square_layers():
    shapes = {f"l{i}": (64, 64) for i in range(3)}
    ranks = bl.uniform_allocate(shapes, 0.5)
    assert all(r == 16 for r in ranks.values())  # floor(0.5 * 64*64/128)


def test_uniform_allocate_target_one():
    ranks = bl.uniform_allocate({"a": (48, 32)}, 1.0)
    assert ranks["a"] == int(48 * 32 / 80)  # break-even rank


def test_uniform_allocate_clamps_tiny_layers():
    ranks = bl.uniform_allocate({"a": (4, 4)}, 0.1)
    assert ranks["a"] == 1


def test_uniform_realized_within_bound(fitted):
    model, calib, _ = fitted
    run, _ = bl.run_baseline(bl.BaselineKind(tag="uniform"), model, calib,
                             quick_cfg(target_ratio=0.7))
    c_total = model.compressible_dense_count()
    bound = sum(a.rows + a.cols for a in run.allocations) / c_total
    assert run.realized_ratio <= 0.7 + 1e-12
    assert run.realized_ratio >= 0.7 - bound
    assert run.steps == []  # closed-form, no training


# -- tanh mask ---------------------------------------------------------------------

def test_tanh_mask_midpoint_and_saturation():
    rng = ad.make_rng(0)
    w = rng.standard_normal((16, 16))
    x = rng.standard_normal((16, 80))
    from rankalloc.factorization import whiten_and_decompose
    fact = whiten_and_decompose(w, x)
    layer = bl.TanhMaskLayer("t", w, fact, sharpness=None)
    assert layer.sharpness == pytest.approx(0.1 * 16)
    values = layer.mask_values()
    k = float(layer.cutoff.value[0, 0])
    # at i == k the mask is exactly 1/2
    assert values[int(k) - 1] == pytest.approx(0.5, abs=1e-12)
    assert (np.diff(values) <= 1e-12).all()

    sharp = bl.TanhMaskLayer("s", w, fact, sharpness=50.0)
    values = sharp.mask_values()
    assert values[0] > 1 - 1e-6 and values[-1] < 1e-6


def test_tanh_gradient_matches_finite_differences():
    rng = ad.make_rng(1)
    w = rng.standard_normal((12, 12))
    x = rng.standard_normal((12, 60))
    from rankalloc.factorization import whiten_and_decompose
    layer = bl.TanhMaskLayer("t", w, whiten_and_decompose(w, x), sharpness=0.7)
    weights = ad.const(rng.standard_normal((1, layer.mask_length)))

    def build():
        return ad.sum_all(ad.hadamard(layer.soft_mask_node(), weights))

    build().backward()
    got = layer.cutoff.grad[0, 0]
    h = 1e-6
    layer.cutoff.value[0, 0] += h
    hi = build().item()
    layer.cutoff.value[0, 0] -= 2 * h
    lo = build().item()
    layer.cutoff.value[0, 0] += h
    assert got == pytest.approx((hi - lo) / (2 * h), abs=1e-6)


# -- gumbel mask ---------------------------------------------------------------------

def test_gumbel_saturation_and_hard_limit():
    rng = ad.make_rng(2)
    w = rng.standard_normal((12, 12))
    x = rng.standard_normal((12, 60))
    from rankalloc.factorization import whiten_and_decompose
    layer = bl.GumbelMaskLayer("g", w, whiten_and_decompose(w, x), temperature=1.0)
    layer.logits.value[:] = 1e6
    assert layer.soft_mask_node(ad.make_rng(0)).value.min() > 1 - 1e-9

    cold = bl.GumbelMaskLayer("g", w, whiten_and_decompose(w, x), temperature=1e-9)
    cold.logits.value[:] = 0.0
    values = cold.soft_mask_node(ad.make_rng(0)).value
    assert set(np.round(values.reshape(-1), 12)) <= {0.0, 1.0}


def test_gumbel_zero_logit_mean_half():
    rng = ad.make_rng(3)
    w = rng.standard_normal((8, 8))
    x = rng.standard_normal((8, 40))
    from rankalloc.factorization import whiten_and_decompose
    layer = bl.GumbelMaskLayer("g", w, whiten_and_decompose(w, x), temperature=1.0)
    noise_rng = ad.make_rng(4)
    draws = [layer.soft_mask_node(noise_rng).value.mean() for _ in range(1250)]
    assert np.mean(draws) == pytest.approx(0.5, abs=0.02)


# -- trained baselines end to end ------------------------------------------------------

@pytest.mark.parametrize("tag", ["tanh", "gumbel"])
def test_trained_baseline_runs_and_rescales(fitted, tag):
    model, calib, _ = fitted
    cfg = quick_cfg(target_ratio=0.7)
    run, layers = bl.run_baseline(bl.BaselineKind(tag=tag), model, calib, cfg)
    assert run.method == tag
    assert len(run.steps) == 2 * (48 // 16)
    assert all(a.mode == "low-rank" for a in run.allocations)  # no dense switch
    c_total = model.compressible_dense_count()
    bound = sum(a.rows + a.cols for a in run.allocations) / c_total
    assert 0.7 - bound - 1e-9 <= run.realized_ratio <= 0.7 + 1e-12
    comp = al.materialize(model, layers, run.final_ranks())
    assert comp.realized_ratio() == pytest.approx(run.realized_ratio)


def test_baseline_guidance_term_is_zero(fitted):
    model, calib, _ = fitted
    run, _ = bl.run_baseline(bl.BaselineKind(tag="gumbel"), model, calib,
                             quick_cfg(epochs=1))
    assert all(rec.guidance_mean == 0.0 for rec in run.steps)


def test_baseline_deterministic(fitted):
    model, calib, _ = fitted
    runs = [bl.run_baseline(bl.BaselineKind(tag="gumbel"), model, calib,
                            quick_cfg(seed=9))[0] for _ in range(2)]
    assert runs[0].allocation_dict() == runs[1].allocation_dict()
    assert runs[0].steps_csv() == runs[1].steps_csv()
