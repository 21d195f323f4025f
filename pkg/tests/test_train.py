import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demsr.checkpoint import load_checkpoint
from demsr.data import synthetic_pairs
from demsr.exceptions import ConfigError, ContractError, NonFiniteError
from demsr.model import build_model, model_forward, tiny_config
from demsr.ops import mse_loss
from demsr.tensor import Graph, Tensor, backward
from demsr.train import (
    AdamState,
    PlateauScheduler,
    TrainConfig,
    adam_step,
    error_report,
    evaluate,
    export_report,
    fit,
    load_model,
    read_history,
    read_report,
    write_history,
)


def P(value):
    return Tensor(np.array(value, dtype=np.float64).reshape(1, 1, 1, -1), requires_grad=True)


@pytest.fixture(scope="module")
def small_pairs():
    return synthetic_pairs(range(4), size=160, tile=160, roughness=0.3)


# Adam ----------------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = P([1.0, -2.0])
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros((1, 1, 1, 2))}, state, 0.1)
    assert p.data.tolist() == [[[[1.0, -2.0]]]] and state.t == 1


def test_adam_first_step_is_minus_lr():
    p = P([0.5])
    adam_step({"p": p}, {"p": np.ones((1, 1, 1, 1))}, AdamState(), 0.001)
    # m_hat = 1, v_hat = 1 -> step = 1 / (1 + 1e-8)
    assert p.data.item() == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_quadratic_convergence():
    p = P([0.0])
    state = AdamState()
    for _ in range(100):
        adam_step({"p": p}, {"p": 2 * (p.data - 3.0)}, state, 0.1)
    assert abs(p.data.item() - 3.0) < 0.1


def test_adam_missing_grad_names_param():
    with pytest.raises(ContractError, match="'w'"):
        adam_step({"w": P([1.0])}, {}, AdamState(), 0.1)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_adam_second_moment_nonnegative(gs):
    p = P([0.0])
    state = AdamState()
    for g in gs:
        adam_step({"p": p}, {"p": np.full((1, 1, 1, 1), g)}, state, 0.01)
    assert np.all(state.v["p"] >= 0) and state.t == len(gs)
    assert state.m["p"].shape == p.shape


# scheduler ---------------------------------------------------------------------------


def _sched(**kw):
    return PlateauScheduler(lr=0.001, patience=10, factor=0.1, threshold=1e-4, min_lr=1e-6, **kw)


def test_scheduler_decreasing_never_changes():
    s = _sched()
    assert {s.step(1.0 / (e + 1)) for e in range(50)} == {0.001}


def test_scheduler_constant_loss():
    # epoch 1 sets the best; epochs 2..12 are the 11 non-improving ones
    s = _sched()
    lrs = [s.step(5.0) for _ in range(12)]
    assert lrs[:11] == [0.001] * 11
    assert lrs[11] == pytest.approx(0.0001)


def test_scheduler_floor():
    s = PlateauScheduler(lr=1e-6, patience=1, min_lr=1e-6)
    assert [s.step(1.0) for _ in range(10)] == [1e-6] * 10


def test_scheduler_relative_threshold():
    s = _sched()
    s.step(1.0)
    s.step(1.0 - 0.5e-4)  # within threshold: not an improvement
    assert s.num_bad_epochs == 1 and s.best == 1.0
    s.step(1.0 - 2e-4)
    assert s.num_bad_epochs == 0


def test_scheduler_nan_aborts():
    with pytest.raises(NonFiniteError):
        _sched().step(float("nan"))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=80))
def test_scheduler_monotone_and_bounded(losses):
    s = PlateauScheduler(lr=0.001, patience=2, factor=0.5, min_lr=1e-5)
    lrs = [s.step(l) for l in losses]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert all(l >= 1e-5 for l in lrs)


def test_train_config_validation():
    for kw, name in [(dict(learning_rate=0), "learning_rate"), (dict(plateau_factor=1.0), "plateau_factor"),
                     (dict(plateau_patience=0), "plateau_patience")]:
        with pytest.raises(ConfigError, match=name):
            TrainConfig(**kw).validate()


# fit ----------------------------------------------------------------------------------------


def test_fit_rejects_empty():
    with pytest.raises(ContractError):
        fit(build_model(tiny_config()), [], TrainConfig(max_epochs=1))


def test_fit_first_epoch_lr(small_pairs):
    res = fit(build_model(tiny_config()), small_pairs, TrainConfig(max_epochs=2))
    assert res.history[0].lr == 0.001
    assert [r.epoch for r in res.history] == [1, 2]


def test_tiny_step_leaves_loss_unchanged(small_pairs):
    model = build_model(tiny_config(), dtype=np.float64)
    res = fit(model, small_pairs[:1], TrainConfig(max_epochs=0))
    from demsr.train import _stack

    lr, hr = _stack(small_pairs[:1], res.stats, np.float64)

    def loss():
        with Graph() as g:
            value = mse_loss(model_forward(model, Tensor(lr)), hr)
        return value, g

    before, g = loss()
    backward(before, g)
    adam_step(model.params, {k: p.grad for k, p in model.params.items()}, AdamState(), 1e-12)
    after, _ = loss()
    assert abs(after.item() - before.item()) < 1e-7


def test_fit_deterministic_and_resumable(small_pairs, tmp_path):
    cfg = TrainConfig(max_epochs=6, batch_size=3, seed=7)
    a = fit(build_model(tiny_config(seed=1)), small_pairs, cfg, out_dir=tmp_path / "a")
    b = fit(build_model(tiny_config(seed=1)), small_pairs, cfg, out_dir=tmp_path / "b")
    write_history(a.history, tmp_path / "a.csv")
    write_history(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_history(tmp_path / "a.csv") == a.history

    half = fit(build_model(tiny_config(seed=1)), small_pairs, TrainConfig(max_epochs=3, batch_size=3, seed=7),
               out_dir=tmp_path / "h")
    ckpt = load_checkpoint(tmp_path / "h" / "latest.ev2d")
    assert ckpt.meta["epoch"] == 3
    resumed = fit(build_model(tiny_config(seed=1)), small_pairs, cfg, resume=ckpt)
    assert [r.train_loss for r in resumed.history] == [r.train_loss for r in a.history]
    assert half.history == a.history[:3]
    final_a = load_checkpoint(tmp_path / "a" / "latest.ev2d")
    assert all(final_a.params[k].tobytes() == resumed.checkpoint.params[k].tobytes() for k in final_a.params)


def test_fit_writes_best_checkpoint(small_pairs, tmp_path):
    res = fit(build_model(tiny_config()), small_pairs, TrainConfig(max_epochs=3), out_dir=tmp_path)
    best = load_checkpoint(tmp_path / "best.ev2d")
    best_epoch = min(res.history, key=lambda r: r.train_loss).epoch
    assert best.meta["epoch"] == best_epoch


def test_fit_aborts_on_non_finite_keeping_last_good(small_pairs, tmp_path):
    model = build_model(tiny_config())

    def poison(rec):
        if rec.epoch == 2:
            model.params["final.bias"].data[...] = np.nan

    with pytest.raises(NonFiniteError):
        fit(model, small_pairs, TrainConfig(max_epochs=5), out_dir=tmp_path, on_epoch=poison)
    ckpt = load_checkpoint(tmp_path / "latest.ev2d")
    assert ckpt.meta["epoch"] == 2
    assert all(np.all(np.isfinite(v)) for v in ckpt.params.values())


def test_fit_overfit_regression_fixture():
    # documented fan-in initialisation everywhere, 8 pairs, 200 epochs
    pairs = synthetic_pairs(range(8), roughness=0.2)
    res = fit(build_model(tiny_config(seed=0, head_init="kaiming", up2_init_scale=1.0)), pairs,
              TrainConfig(max_epochs=200))
    assert res.history[-1].train_loss < 0.1 * res.history[0].train_loss


# evaluation ---------------------------------------------------------------------------------------


def test_perfect_predictor(small_pairs):
    r = evaluate(lambda lr: np.stack([p.hr.values for p in small_pairs]), small_pairs)
    assert r.mse == 0 and r.err_mean == 0 and r.within_one_std_frac == 1.0
    assert r.n_pixels == 4 * 160 * 160


def test_two_pixel_report():
    r = error_report(np.array([1.0, 2.0]), np.array([0.0, 0.0]), bins=4)
    assert (r.mse, r.err_mean, r.err_median, r.err_std) == (2.5, 1.5, 1.5, 0.5)
    assert r.within_one_std_frac == 1.0
    assert r.bin_edges[0] == 0 and r.bin_edges[-1] == 2.0 and r.counts.sum() == 2


def test_within_one_std_counts_abs_errors():
    r = error_report(np.array([0.0, 0.0, 0.0, 10.0]), np.zeros(4))
    # mean 2.5, std 4.33: only the three zeros fall inside [-1.83, 6.83]
    assert r.within_one_std_frac == 0.75


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 60))
def test_report_invariants(seed, bins):
    rng = np.random.default_rng(seed)
    pred, tgt = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
    r = error_report(pred, tgt, bins=bins)
    assert r.err_median >= 0 and 0 <= r.within_one_std_frac <= 1
    assert r.counts.sum() == 21 and len(r.counts) == bins


def test_evaluate_errors():
    with pytest.raises(ContractError):
        evaluate("bicubic", [])
    with pytest.raises(ContractError):
        evaluate(build_model(tiny_config()), synthetic_pairs([0], size=160, tile=160))


def test_bilinear_not_better_than_bicubic_20_seeds():
    for seed in range(20):
        pairs = synthetic_pairs([seed], roughness=0.2)
        assert evaluate("bilinear", pairs).mse >= evaluate("bicubic", pairs).mse


def test_checkpoint_reload_gives_identical_report(small_pairs, tmp_path):
    res = fit(build_model(tiny_config()), small_pairs, TrainConfig(max_epochs=2), out_dir=tmp_path)
    model, stats = load_model(tmp_path / "latest.ev2d")
    a = evaluate(model, small_pairs, stats)
    model2, stats2 = load_model(tmp_path / "latest.ev2d")
    assert stats2 == res.stats
    assert a.scalars() == evaluate(model2, small_pairs, stats2).scalars()


def test_export_report_round_trip(tmp_path, rng):
    r = error_report(rng.normal(size=500), rng.normal(size=500), bins=7)
    export_report(r, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count" and "#summary" in lines
    back = read_report(tmp_path / "r.csv")
    assert back.counts.tolist() == r.counts.tolist() and back.counts.sum() == 500
    for k in ("mse", "err_mean", "err_median", "err_std", "within_one_std_frac"):
        assert math.isclose(getattr(back, k), getattr(r, k), rel_tol=1e-8)
    np.testing.assert_allclose(back.bin_edges, r.bin_edges, rtol=1e-8)
