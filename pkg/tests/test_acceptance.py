"""End-to-end acceptance checks. Each prints one PASS/FAIL line."""
import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import ACCEPTANCE_RESULTS
from trafficlstm import cli, data, nn, train
from trafficlstm.nn import Parameter
from trafficlstm.optim import ClipPolicy, clip_gradients


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line)
    assert ok, line


# --- 1: gradients ----------------------------------------------------------


def test_gradient_correctness():
    start = time.perf_counter()
    worst, count = {}, 0
    for layer in ("dense", "rnn", "lstm"):
        worst[layer] = 0.0
        for seed in range(20):
            T = 2 + seed % 7
            factory = train.gradcheck_case(layer, seed, T=T)
            model = factory()[0]
            assert model.n_params() <= 500 and T <= 8
            worst[layer] = max(worst[layer], train.gradient_check(factory, tolerance=1e-4).max_error)
            count += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{count} instances, max rel err {detail} (< 1e-4), {elapsed:.1f}s (< 60s)")


# --- 2: LSTM vs baseline on synthetic data ---------------------------------

SEEDS = range(5)
EPOCHS = 20


def _test_mse(kind, seed):
    series = data.synthetic_series(n_bins=5000, seed=seed)
    ds = data.prepare_dataset(series.volume, 12, (0.8, 0.1, 0.1))
    cfg = train.TrainConfig(model=kind, hidden_sizes=(32, 32), epochs=EPOCHS, seed=seed)
    model = train.build_model(cfg)
    _, history = train.fit(model, ds, cfg)
    return train.evaluate(model, ds, "test").mse, history


@pytest.fixture(scope="module")
def headline():
    start = time.perf_counter()
    runs = {kind: [_test_mse(kind, s) for s in SEEDS] for kind in ("lstm", "baseline")}
    return runs, time.perf_counter() - start


@pytest.mark.slow
def test_lstm_beats_baseline(headline):
    runs, elapsed = headline
    lstm = statistics.median(m for m, _ in runs["lstm"])
    base = statistics.median(m for m, _ in runs["baseline"])
    ratio = lstm / base
    ok = ratio <= 0.8 and elapsed < 600
    report(2, ok, f"median test MSE lstm {lstm:.5f} vs baseline {base:.5f}, "
                  f"ratio {ratio:.3f} (<= 0.8), {elapsed:.0f}s (< 600s)")


@pytest.mark.slow
def test_training_loss_halves(headline):
    runs, _ = headline
    for mse, history in runs["lstm"]:
        assert history[-1].train_loss < 0.5 * history[0].train_loss


# --- 3: early stopping -----------------------------------------------------


def test_early_stopping_global_minimum():
    # falls, bottoms out at epoch 6, then creeps back up
    trajectory = [1.0, 0.7, 0.5, 0.42, 0.4, 0.39, 0.395, 0.41, 0.43, 0.46, 0.5, 0.55]
    series = data.synthetic_series(n_bins=300, seed=0)
    ds = data.prepare_dataset(series.volume, 12, (0.8, 0.1, 0.1))
    cfg = train.TrainConfig(hidden_sizes=(4,), epochs=len(trajectory), patience=4, seed=0)
    model = train.build_model(cfg)
    seen, it = [], iter(trajectory)

    def val_loss(m):
        seen.append(m.state_dict())
        return next(it)

    ckpt, history = train.fit(model, ds, cfg, val_loss)
    best = int(np.argmin(trajectory[:len(history)]))
    exact = all(ckpt.params[k].tobytes() == v.tobytes() for k, v in seen[best].items())
    restored = all(model.state_dict()[k].tobytes() == v.tobytes() for k, v in seen[best].items())
    ok = ckpt.epoch == best + 1 and exact and restored and len(history) == 10
    report(3, ok, f"stopped after {len(history)} epochs, returned epoch {ckpt.epoch} "
                  f"(global minimum {best + 1}), parameters bitwise equal: {exact and restored}")


# --- 4: clipping -----------------------------------------------------------

_clip_worst = {"norm_excess": 0.0, "cos_dev": 0.0, "cases": 0}


@settings(max_examples=300, deadline=None)
@given(st.lists(hnp.arrays(np.float64, hnp.array_shapes(max_dims=2, max_side=6),
                           elements=st.floats(-1e4, 1e4)), min_size=1, max_size=5),
       st.floats(1e-4, 1e4))
def _clip_property(grads, tau):
    params = []
    for k, g in enumerate(grads):
        p = Parameter(np.zeros((1, g.size)), name=f"p{k}")
        p.grad[...] = g.reshape(1, -1)
        params.append(p)
    before = np.concatenate([p.grad.ravel() for p in params])
    clip_gradients(params, ClipPolicy(tau))
    after = np.concatenate([p.grad.ravel() for p in params])
    _clip_worst["cases"] += 1
    _clip_worst["norm_excess"] = max(_clip_worst["norm_excess"], np.linalg.norm(after) - tau)
    nb = np.linalg.norm(before)
    if nb > 0:
        cos = float(before @ after) / (nb * np.linalg.norm(after))
        _clip_worst["cos_dev"] = max(_clip_worst["cos_dev"], abs(cos - 1.0))
    assert np.linalg.norm(after) <= tau * (1 + 1e-12)
    assert nb == 0 or abs(cos - 1.0) <= 1e-12


def test_clipping_properties():
    try:
        _clip_property()
        ok, why = True, ""
    except AssertionError as exc:
        ok, why = False, f"; counterexample: {str(exc).splitlines()[0][:120]}"
    w = _clip_worst
    report(4, ok, f"{w['cases']} random gradient sets, max norm excess over tau {w['norm_excess']:.1e}, "
                  f"max |cos - 1| {w['cos_dev']:.1e} (<= 1e-12){why}")


# --- 5: metrics ------------------------------------------------------------

_metric_worst = {"rmse_dev": 0.0, "cases": 0}

# squares of |r| < 1e-150 underflow, so keep residuals where mse is representable
residual = st.one_of(st.just(0.0), st.floats(1e-150, 1e3), st.floats(-1e3, -1e-150))


@settings(max_examples=300, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 100), elements=residual))
def _metric_property(residuals):
    m = train.compute_metrics(residuals, np.zeros_like(residuals))
    _metric_worst["cases"] += 1
    _metric_worst["rmse_dev"] = max(_metric_worst["rmse_dev"], abs(m.rmse - math.sqrt(m.mse)))
    assert abs(m.rmse - math.sqrt(m.mse)) <= 1e-12 * max(1.0, m.rmse)
    assert m.mae <= m.rmse * (1 + 1e-12)


def test_metric_identities():
    try:
        _metric_property()
        ok, why = True, ""
    except AssertionError as exc:
        ok, why = False, f"; counterexample: {str(exc).splitlines()[0][:120]}"
    # reference pair: MSE 0.0502 must round to RMSE 0.2241
    fixture_rmse = math.sqrt(0.0502)
    fixture_ok = round(fixture_rmse, 4) == 0.2241
    # a residual set with exactly that MSE reproduces the same RMSE
    m = train.compute_metrics(np.full(4, fixture_rmse), np.zeros(4))
    fixture_ok &= abs(m.mse - 0.0502) < 1e-12 and round(m.rmse, 4) == 0.2241
    report(5, ok and fixture_ok, f"{_metric_worst['cases']} residual sets, max |rmse - sqrt(mse)| "
                                 f"{_metric_worst['rmse_dev']:.1e}; sqrt(0.0502) = {fixture_rmse:.5f} -> 0.2241{why}")


# --- 6: vanishing / exploding ----------------------------------------------


def test_gradient_norm_profiles():
    start = time.perf_counter()
    ratio = {}
    for cell, scale in (("rnn", 0.5), ("rnn", 1.5), ("lstm", 0.5), ("lstm", 1.0), ("lstm", 1.5)):
        norms = nn.rnn_gradient_norm_profile(cell, scale, 30, forget_bias=3.0)
        ratio[cell, scale] = norms[-1] / norms[0]
    elapsed = time.perf_counter() - start
    lstm_ok = all(1e-3 <= r <= 1e3 for (c, _), r in ratio.items() if c == "lstm")
    ok = ratio["rnn", 0.5] < 1e-3 and ratio["rnn", 1.5] > 1e3 and lstm_ok and elapsed < 10
    lstm_txt = ", ".join(f"{s}: {r:.2g}" for (c, s), r in ratio.items() if c == "lstm")
    report(6, ok, f"T=30 ratio rnn@0.5 {ratio['rnn', 0.5]:.1e} (< 1e-3), rnn@1.5 {ratio['rnn', 1.5]:.1e} "
                  f"(> 1e3), lstm forget bias 3 [{lstm_txt}] within [1e-3, 1e3], {elapsed:.2f}s")


# --- 7: pipeline -----------------------------------------------------------


def test_pipeline_exactness():
    series = np.array([5.0, 9, 14, 20, 31, 44, 52, 60, 58, 49, 40, 33, 27, 21, 18])
    ds = data.build_windows(series)
    windows_ok = len(ds) == 3 and ds.labels.tolist() == series[12:15].tolist()
    windows_ok &= all(ds.windows[k, :, 0].tolist() == series[k:k + 12].tolist() for k in range(3))

    rng = np.random.default_rng(0)
    worst = 0.0
    for scheme in ("zscore", "minmax"):
        for scope in ("train_only", "whole_dataset"):
            values = data.synthetic_series(n_bins=500, seed=int(rng.integers(1 << 30))).volume
            out, stats = data.normalize(data.split(data.build_windows(values), (0.8, 0.1, 0.1)), scheme, scope)
            back = data.denormalize(out.series, stats)
            worst = max(worst, float(np.max(np.abs(back - values) / np.maximum(np.abs(values), 1.0))))
    ok = windows_ok and worst <= 1e-12
    report(7, ok, f"length 15 -> {len(ds)} windows, labels {ds.labels.tolist()}; "
                  f"normalization round trip max rel err {worst:.1e} (<= 1e-12)")


# --- 8: determinism --------------------------------------------------------


def test_end_to_end_determinism(tmp_path, capsys):
    data.write_series_csv(data.synthetic_series(n_bins=600, seed=2), tmp_path / "series.csv")
    for run in ("a", "b"):
        code = cli.main(["train", "--series", str(tmp_path / "series.csv"), "--out", str(tmp_path / run),
                         "--seed", "7", "--epochs", "3", "--set", "hidden_sizes=8,8",
                         "--set", "shuffle=true", "--set", "dropout_p=0.2"])
        assert code == 0
    capsys.readouterr()
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("history.csv", "checkpoint.tfck")}
    report(8, all(same.values()), "two train runs, seed 7: " +
           ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))
