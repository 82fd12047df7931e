import csv

import numpy as np
import pytest

from m2fmoe.data import make_windows, prepare_splits, zscore_fit
from m2fmoe.errors import ConfigError, IngestionError, NumericError
from m2fmoe.model import M2FMoE, tiny_config
from m2fmoe.tensor import Tensor
from m2fmoe.training import (AdamState, LinearBaseline, TrainConfig, adam_step, build_variant,
                             clip_global_norm, evaluate, load_model, mape, metrics, persistence_forecast,
                             read_checkpoint, rmse, routing_rows, save_model, train, write_checkpoint,
                             write_history, write_routing)


def test_adam_first_step_closed_form():
    p = {"w": Tensor(np.array([0.5, -1.0]))}
    state = adam_step(p, {"w": np.array([1.0, -3.0])}, AdamState(), 0.001)
    assert np.allclose(p["w"].data, [0.5 - 0.001, -1.0 + 0.001], atol=1e-10)
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([2.0]))}
    state = adam_step(p, {"w": np.zeros(1)}, AdamState(), 0.01)
    assert p["w"].data.tolist() == [2.0] and state.t == 1


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": Tensor(np.array([0.0]))}
    state = AdamState()
    values = []
    for _ in range(20):
        adam_step(p, {"w": np.array([0.7])}, state, 0.01)
        values.append(p["w"].data[0])
    assert np.all(np.diff(values) < 0)


def test_adam_rejects_nonfinite_with_name():
    p = {"layer.w": Tensor(np.zeros(2))}
    with pytest.raises(NumericError, match="layer.w"):
        adam_step(p, {"layer.w": np.array([np.nan, 0])}, AdamState(), 0.01)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


def test_metric_examples():
    x = np.array([1.0, 2.0])
    assert metrics(x, x) == {"rmse": 0.0, "mape": 0.0}
    assert mape([3.0], [1.0]) == 1.0
    assert rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(np.sqrt(12.5))


def test_persistence_and_linear_baseline():
    x = np.arange(24.0).reshape(2, 4, 3)
    p = persistence_forecast(x, 5)
    assert p.shape == (2, 5, 3) and np.all(p == x[:, -1:, :])
    rng = np.random.default_rng(0)
    inputs = rng.normal(size=(200, 6, 1))
    w = rng.normal(size=(6, 2))
    targets = (inputs[:, :, 0] @ w + 0.5)[..., None]
    lin = LinearBaseline.fit(inputs, targets)
    assert np.allclose(lin.predict(inputs), targets, atol=1e-10)


def _trend_sets(cfg, n=400, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    v = noise * rng.normal(size=n) if noise else 0.05 * t
    norm = zscore_fit(v[:, None])
    z = norm.apply(v[:, None])
    d = make_windows(z, cfg.t_in, cfg.t_pred, stride=2, norm=norm)
    idx = rng.permutation(len(d))
    return d.subset(np.sort(idx[20:])), d.subset(np.sort(idx[:20]))


def test_training_reduces_loss_on_trend():
    cfg = tiny_config()
    tr, va = _trend_sets(cfg)
    result = train(M2FMoE(cfg, seed=0), tr, va, TrainConfig(max_epochs=20, patience=20, batch_size=48,
                                                            lr=0.003))
    first, last = result.history[0][1], result.history[-1][1]
    assert last < 0.5 * first


def test_patience_stops_on_noise():
    cfg = tiny_config()
    tr, va = _trend_sets(cfg, noise=1.0, seed=1)
    result = train(M2FMoE(cfg, seed=0), tr, va, TrainConfig(max_epochs=60, patience=3, lr=0.01))
    assert len(result.history) < 60
    assert result.best_val == min(h[2] for h in result.history)


def test_training_is_bit_reproducible():
    cfg = tiny_config(dropout=0.1)
    tr, va = _trend_sets(cfg)
    runs = []
    for _ in range(2):
        model = M2FMoE(cfg, seed=4)
        res = train(model, tr, va, TrainConfig(max_epochs=3, seed=9))
        runs.append((res.history, model.predict(va.inputs)))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_train_restores_best_epoch():
    cfg = tiny_config()
    tr, va = _trend_sets(cfg)
    model = M2FMoE(cfg, seed=2)
    res = train(model, tr, va, TrainConfig(max_epochs=6, patience=6, lr=0.003))
    from m2fmoe.training import compute_features, validation_loss
    val = validation_loss(model, compute_features(model, va.inputs), va.targets)
    assert val == pytest.approx(res.best_val, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    cfg = tiny_config()
    tr, va = _trend_sets(cfg)
    with pytest.raises(ConfigError):
        train(M2FMoE(cfg), tr, va.subset(np.arange(0)))


def test_evaluate_denormalizes():
    cfg = tiny_config()
    tr, va = _trend_sets(cfg)
    model = M2FMoE(cfg)
    m = evaluate(model, va)
    pred = va.norm.invert(model.predict(va.inputs))
    assert m["rmse"] == pytest.approx(rmse(pred, va.norm.invert(va.targets)))


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(3.5), "e": np.zeros((0,))}
    write_checkpoint(tmp_path / "c.bin", arrays)
    back = read_checkpoint(tmp_path / "c.bin")
    assert list(back) == ["a", "s", "e"]
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == arrays[k].shape
    (tmp_path / "bad.bin").write_bytes(b"XXXX")
    with pytest.raises(IngestionError):
        read_checkpoint(tmp_path / "bad.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(IngestionError):
        read_checkpoint(tmp_path / "t.bin")


def test_model_save_load(tmp_path):
    cfg = build_variant("w/o-Alignment", tiny_config())
    model = M2FMoE(cfg, seed=3)
    norm = zscore_fit(np.arange(10.0)[:, None])
    save_model(tmp_path / "m.ckpt", model, norm)
    back, bnorm = load_model(tmp_path / "m.ckpt")
    assert back.config == cfg
    assert np.array_equal(bnorm.mean, norm.mean)
    x = np.random.default_rng(0).normal(size=(2, cfg.t_in, 1))
    assert np.array_equal(back.predict(x), model.predict(x))
    with pytest.raises(ConfigError):
        load_model(tmp_path / "missing.ckpt")


def test_unknown_variant():
    with pytest.raises(ConfigError, match="valid"):
        build_variant("w/o-Everything")


def test_history_and_routing_files(tmp_path):
    write_history(tmp_path / "h.csv", [(1, 0.5, 0.25)])
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows == [["epoch", "train_loss", "val_loss"], ["1", "0.5", "0.25"]]
    cfg = tiny_config()
    _, va = _trend_sets(cfg)
    r = routing_rows(M2FMoE(cfg), va.subset(np.arange(3)))
    assert len(r) == 3 * 2 * cfg.experts
    by_window = {}
    for i, view, e, w in r:
        by_window.setdefault((i, view), []).append(w)
    assert all(abs(sum(ws) - 1) < 1e-9 for ws in by_window.values())
    write_routing(tmp_path / "r.csv", r)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "window_index,view,expert_index,weight"


def test_prepare_splits_feeds_training():
    cfg = tiny_config()
    v = np.sin(np.arange(600) / 4.0) + 0.1 * np.random.default_rng(0).normal(size=600)
    sp = prepare_splits(v, cfg.t_in, cfg.t_pred, val_count=20, stride=3)
    res = train(M2FMoE(cfg), sp.train, sp.val, TrainConfig(max_epochs=2))
    assert all(np.isfinite(h[1]) and np.isfinite(h[2]) for h in res.history)
