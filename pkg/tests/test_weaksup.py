import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropdisagg import diffcore as dc
from cropdisagg import weaksup as ws
from cropdisagg.errors import (
    DegenerateWeightsError,
    EmptyBatchListError,
    EmptyGridError,
    NonPositiveMeanError,
    ShapeMismatchError,
)
from cropdisagg.pipeline import RunConfig, prepare
from cropdisagg.synth import SynthConfig, generate_world

from conftest import full_model_loss, make_toy_batches


def pred(areas, yields):
    areas = np.asarray(areas, dtype=float)
    return ws.ChildPrediction(np.asarray(yields, dtype=float), np.full(areas.shape, 0.5), areas)


# ---------------------------------------------------------------- prediction


def test_area_is_fraction_times_land():
    b = make_toy_batches(n_parents=1, n_children=3, T=6, S=4)[0]
    b.land_area = np.array([1000.0, 400.0, 10.0])
    m = ws.WsModel("lstm", channels=11, static_len=4, T=6, variant="trend")
    m.head["head.weight"].data[:] = 0.0
    m.head["head.bias"].data = np.array([1.0, math.log(0.25 / 0.75)])
    p = m.predict_children(b)
    np.testing.assert_allclose(p.fraction_hat, 0.25, rtol=1e-15)
    np.testing.assert_allclose(p.area_hat, [250.0, 100.0, 2.5], rtol=1e-15)
    assert len(p.yield_hat) == 3


@pytest.mark.parametrize("kind", ["lstm", "cnn"])
def test_predict_repeatable(kind):
    b = make_toy_batches(n_parents=1, n_children=4, T=8, S=6)[0]
    m = ws.WsModel(kind, channels=11, static_len=6, T=8)
    a, c = m.predict_children(b), m.predict_children(b)
    assert np.array_equal(a.yield_hat, c.yield_hat) and np.array_equal(a.area_hat, c.area_hat)


def test_predict_shape_mismatch():
    b = make_toy_batches(n_parents=1, S=5)[0]
    with pytest.raises(ShapeMismatchError):
        ws.WsModel("lstm", static_len=6, T=8).predict_children(b)
    b.trend = None
    with pytest.raises(ShapeMismatchError):
        ws.WsModel("lstm", static_len=5, T=8, variant="trend").predict_children(b)


# ---------------------------------------------------------------- aggregation


def test_aggregate_hand_example():
    y, a, w = ws.aggregate(pred([50, 75], [4.0, 6.0]))
    np.testing.assert_allclose(w, [0.4, 0.6], rtol=1e-15)
    assert y == pytest.approx(5.2, abs=1e-12)
    assert a == 125.0


def test_aggregate_single_and_equal():
    assert ws.aggregate(pred([3.0], [7.5]))[:2] == (7.5, 3.0)
    y, _, _ = ws.aggregate(pred([1.0, 2.0, 1e4], [4.25, 4.25, 4.25]))
    assert y == pytest.approx(4.25, rel=1e-15)


def test_aggregate_degenerate():
    with pytest.raises(DegenerateWeightsError):
        ws.aggregate(pred([], []))
    with pytest.raises(DegenerateWeightsError):
        ws.aggregate(pred([0.0, 0.0], [1.0, 2.0]))


@settings(max_examples=200, deadline=None)
@given(
    areas=st.lists(st.floats(1e-3, 1e5), min_size=1, max_size=12),
    seed=st.integers(0, 2**31),
    scale=st.floats(1e-3, 1e3),
)
def test_aggregation_properties(areas, seed, scale):
    rng = np.random.default_rng(seed)
    yields = rng.uniform(0, 12, size=len(areas))
    y, a, w = ws.aggregate(pred(areas, yields))
    assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w > 0)
    assert yields.min() - 1e-12 <= y <= yields.max() + 1e-12
    y2, a2, w2 = ws.aggregate(pred(np.asarray(areas) * scale, yields))
    assert abs(y2 - y) <= 1e-12 * max(1.0, abs(y))
    assert a2 == pytest.approx(a * scale, rel=1e-12)


def test_tensor_aggregation_matches_scalar():
    rng = np.random.default_rng(0)
    yh, ah = rng.uniform(1, 9, 5), rng.uniform(1, 50, 5)
    M = np.array([[1, 1, 0, 0, 0], [0, 0, 1, 1, 1]], dtype=float)
    py, pa = ws.aggregate_tensors(dc.Tensor(yh), dc.Tensor(ah), M)
    for p, sl in enumerate((slice(0, 2), slice(2, 5))):
        y, a, _ = ws.aggregate(ws.ChildPrediction(yh[sl], ah[sl], ah[sl]))
        assert py.data[p] == pytest.approx(y, rel=1e-14) and pa.data[p] == pytest.approx(a, rel=1e-14)


def test_land_scale_leaves_parent_yield_unchanged():
    m = ws.WsModel("lstm", channels=11, static_len=6, T=8, seed=4)
    for scale in (1e-3, 7.0, 1e4):
        a = make_toy_batches(seed=3)
        b = make_toy_batches(seed=3, land_scale=scale)
        ya, aa = ws.parent_predictions(m, a)
        yb, ab = ws.parent_predictions(m, b)
        np.testing.assert_allclose(yb, ya, rtol=1e-12, atol=0)
        np.testing.assert_allclose(ab, aa * scale, rtol=1e-12)


# ---------------------------------------------------------------- loss


def t(x):
    return dc.Tensor(np.asarray(x, dtype=float))


def test_loss_examples():
    assert ws.combined_loss(t([5.0, 6.0]), t([10.0, 20.0]), [5.0, 6.0], [10.0, 20.0], (5.0, 15.0)).item() == 0.0
    assert ws.combined_loss(t([6.0]), t([10.0]), [5.0], [10.0], (5.0, 9.0)).item() == pytest.approx(0.2, abs=1e-15)
    one = ws.combined_loss(t([6.0]), t([13.0]), [5.0], [10.0], (5.0, 9.0)).item()
    two = ws.combined_loss(t([6.0]), t([13.0]), [5.0], [10.0], (5.0, 18.0)).item()
    assert one - 0.2 == pytest.approx(2 * (two - 0.2), rel=1e-12)
    with pytest.raises(NonPositiveMeanError):
        ws.combined_loss(t([1.0]), t([1.0]), [1.0], [1.0], (0.0, 1.0))


def test_yield_bias_descent():
    """With the encoder frozen, gradient steps on the yield bias reduce the yield loss monotonically."""
    batches = make_toy_batches(n_parents=3, seed=2)
    m = ws.WsModel("lstm", channels=11, static_len=6, T=8, seed=2)
    st_ = ws.stack(batches, True)
    bias = m.head["head.bias"]
    losses = []
    for _ in range(25):
        with dc.Tape() as tape:
            _, _, _, py, _ = m.forward_units(st_)
            loss = dc.mse(py, st_.label_yield)
        g = tape.backward(loss, {"b": bias})["b"]
        losses.append(loss.item())
        bias.data = bias.data - 0.05 * np.array([g[0], 0.0])
    assert all(b < a for a, b in zip(losses, losses[1:]))


# ---------------------------------------------------------------- early stopping and training


def scripted_train(sequence, max_epochs=10):
    batches = make_toy_batches(n_parents=2, T=6)
    m = ws.WsModel("lstm", channels=11, static_len=6, T=6)
    snapshots = {}

    def val(model, epoch):
        snapshots[epoch] = model.state_arrays()
        return sequence[epoch - 1]

    res = ws.train(m, batches, None, ws.TrainConfig(lr=1e-2, max_epochs=max_epochs), validation_fn=val)
    return m, res, snapshots


def test_early_stopping_rule():
    m, res, snaps = scripted_train([5, 4, 4.1, 4.2, 3.0, 2.0])
    assert res.stopped_epoch == 4 and res.best_epoch == 2
    assert [r[2] for r in res.log[1:]] == [5, 4, 4.1, 4.2]
    final = m.state_arrays()
    assert all(np.array_equal(final[k], snaps[2][k]) for k in final)
    assert not np.array_equal(final["head.bias"], snaps[4]["head.bias"])
    assert res.best_val_loss == min(r[2] for r in res.log[1:])


def test_early_stopping_single_rise_does_not_stop():
    _, res, _ = scripted_train([5, 4, 4.5, 3, 3.5, 3.6, 1], max_epochs=7)
    assert res.stopped_epoch == 6 and res.best_epoch == 4


def test_monotone_validation_runs_to_max():
    _, res, _ = scripted_train([5, 4, 3, 2, 1], max_epochs=5)
    assert res.stopped_epoch == 5 and res.best_epoch == 5


def test_stopper_standalone():
    s = ws.EarlyStopping()
    flags = [s.update(v, lambda v=v: v) for v in [5, 4, 4.1, 4.2]]
    assert flags == [False, False, False, True]
    assert s.best_epoch == 2 and s.best_state == 4


def test_train_without_validation_runs_all_epochs():
    m = ws.WsModel("lstm", channels=11, static_len=6, T=6)
    res = ws.train(m, make_toy_batches(T=6), None, ws.TrainConfig(max_epochs=3))
    assert res.stopped_epoch == 3 and res.best_epoch == 3 and len(res.log) == 4
    assert m.hyper["epochs"] == 3


def test_train_errors():
    m = ws.WsModel("lstm", channels=11, static_len=6, T=6)
    with pytest.raises(EmptyBatchListError):
        ws.train(m, [], None, ws.TrainConfig())
    with pytest.raises(EmptyBatchListError):
        ws.train(m, make_toy_batches(T=6), [], ws.TrainConfig())


def test_training_is_seeded():
    def run():
        m = ws.WsModel("cnn", channels=11, static_len=6, T=8, seed=1)
        ws.train(m, make_toy_batches(n_parents=4), None, ws.TrainConfig(max_epochs=2, units_per_step=2, seed=5))
        return m.state_arrays()

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


@pytest.fixture(scope="module")
def small_prep(small_world):
    return prepare(small_world.dataset, small_world.hierarchy, RunConfig(seed=0))


def test_descent_on_synthetic_world(small_prep):
    m = ws.WsModel("lstm", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff, "trend", seed=0)
    res = ws.train(m, small_prep.train, None, ws.TrainConfig(lr=3e-3, max_epochs=8, units_per_step=4))
    assert res.log[-1][1] < res.log[0][1]


# ---------------------------------------------------------------- tuning


def test_tune_one_point(small_prep):
    make = functools.partial(ws.WsModel, "lstm", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff)
    res = ws.tune(make, small_prep.folds[3:], [(1e-3, 0.0)], ws.TrainConfig(max_epochs=2))
    assert res.best == (1e-3, 0.0)
    assert len(res.table) == 1 and len(res.best_epochs) == 2


def test_tune_tie_break(monkeypatch):
    monkeypatch.setattr(ws, "_fit_fold", lambda payload: (1.5, 3))
    folds = [([None], [None])] * 5
    grid = [(3e-3, 0.0), (1e-4, 0.0), (1e-4, 1e-3), (1e-3, 1e-3)]
    res = ws.tune(lambda: None, folds, grid)
    assert res.best == (1e-4, 1e-3)
    assert len(res.table) == 4 and res.table[0]["mean_nrmse"] == 1.5
    assert [k for k in res.table[0] if k.startswith("fold")] == [f"fold{k}" for k in range(1, 6)]


def test_tune_empty_grid():
    with pytest.raises(EmptyGridError):
        ws.tune(lambda: None, [], [])


def test_tune_parallel_matches_serial(small_prep):
    make = functools.partial(ws.WsModel, "lstm", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff)
    grid = [(1e-3, 0.0), (3e-3, 1e-4)]
    folds = small_prep.folds[3:]
    serial = ws.tune(make, folds, grid, ws.TrainConfig(max_epochs=2))
    parallel = ws.tune(make, folds, grid, ws.TrainConfig(max_epochs=2), workers=2)
    assert serial.table == parallel.table and serial.best == parallel.best


# ---------------------------------------------------------------- forecasting


def test_forecast_counts_on_default_world():
    w = generate_world(SynthConfig())
    prep = prepare(w.dataset, w.hierarchy, RunConfig())
    m = ws.WsModel("lstm", prep.scaled.C, prep.scaled.S, prep.cutoff, "no_trend")
    recs = ws.forecast(m, prep.test)
    assert sum(r.level == "NUTS3" for r in recs) == 360
    assert sum(r.level == "NUTS2" for r in recs) == 60
    assert {(r.model, r.variant) for r in recs} == {("ws_lstm", "no_trend")}


def test_parent_record_recomputable(small_prep):
    m = ws.WsModel("cnn", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff, "trend", seed=3)
    recs = ws.forecast(m, small_prep.test)
    for b in small_prep.test:
        kids = [r for r in recs if r.level == "NUTS3" and r.year == b.year and r.region_id in b.child_ids]
        parent = next(r for r in recs if r.level == "NUTS2" and r.year == b.year and r.region_id == b.parent_id)
        y, a, _ = ws.aggregate(ws.ChildPrediction(
            np.array([r.yield_hat for r in kids]), None, np.array([r.area_hat for r in kids])))
        assert parent.yield_hat == pytest.approx(y, rel=1e-12)
        assert parent.area_hat == pytest.approx(a, rel=1e-12)


def test_no_trend_ignores_trend_features(small_prep):
    m = ws.WsModel("lstm", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff, "no_trend")
    a = ws.forecast(m, small_prep.test[:2])
    for b in small_prep.test[:2]:
        b_copy = type(b)(**{**b.__dict__, "trend": None})
        assert ws.forecast(m, [b_copy])[0] == ws.forecast(m, [b])[0]
    assert len(a) == sum(b.n_children + 1 for b in small_prep.test[:2])


def test_checkpoint_round_trip(tmp_path, small_prep):
    m = ws.WsModel("cnn", small_prep.scaled.C, small_prep.scaled.S, small_prep.cutoff, "trend", seed=2)
    ws.train(m, small_prep.train[:6], None, ws.TrainConfig(max_epochs=1))
    m.scaler = small_prep.scaled.scaler
    m.save(tmp_path / "m.json", extra={"note": "x"})
    back = ws.WsModel.load(tmp_path / "m.json")
    assert back.checkpoint_header["note"] == "x"
    assert ws.forecast(back, small_prep.test) == ws.forecast(m, small_prep.test)
    assert back.train_means == m.train_means


# ---------------------------------------------------------------- gradients through the full model


@pytest.mark.slow
@pytest.mark.parametrize("kind,variant,eps", [
    ("cnn", "trend", 1e-5), ("cnn", "no_trend", 1e-5), ("lstm", "trend", 1e-4),
])
def test_full_model_grad_check_every_coordinate(kind, variant, eps):
    fn, params = full_model_loss(kind, variant)
    assert dc.grad_check(fn, params, epsilon=eps) < 1e-4
