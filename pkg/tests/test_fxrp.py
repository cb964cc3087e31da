from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fxarb.fx_graph import Market, prediction_edge_set
from fxarb.fxrp import (
    CoverageError,
    FitSchedule,
    HyperGrid,
    PredictionStore,
    ScheduleError,
    Split,
    SplitSpec,
    TrainConfig,
    baseline_random_walk,
    build_schedule,
    make_splits,
    predict,
    predict_rows,
    prediction_mse,
    stitch_predictions,
    train_fxrp,
)
from fxarb.market_data import FxPanel, SyntheticConfig, TradingCalendar, clean_panels, generate_synthetic
from fxarb.neural import checkpoint, init_gnn

QUICK = TrainConfig(lr=3e-3, max_epochs=8, patience=3)


def test_schedule_quarterly_from_year():
    cal = TradingCalendar.weekdays(date(2014, 1, 1), end=date(2016, 6, 30))
    s = build_schedule(cal, 2015, n_fit=4, n_sy=2)
    assert cal.dates[s.t(1)] == date(2015, 1, 1)
    assert cal.dates[s.t(2)] == date(2015, 4, 1)
    assert cal.dates[s.t(3)] == date(2015, 7, 1)
    assert s.t(5) == len(cal)


def test_schedule_forty_quarters():
    cal = TradingCalendar.weekdays(date(2010, 1, 1), end=date(2024, 12, 31))
    s = build_schedule(cal, 2015, n_fit=40, n_sy=5)
    last = cal.dates[s.t(40)]
    assert (last.year, (last.month - 1) // 3 + 1) == (2024, 4)
    assert cal.dates[s.t(2)] == date(2015, 4, 1)


def test_schedule_first_weekday_after_weekend_start():
    cal = TradingCalendar.weekdays(date(2019, 1, 1), end=date(2021, 1, 1))
    s = build_schedule(cal, date(2020, 2, 1), n_fit=2, n_sy=1, refit_freq="monthly")
    assert cal.dates[s.t(1)] == date(2020, 2, 3)
    assert cal.dates[s.t(2)] == date(2020, 3, 2)


def test_test_periods_partition_the_test_era():
    cal = TradingCalendar.weekdays(date(2014, 1, 1), end=date(2017, 1, 1))
    s = build_schedule(cal, 2015, n_fit=6, n_sy=2)
    covered = np.concatenate([np.arange(*s.test_period(k)) for k in range(1, 7)])
    np.testing.assert_array_equal(covered, np.arange(s.t1, len(cal)))
    assert all(s.refit_of(int(r)) == k for k in range(1, 7) for r in range(*s.test_period(k)))


def test_schedule_errors():
    cal = TradingCalendar.weekdays(date(2014, 1, 1), end=date(2015, 6, 30))
    with pytest.raises(ScheduleError, match="horizon"):
        build_schedule(cal, 2015, n_fit=4, n_sy=2)
    with pytest.raises(ScheduleError):
        build_schedule(cal, 2015, n_fit=2, n_sy=2)
    with pytest.raises(ScheduleError):
        build_schedule(cal, 2015, n_fit=2, n_sy=1, refit_freq="weekly")
    with pytest.raises(ScheduleError):
        FitSchedule((10, 5), 1, 20)
    with pytest.raises(ScheduleError):
        FitSchedule((5, 10), 1, 20, t_exec=1.0)


def test_covering_blocks_of_five():
    s = FitSchedule(tuple(5000 + 100 * k for k in range(8)), 5, 6000)
    sp = make_splits(s, "P")
    for k in range(1, 6):
        assert (sp[k].val_lo, sp[k].val_hi) == (1000 * (k - 1), 1000 * k)
    union = set()
    for k in range(1, 6):
        union |= set(sp[k].val_rows().tolist())
    assert union == set(range(5000))
    assert all(sp.k_star(r) == r // 1000 + 1 for r in range(0, 5000, 137))


@settings(max_examples=60, deadline=None)
@given(t1=st.integers(20, 400), gaps=st.lists(st.integers(1, 50), min_size=2, max_size=6),
       n_sy=st.integers(1, 5), frac=st.floats(0.05, 0.95), stage=st.sampled_from(["P", "S"]))
def test_splits_partition_each_refit_prefix(t1, gaps, n_sy, frac, stage):
    rows = tuple(np.cumsum([t1] + gaps).tolist())
    n_sy = min(n_sy, len(rows) - 1)
    s = FitSchedule(rows, n_sy, rows[-1] + 10)
    sp = make_splits(s, stage, frac)
    for k in range(1, s.n_fit + 1):
        tr, va = set(sp[k].train_rows().tolist()), set(sp[k].val_rows().tolist())
        assert not tr & va
        assert tr | va == set(range(0, s.t(k)))
        assert va
    if stage == "P":
        union = set().union(*(set(sp[k].val_rows().tolist()) for k in range(1, n_sy + 1)))
        assert union == set(range(0, s.t1))


def test_k_star_is_minimum():
    spec = SplitSpec("P", {1: Split(1, "P", 0, 10, 0, 3), 2: Split(2, "P", 0, 20, 3, 8), 3: Split(3, "P", 0, 30, 5, 9)})
    assert spec.k_star(6) == 2
    assert spec.k_star(8) == 3
    assert spec.k_star(9) == 0


def test_grid_order_and_validation():
    g = HyperGrid(((1000, 2), (300, 3), (1000, 1)))
    assert g.ordered() == [(300, 3), (1000, 1), (1000, 2)]
    assert g.n_hyper == 3
    with pytest.raises(ValueError):
        HyperGrid(())


def constant_market(T=160, n=3):
    fx, ir, _ = generate_synthetic(SyntheticConfig(n_currencies=n, n_days=T, fx_vol=0.0, sigma_alpha=0.0, seed=0))
    return Market(fx, ir)


def noisy_market(T=160, n=3, seed=0, **kw):
    fx, ir, _ = generate_synthetic(SyntheticConfig(n_currencies=n, n_days=T, seed=seed, **kw))
    fx, ir, _ = clean_panels(fx, ir)
    return Market(fx, ir)


def quick_schedule(m, t1=90, n_fit=3, step=20, n_sy=2):
    return FitSchedule(tuple(t1 + step * k for k in range(n_fit)), n_sy, m.T)


def test_constant_panel_trains_to_zero_mse():
    m = constant_market()
    s = quick_schedule(m)
    fit = train_fxrp(m, make_splits(s, "P")[3], HyperGrid(((200, 1),)), 0, QUICK)
    assert fit.best.val_mse < 1e-6


def test_grid_selection_tie_breaks_to_smaller_model():
    m = constant_market()
    s = quick_schedule(m)
    fit = train_fxrp(m, make_splits(s, "P")[3], HyperGrid(((400, 2), (200, 2), (400, 1))), 0, QUICK)
    assert [g.val_mse for g in fit.table] == [0.0, 0.0, 0.0]
    assert (fit.best.budget, fit.best.layers) == (200, 2)
    assert fit.params is fit.best.params


def test_grid_selection_picks_lower_validation_mse():
    m = noisy_market(sigma_alpha=0.005, signal_strength=0.3)
    s = quick_schedule(m)
    fit = train_fxrp(m, make_splits(s, "P")[3], HyperGrid(((200, 1), (600, 2))), 1, QUICK)
    assert fit.best.val_mse == min(g.val_mse for g in fit.table)


def test_training_is_deterministic():
    m = noisy_market()
    s = quick_schedule(m)
    split = make_splits(s, "P")[3]
    a = train_fxrp(m, split, HyperGrid(((200, 1),)), 7, QUICK)
    b = train_fxrp(m, split, HyperGrid(((200, 1),)), 7, QUICK)
    assert checkpoint.to_bytes(a.params) == checkpoint.to_bytes(b.params)


def test_no_training_dates_is_an_error():
    m = noisy_market()
    s = FitSchedule((90, 110, 130), 1, m.T)
    with pytest.raises(ValueError, match="no usable training dates"):
        train_fxrp(m, make_splits(s, "P")[1], HyperGrid(((200, 1),)), 0, QUICK)


def zero_model(m):
    R = len(m.windows)
    return init_gnn(2 * R, R, 3, 1, "edge_output", zero_head=True)


def test_zero_model_is_random_walk():
    m = noisy_market(missing_prob=0.05)
    p = zero_model(m)
    for t in (40, 77, 120):
        x = predict(m, t, p)
        rw = baseline_random_walk(m, t)
        np.testing.assert_array_equal(np.isnan(x), np.isnan(rw))
        np.testing.assert_array_equal(x[~np.isnan(x)], rw[~np.isnan(rw)])
        assert (~np.isnan(x)).sum() == m.feature_graph(t).pred_mask.sum()


def test_predictions_positive_for_large_outputs():
    m = noisy_market()
    p = zero_model(m)
    p.head.bias[:] = 50.0
    x = predict_rows(m, [50, 51], p)
    assert np.all(x[~np.isnan(x)] > 0)


def test_prediction_count_equals_edge_set():
    m = noisy_market(n=4)
    x = predict(m, 60, zero_model(m))
    assert (~np.isnan(x)).sum() == prediction_edge_set(m.view(60), 60).sum() == 12


def test_random_walk_omits_missing_prior_rate():
    m = noisy_market()
    x = m.fx.rates.copy()
    x[59, 0, 1] = np.nan
    m2 = Market(FxPanel(m.fx.calendar, m.fx.currencies, x), m.ir)
    rw = baseline_random_walk(m2, 60)
    assert np.isnan(rw[0, 1])
    assert rw[1, 2] == m.fx.rates[59, 1, 2]


def test_stitch_provenance_rules():
    m = noisy_market()
    s = quick_schedule(m)
    sp = make_splits(s, "P")
    fits = {k: train_fxrp(m, sp[k], HyperGrid(((200, 1),)), 0, TrainConfig(max_epochs=2)) for k in (1, 2, 3)}
    store = stitch_predictions(m, s, sp, fits)
    for r in range(m.first_usable, s.t1):
        k = store.provenance[r]
        assert k == sp.k_star(r) and not sp[k].in_train(r)
    for k in (1, 2, 3):
        lo, hi = s.test_period(k)
        assert np.all(store.provenance[lo:hi] == k)
    assert np.all(store.provenance[: m.first_usable] == 0)
    r = s.t1 + 3
    np.testing.assert_array_equal(store.xhat[r], predict(m, r, fits[1].params))
    lines = store.lines()
    assert lines[0].split(",")[0] == str(m.first_usable + 1) and lines[0].split(",")[1] in m.currencies


def test_stitch_needs_every_refit_and_covering():
    m = noisy_market()
    s = quick_schedule(m)
    sp = make_splits(s, "P")
    with pytest.raises(ValueError, match="untrained"):
        stitch_predictions(m, s, sp, {})
    gap = SplitSpec("P", {k: Split(k, "P", 0, s.t(k), s.t(k) - 5, s.t(k)) for k in (1, 2, 3)})
    fits = {k: type("F", (), {"params": zero_model(m)})() for k in (1, 2, 3)}
    with pytest.raises(CoverageError):
        stitch_predictions(m, s, gap, fits)


def test_arbitrage_free_no_signal_matches_random_walk():
    fx, ir, _ = generate_synthetic(SyntheticConfig(n_currencies=3, n_days=160, fx_vol=0.0, sigma_alpha=0.0,
                                                   signal_strength=0.0, ir_vol=0.001, seed=3))
    m = Market(fx, ir)
    s = quick_schedule(m)
    sp = make_splits(s, "P")
    fit = train_fxrp(m, sp[3], HyperGrid(((200, 1),)), 0, QUICK)
    rows = np.arange(*s.test_period(3))[:-1]
    trained = prediction_mse(predict_rows(m, rows, fit.params), m, rows)
    rw = prediction_mse(np.array([baseline_random_walk(m, int(r)) for r in rows]), m, rows)
    assert trained <= rw + 1e-8


def test_prediction_store_write(tmp_path):
    xhat = np.full((3, 2, 2), np.nan)
    xhat[1, 0, 1] = 1.5
    store = PredictionStore(("USD", "EUR"), xhat, np.array([0, 2, 0]))
    store.write(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text() == "t,i,j,xhat,provenance_k\n2,USD,EUR,1.5,2\n"
