import hashlib
import json
import math
from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planted_future, run_small
from fxarb.backtest import (
    DailyRecord,
    WalkForwardError,
    annual_return,
    annual_vol,
    cumulative,
    evaluate_plan,
    fmt,
    information_ratio,
    mdd,
    rolling,
    run_walk_forward,
    sortino,
    write_atomic,
)
from fxarb.fx_graph import Market
from fxarb.market_data import LeakageError, clean_panels, generate_synthetic
from fxarb.statarb import TradePlan, degenerate_plan

SQ = math.sqrt(252)


# ---------------------------------------------------------------- metrics

def test_constant_gains_leave_ratios_undefined():
    g = [0.01] * 5
    assert information_ratio(g) is None
    assert sortino(g) is None
    assert annual_return(g) == pytest.approx(2.52)
    assert annual_vol(g) == 0.0
    assert mdd(g) == 0.0
    assert fmt(information_ratio(g)) == "undefined"


def test_symmetric_gains():
    g = [1.0, -1.0]
    assert information_ratio(g) == 0.0
    assert sortino(g) == 0.0
    assert mdd(g) == 1.0


def test_ratio_hand_values():
    assert information_ratio([1.0, 2.0, 3.0]) == pytest.approx(2.0 * SQ, rel=1e-14)
    # downside series (0, -1, 0, 0): std 0.5, mean of gains 0.5
    assert sortino([1.0, -1.0, 1.0, 1.0]) == pytest.approx(0.5 / 0.5 * SQ, rel=1e-14)
    assert information_ratio([1.0]) is None


def test_drawdown_hand_paths():
    assert mdd([1.0, 2.0, -1.0, 2.0]) == 1.0
    assert mdd([-1.0, -1.0]) == 2.0  # the path starts at 0
    assert mdd([]) == 0.0
    np.testing.assert_array_equal(cumulative([1.0, 2.0, -1.0, 2.0]), [0.0, 1.0, 3.0, 2.0, 4.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=60))
def test_drawdown_matches_pairwise_definition(g):
    path = cumulative(g)
    brute = max(max(path[:j + 1]) - path[j] for j in range(len(path)))
    assert mdd(g) == pytest.approx(brute, abs=1e-12)
    assert mdd(g) >= 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=1, max_size=80), st.integers(1, 400))
def test_rolling_window_membership(gaps, window):
    days, d = [], date(2020, 1, 1)
    for gap in gaps:
        d += timedelta(days=gap)
        days.append(d)
    vals = np.arange(len(days), dtype=float)
    got = rolling(lambda v: tuple(v), days, vals, window)
    for (day, members), ref_day in zip(got, days):
        expect = tuple(v for dd, v in zip(days, vals) if day - timedelta(days=window) < dd <= day)
        assert day == ref_day and members == expect


def test_rolling_rejects_unsorted_dates():
    with pytest.raises(ValueError):
        rolling(len, [date(2020, 1, 2), date(2020, 1, 1)], [1.0, 2.0])


def test_metrics_reject_non_finite():
    with pytest.raises(ValueError):
        information_ratio([0.1, np.nan])


# ---------------------------------------------------------------- daily evaluation

def small_market(T=60, n=3, seed=0):
    from fxarb.market_data import SyntheticConfig
    fx, ir, _ = generate_synthetic(SyntheticConfig(n_currencies=n, n_days=T, seed=seed))
    fx, ir, _ = clean_panels(fx, ir)
    return Market(fx, ir)


def test_evaluate_plan_last_row_is_unevaluable():
    m = small_market()
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 2] = w[2, 0] = 1 / 3
    rec = evaluate_plan(m, TradePlan(m.T - 1, 0, w, False), np.ones((3, 3)), np.zeros(3), 1, "lp")
    assert not rec.evaluable and rec.reason == "no next day"


def test_evaluate_plan_degenerate_day():
    m = small_market()
    rec = evaluate_plan(m, degenerate_plan(30, 3, 0, "no prediction"), np.ones((3, 3)), np.zeros(3), 1, "gnn")
    assert rec.evaluable and rec.gain == 0.0 and rec.hhi is None and rec.c1_ok
    assert rec.line().split(",")[6] == "undefined"


def test_evaluate_plan_hhi_and_holdings():
    m = small_market()
    t = 30
    xs = m.fx.rates[t - 1]
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 2] = w[2, 0] = 1 / 3
    rec = evaluate_plan(m, TradePlan(t, 0, w, False), xs, np.zeros(3), 1, "lp")
    assert rec.hhi == pytest.approx(1 / 3)
    x = m.fx.rates[t]
    h1 = x[0, 1] / 3 - xs[0, 1] / 3
    h2 = x[1, 2] * xs[0, 1] / 3 - xs[0, 2] / 3
    h0 = x[2, 0] * xs[0, 2] / 3 - 1 / 3
    assert rec.holdings_abs == pytest.approx(abs(h0) + abs(h1 * x[1, 0]) + abs(h2 * x[2, 0]), rel=1e-12)
    assert DailyRecord.HEADER.count(",") == rec.line().count(",")


# ---------------------------------------------------------------- atomic output

def test_write_atomic_replaces_and_cleans_up(tmp_path):
    out = tmp_path / "report"
    write_atomic(out, {"a.txt": b"one"})
    write_atomic(out, {"b.txt": b"two"})
    assert sorted(p.name for p in out.iterdir()) == ["b.txt"]

    with pytest.raises(TypeError):
        write_atomic(out, {"c.txt": b"x", "d.txt": object()})
    assert sorted(p.name for p in out.iterdir()) == ["b.txt"]
    assert not (tmp_path / "report.partial").exists()


# ---------------------------------------------------------------- walk-forward

@pytest.fixture(scope="module")
def small_report():
    cfg, m = run_small()
    return cfg, m, run_walk_forward(cfg, m)


def test_walk_forward_certificates_hold(small_report):
    cfg, m, rep = small_report
    assert rep.violations == [] and rep.dominance_failures == []
    for name in ("gnn", "lp"):
        recs = rep.strategies[name].records
        assert all(r.c1_ok for r in recs)
        assert len(recs) == len(rep.strategies[name].plans)


def test_walk_forward_layout(small_report):
    cfg, m, rep = small_report
    s = rep.schedule
    lp_rows = [r.t for r in rep.strategies["lp"].records]
    assert lp_rows == list(range(s.t1, m.T))
    gnn_rows = [r.t for r in rep.strategies["gnn"].records]
    assert gnn_rows == list(range(s.t(cfg.schedule.n_sy), m.T))
    assert sorted(rep.fxsa_fits) == list(range(cfg.schedule.n_sy, cfg.schedule.n_fit + 1))
    assert [r.k for r in rep.strategies["lp"].records] == [s.refit_of(t) for t in lp_rows]


def test_report_files_and_manifest(small_report):
    cfg, m, rep = small_report
    files = rep.files()
    assert files["config.toml"] == cfg.raw
    man = json.loads(files["manifest.json"])
    assert man["config_sha256"] == hashlib.sha256(cfg.raw).hexdigest() == cfg.sha256
    for name, digest in man["files"].items():
        assert hashlib.sha256(files[name]).hexdigest() == digest
    for name, blob in files.items():
        if name.endswith(".csv"):
            head = blob.decode().splitlines()[:2]
            assert head == [f"# config_sha256={cfg.sha256}", f"# seed={cfg.seed}"]
    summary = files["summary.csv"].decode().splitlines()
    assert summary[2].startswith("strategy,scope,n_days")
    assert {l.split(",")[1] for l in summary[3:]} == {"all", "shared"}


def test_walk_forward_is_deterministic(small_report, tmp_path):
    cfg, m, rep = small_report
    _, m2 = run_small()
    again = run_walk_forward(cfg, m2)
    assert again.files() == rep.files()
    a = rep.write(tmp_path / "a")
    b = again.write(tmp_path / "b")
    assert [p.read_bytes() for p in sorted(a.iterdir())] == [p.read_bytes() for p in sorted(b.iterdir())]


def test_lp_only_strategy():
    cfg, m = run_small(strategy="lp")
    rep = run_walk_forward(cfg, m)
    assert set(rep.strategies) == {"lp"} and rep.fxsa_fits == {}
    assert "daily_gnn.csv" not in rep.files()
    assert [name for name, _, _ in rep.summary_rows()] == ["lp"]


def test_unknown_home_currency():
    cfg, m = run_small()
    with pytest.raises(WalkForwardError, match="home currency"):
        run_walk_forward(replace(cfg, home="XXX"), m)


def test_future_rates_do_not_change_earlier_plans():
    cfg, m = run_small()
    rep = run_walk_forward(cfg, m)
    cut = rep.schedule.t(cfg.schedule.n_fit) + 5
    rep2 = run_walk_forward(cfg, planted_future(m, cut))
    for name in ("gnn", "lp"):
        early = [p for p in rep.strategies[name].plans if p.t < cut]
        early2 = [p for p in rep2.strategies[name].plans if p.t < cut]
        assert len(early) == len(early2) > 0
        for p, q in zip(early, early2):
            np.testing.assert_array_equal(p.w, q.w)
    np.testing.assert_array_equal(rep.store.xhat[:cut], rep2.store.xhat[:cut])
    late = [p.t for p, q in zip(rep.strategies["lp"].plans, rep2.strategies["lp"].plans)
            if p.t > cut and not np.array_equal(p.w, q.w)]
    assert late  # the planted change is visible after the cut


def test_guard_blocks_a_planted_future_read():
    m = small_market()
    view = m.view(40)
    with pytest.raises(LeakageError):
        view.rates(39, 41)
    with pytest.raises(LeakageError):
        view.daily_ir(40, 41)
