"""Walk-forward orchestration, daily evaluation of both strategies, metrics and reports."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fx_graph import Market
from .fxrp import FitSchedule, PredictionStore, build_schedule, make_splits, stitch_predictions, train_fxrp
from .lp_bench import arbitrage_lp
from .statarb import (
    ExchangeHistory,
    TradePlan,
    decide_trades,
    degenerate_plan,
    predicted_gain,
    realized_gain,
    train_fxsa,
    verify_c1,
)

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"
ANNUALIZATION = 252
ROLLING_DAYS = 365
LP_FEAS_TOL = 1e-9
DOMINANCE_TOL = 1e-9


# ---------------------------------------------------------------- metrics

def _gains(g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or not np.all(np.isfinite(g)):
        raise ValueError("gains must be a finite 1-D series")
    return g


def _ratio(num: float, den: float):
    return num / den if den > 0 else None


def information_ratio(gains, ann: int = ANNUALIZATION):
    """``mean / std * sqrt(ann)`` with a zero benchmark; ``None`` when undefined."""
    g = _gains(gains)
    if len(g) < 2:
        return None
    r = _ratio(g.mean(), g.std(ddof=1))
    return None if r is None else float(r * np.sqrt(ann))


def sortino(gains, ann: int = ANNUALIZATION):
    """``mean / std(min(G, 0)) * sqrt(ann)``; ``None`` when there is no downside spread."""
    g = _gains(gains)
    if len(g) < 2:
        return None
    r = _ratio(g.mean(), np.minimum(g, 0.0).std(ddof=1))
    return None if r is None else float(r * np.sqrt(ann))


def annual_return(gains, ann: int = ANNUALIZATION):
    g = _gains(gains)
    return float(ann * g.mean()) if len(g) else None


def annual_vol(gains, ann: int = ANNUALIZATION):
    g = _gains(gains)
    return float(np.sqrt(ann) * g.std(ddof=1)) if len(g) >= 2 else None


def cumulative(gains) -> np.ndarray:
    """Additive P&L path starting at 0."""
    return np.concatenate([[0.0], np.cumsum(_gains(gains))])


def mdd(gains) -> float:
    """Largest peak-to-trough drop of the cumulative-sum path."""
    path = cumulative(gains)
    return float(np.max(np.maximum.accumulate(path) - path))


def rolling(metric: Callable, dates: Sequence[date], values, window_days: int = ROLLING_DAYS) -> list:
    """``metric`` over the records dated in ``(d - window_days, d]`` for each record date ``d``."""
    values = np.asarray(values, dtype=float)
    ords = np.array([d.toordinal() for d in dates])
    if len(ords) and np.any(np.diff(ords) <= 0):
        raise ValueError("rolling dates must be strictly increasing")
    lo = np.searchsorted(ords, ords - window_days, side="right")
    return [(d, metric(values[a:b + 1])) for d, a, b in zip(dates, lo, range(len(ords)))]


def _mean_or_none(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()) if len(v) else None


def fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------- records

@dataclass
class DailyRecord:
    t: int  # 0-based row
    day: date
    k: int
    strategy: str
    gain: float
    predicted: float
    holdings_abs: float
    hhi: float | None  # None on degenerate days
    degenerate: bool
    evaluable: bool
    c1_ok: bool
    cert_sum: float
    cert_max_h: float
    reason: str = ""

    HEADER = "t,date,k,gain,predicted_gain,holdings_abs,hhi,degenerate,evaluable,c1_ok,cert_sum,cert_maxH,reason"

    def line(self) -> str:
        return ",".join(fmt(v) for v in (self.t + 1, self.day.isoformat(), self.k, self.gain, self.predicted,
                                         self.holdings_abs, self.hhi, self.degenerate, self.evaluable, self.c1_ok,
                                         self.cert_sum, self.cert_max_h, self.reason))


def evaluate_plan(market: Market, plan: TradePlan, xs: np.ndarray, y_hat: np.ndarray, k: int, strategy: str) -> DailyRecord:
    """Realized outcome of ``plan``; reads rows ``t`` and ``t + 1`` (evaluation only)."""
    t, o = plan.t, plan.home
    day = market.calendar.dates[t]
    w = plan.w
    pred = 0.0 if plan.degenerate else predicted_gain(w, xs, y_hat, o)
    c1_ok = plan.degenerate or verify_c1(w, xs, o)[0]
    hhi = None if plan.degenerate else float(np.sum(w * w))
    base = dict(t=t, day=day, k=k, strategy=strategy, predicted=pred, hhi=hhi, degenerate=plan.degenerate,
                c1_ok=c1_ok, cert_sum=plan.cert_sum, cert_max_h=plan.cert_max_h, reason=plan.reason)
    if t + 1 >= market.T:
        return DailyRecord(gain=0.0, holdings_abs=0.0, evaluable=False, **{**base, "reason": "no next day"})
    if plan.degenerate:
        return DailyRecord(gain=0.0, holdings_abs=0.0, evaluable=True, **base)
    view = market.view(t + 2)
    x = view.rates(t, t + 2)
    y = view.daily_ir(t, t + 1)[0]
    xnh = np.array(x[1][:, o])
    xnh[o] = 1.0
    try:
        h, g = realized_gain(w, xs, x[0], xnh, y, o)
    except ValueError as exc:
        return DailyRecord(gain=0.0, holdings_abs=0.0, evaluable=False, **{**base, "reason": str(exc)})
    to_home = np.array(x[0][:, o])
    to_home[o] = 1.0
    involved = (w.sum(axis=0) + w.sum(axis=1)) > 0
    if np.any(involved & ~np.isfinite(to_home)):
        return DailyRecord(gain=0.0, holdings_abs=0.0, evaluable=False, **{**base, "reason": "missing home rate"})
    hold = float(np.sum(np.abs(np.where(involved, h * to_home, 0.0))))
    return DailyRecord(gain=g, holdings_abs=hold, evaluable=True, **base)


# ---------------------------------------------------------------- report

SUMMARY_HEADER = ("strategy,scope,n_days,n_trading_days,information_ratio,sortino,annual_return,annual_vol,mdd,"
                  "mean_holdings,mean_hhi")


@dataclass
class StrategyReport:
    name: str
    records: list
    plans: list

    def subset(self, rows=None) -> list:
        keep = None if rows is None else set(int(r) for r in rows)
        return [r for r in self.records if r.evaluable and (keep is None or r.t in keep)]

    def summary(self, ann: int = ANNUALIZATION, rows=None) -> dict:
        recs = self.subset(rows)
        g = [r.gain for r in recs]
        active = [r for r in recs if not r.degenerate]
        return {
            "n_days": len(recs),
            "n_trading_days": len(active),
            "information_ratio": information_ratio(g, ann),
            "sortino": sortino(g, ann),
            "annual_return": annual_return(g, ann),
            "annual_vol": annual_vol(g, ann),
            "mdd": mdd(g) if recs else None,
            "mean_holdings": _mean_or_none([r.holdings_abs for r in active]),
            "mean_hhi": _mean_or_none([r.hhi for r in active]),
        }

    def rolling_series(self, ann: int = ANNUALIZATION, window_days: int = ROLLING_DAYS) -> list:
        recs = self.subset()
        days = [r.day for r in recs]
        ir = rolling(lambda v: information_ratio(v, ann), days, [r.gain for r in recs], window_days)
        hold = [np.nan if r.degenerate else r.holdings_abs for r in recs]
        hm = rolling(lambda v: _mean_or_none(v[np.isfinite(v)]), days, hold, window_days)
        return [(d, a, b) for (d, a), (_, b) in zip(ir, hm)]


@dataclass
class BacktestReport:
    config_sha256: str
    seed: int
    currencies: tuple
    schedule: FitSchedule
    strategies: dict
    store: PredictionStore
    fxrp_fits: dict
    fxsa_fits: dict
    violations: list = field(default_factory=list)
    dominance_failures: list = field(default_factory=list)
    config_raw: bytes = b""
    annualization: int = ANNUALIZATION
    rolling_days: int = ROLLING_DAYS

    def shared_rows(self) -> list:
        if not {"gnn", "lp"} <= set(self.strategies):
            return []
        a = {r.t for r in self.strategies["gnn"].subset()}
        b = {r.t for r in self.strategies["lp"].subset()}
        return sorted(a & b)

    def summary_rows(self) -> list:
        out = []
        shared = self.shared_rows()
        for name in sorted(self.strategies):
            rep = self.strategies[name]
            out.append((name, "all", rep.summary(self.annualization)))
            if shared:
                out.append((name, "shared", rep.summary(self.annualization, shared)))
        return out

    def _header(self) -> str:
        return f"# config_sha256={self.config_sha256}\n# seed={self.seed}\n"

    def files(self) -> dict:
        """Report file name -> content bytes."""
        h = self._header()
        files = {}
        lines = [SUMMARY_HEADER]
        keys = SUMMARY_HEADER.split(",")[2:]
        for name, scope, s in self.summary_rows():
            lines.append(",".join([name, scope] + [fmt(s[k]) for k in keys]))
        files["summary.csv"] = h + "\n".join(lines) + "\n"
        for name, rep in sorted(self.strategies.items()):
            body = [DailyRecord.HEADER] + [r.line() for r in rep.records]
            files[f"daily_{name}.csv"] = h + "\n".join(body) + "\n"
            body = ["date,information_ratio,mean_holdings"]
            body += [f"{d.isoformat()},{fmt(a)},{fmt(b)}" for d, a, b in rep.rolling_series(self.annualization,
                                                                                         self.rolling_days)]
            files[f"rolling_{name}.csv"] = h + "\n".join(body) + "\n"
            body = ["t,i,j,w,degenerate,cert_sum,cert_maxH"]
            for p in rep.plans:
                body += p.lines(self.currencies)
            files[f"plans_{name}.csv"] = h + "\n".join(body) + "\n"
        files["predictions.csv"] = h + "t,i,j,xhat,provenance_k\n" + "".join(l + "\n" for l in self.store.lines())
        body = ["stage,k,budget,layers,hidden,val_score,epochs,selected"]
        for stage, fits in (("P", self.fxrp_fits), ("S", self.fxsa_fits)):
            for k in sorted(fits):
                fit = fits[k]
                for g in fit.table:
                    score = g.val_mse if stage == "P" else g.val_loss
                    body.append(",".join(fmt(v) for v in (stage, k, g.budget, g.layers, g.hidden, score, g.epochs,
                                                         g.params is fit.params)))
        files["validation.csv"] = h + "\n".join(body) + "\n"
        body = ["strategy,t,problem"] + [f"{s},{t + 1},{msg}" for s, t, msg in self.violations]
        body += [f"dominance,{t + 1},{msg}" for t, msg in self.dominance_failures]
        files["certificates.csv"] = h + "\n".join(body) + "\n"
        files["config.toml"] = self.config_raw
        out = {k: v.encode() if isinstance(v, str) else v for k, v in files.items()}
        manifest = {"config_sha256": self.config_sha256, "seed": self.seed,
                    "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(out.items())}}
        out["manifest.json"] = (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
        return out

    def write(self, out_dir) -> Path:
        return write_atomic(out_dir, self.files())


def write_atomic(out_dir, files: dict) -> Path:
    """Write ``files`` into ``out_dir`` via a staging directory; nothing partial survives a failure."""
    out_dir = Path(out_dir)
    stage = out_dir.with_name(out_dir.name + ".partial")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    try:
        for name, blob in files.items():
            (stage / name).write_bytes(blob)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    stage.rename(out_dir)
    return out_dir


# ---------------------------------------------------------------- walk-forward

class WalkForwardError(RuntimeError):
    pass


def _context(k: int, what: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, typ, exc, tb):
            if exc is not None and not isinstance(exc, WalkForwardError) and isinstance(exc, Exception):
                raise WalkForwardError(f"refit {k}: {what} failed: {exc}") from exc
            return False
    return _Ctx()


def run_walk_forward(cfg, market: Market, seed: int | None = None, strategy: str | None = None,
                     fxrp_fits: dict | None = None) -> BacktestReport:
    """Train every refit, stitch predictions and evaluate the strategies day by day.

    ``cfg`` is a :class:`fxarb.config.RunConfig`.  ``fxrp_fits`` may supply
    already trained prediction models keyed by refit index.
    """
    seed = cfg.seed if seed is None else seed
    strategy = strategy or cfg.strategy
    names = ("gnn", "lp") if strategy == "both" else (strategy,)
    if cfg.home not in market.currencies:
        raise WalkForwardError(f"home currency {cfg.home} not in the panel currencies {market.currencies}")
    home = market.currencies.index(cfg.home)
    sc = cfg.schedule
    schedule = build_schedule(market.calendar, sc.start, sc.n_fit, sc.n_sy, sc.refit_freq, sc.t_exec)
    if schedule.t1 <= market.first_usable + 2:
        raise WalkForwardError(f"first refit at row {schedule.t1} leaves no training history")
    clock = time.perf_counter()

    p_splits = make_splits(schedule, "P", cfg.fxrp_train.val_fraction)
    fits = dict(fxrp_fits or {})
    for k in range(1, schedule.n_fit + 1):
        if k in fits:
            continue
        with _context(k, "prediction training"):
            fits[k] = train_fxrp(market, p_splits[k], cfg.fxrp_grid, seed, cfg.fxrp_train)
        logger.info("prediction refit %d/%d done (%.1fs)", k, schedule.n_fit, time.perf_counter() - clock)
    store = stitch_predictions(market, schedule, p_splits, fits)
    hist = ExchangeHistory(market, store, home, cfg.windows, cfg.fxsa.eps_s)

    s_fits: dict = {}
    if "gnn" in names:
        s_splits = make_splits(schedule, "S", cfg.fxsa.train.val_fraction)
        for k in range(sc.n_sy, schedule.n_fit + 1):
            with _context(k, "trading training"):
                s_fits[k] = train_fxsa(hist, s_splits[k], cfg.fxsa.grid, seed, cfg.fxsa.train, cfg.fxsa.eps_var)
            logger.info("trading refit %d/%d done (%.1fs)", k, schedule.n_fit, time.perf_counter() - clock)

    reports = {n: StrategyReport(n, [], []) for n in names}
    violations, dominance = [], []
    for k in range(1, schedule.n_fit + 1):
        lo, hi = schedule.test_period(k)
        for t in range(lo, hi):
            s = hist.states.get(t)
            xs = s.xs if s is not None else np.full((market.n, market.n), np.nan)
            y_hat = s.y_hat if s is not None else np.zeros(market.n)
            preds = {}
            if "lp" in names:
                if s is None or s.links.mask.sum() == 0:
                    plan = degenerate_plan(t, market.n, home, s.reason if s is not None else "no prediction")
                else:
                    plan, _ = arbitrage_lp(t, xs, y_hat, s.links)
                if not plan.degenerate and (plan.cert_max_h > LP_FEAS_TOL or abs(plan.cert_sum - 1) > LP_FEAS_TOL):
                    violations.append(("lp", t, f"infeasible plan: sum {float(plan.cert_sum)!r}, max |H| {float(plan.cert_max_h)!r}"))
                rec = evaluate_plan(market, plan, xs, y_hat, k, "lp")
                reports["lp"].records.append(rec)
                reports["lp"].plans.append(plan)
                preds["lp"] = rec.predicted
            if "gnn" in names and k >= sc.n_sy:
                with _context(k, f"trading decision at row {t}"):
                    plan = decide_trades(hist, t, s_fits[k].params)
                rec = evaluate_plan(market, plan, xs, y_hat, k, "gnn")
                if not rec.c1_ok:
                    violations.append(("gnn", t, "; ".join(verify_c1(plan.w, xs, home)[1])))
                reports["gnn"].records.append(rec)
                reports["gnn"].plans.append(plan)
                preds["gnn"] = rec.predicted
            if len(preds) == 2 and preds["lp"] < preds["gnn"] - DOMINANCE_TOL * max(1.0, abs(preds["gnn"])):
                dominance.append((t, f"lp {float(preds['lp'])!r} < gnn {float(preds['gnn'])!r}"))
        logger.info("evaluated test period %d (%.1fs)", k, time.perf_counter() - clock)
    for s, t, msg in violations:
        logger.error("certificate violation (%s, row %d): %s", s, t, msg)
    return BacktestReport(cfg.sha256, seed, market.currencies, schedule, reports, store, fits, s_fits, violations,
                          dominance, cfg.raw, cfg.annualization, cfg.rolling_days)
