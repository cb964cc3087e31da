"""Stage 1: rate prediction on the currency graph, trained walk-forward.

A refit schedule cuts the calendar into a training era ``[t0 : t1)`` and
quarterly test periods.  Each refit trains a grid of edge-output networks on
log-ratio targets and keeps the one with the lowest validation error.  Dates in
the training era receive out-of-sample predictions from the earliest refit that
validated on them, so the trading stage can later be trained on predictions
that were never fit to.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Sequence

import numpy as np

from . import neural as nn
from .fx_graph import Market, prediction_edge_set
from .market_data import TradingCalendar
from .neural import autodiff as ad

logger = logging.getLogger(__name__)

STAGES = ("P", "S")


class ScheduleError(ValueError):
    pass


class CoverageError(RuntimeError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class FitSchedule:
    """Refit rows ``t_1 < ... < t_nfit`` (0-based) with ``t_{nfit+1}`` at the end of data.

    ``t_exec`` is informational: features use data through ``t - 1`` only.
    """

    refit_rows: tuple
    n_sy: int
    end: int
    t0: int = 0
    t_exec: float = 0.5

    def __post_init__(self):
        r = self.refit_rows
        if not r or any(b <= a for a, b in zip(r, r[1:])):
            raise ScheduleError("refit rows must be strictly increasing and non-empty")
        if not 1 <= self.n_sy < len(r):
            raise ScheduleError(f"need 1 <= n_sy < n_fit, got n_sy={self.n_sy}, n_fit={len(r)}")
        if not (self.t0 < r[0] and r[-1] < self.end):
            raise ScheduleError("refit rows must lie strictly inside the data")
        if not 0 < self.t_exec < 1:
            raise ScheduleError("t_exec must lie in (0, 1)")

    @property
    def n_fit(self) -> int:
        return len(self.refit_rows)

    @property
    def t1(self) -> int:
        return self.refit_rows[0]

    def t(self, k: int) -> int:
        """``t_k`` for ``k`` in ``1..n_fit + 1``; the sentinel is one past the last row."""
        if k == self.n_fit + 1:
            return self.end
        if not 1 <= k <= self.n_fit:
            raise IndexError(f"refit index {k} outside 1..{self.n_fit + 1}")
        return self.refit_rows[k - 1]

    def test_period(self, k: int) -> tuple[int, int]:
        return self.t(k), self.t(k + 1)

    def refit_of(self, row: int) -> int:
        """The ``k`` whose test period contains ``row``; 0 inside the training era."""
        return int(np.searchsorted(self.refit_rows, row, side="right"))


def _quarter_starts(first: date, count: int, months: int) -> list[date]:
    y, m = first.year, first.month
    out = []
    for _ in range(count):
        out.append(date(y, m, 1))
        m += months
        y, m = y + (m - 1) // 12, (m - 1) % 12 + 1
    return out


FREQ_MONTHS = {"monthly": 1, "quarterly": 3, "annual": 12}


def build_schedule(
    calendar: TradingCalendar,
    start: date | int,
    n_fit: int,
    n_sy: int,
    refit_freq: str = "quarterly",
    t_exec: float = 0.5,
) -> FitSchedule:
    """``t_1`` is the first trading date on or after ``start`` (a year means 1 January);
    each later ``t_k`` is the first trading date of the following period."""
    if refit_freq not in FREQ_MONTHS:
        raise ScheduleError(f"unknown refit frequency {refit_freq!r}; expected one of {sorted(FREQ_MONTHS)}")
    if isinstance(start, int):
        start = date(start, 1, 1)
    months = FREQ_MONTHS[refit_freq]
    anchors = [start] + _quarter_starts(start, n_fit + 1, months)[1:]
    dates = calendar.dates
    rows = []
    for a in anchors[:n_fit]:
        r = int(np.searchsorted(np.array(dates, dtype="datetime64[D]"), np.datetime64(a)))
        if r >= len(dates):
            raise ScheduleError(
                f"calendar ends {dates[-1]} before refit {len(rows) + 1} at {a}; "
                f"horizon shorter than n_fit={n_fit} periods"
            )
        rows.append(r)
    if len(set(rows)) != len(rows):
        raise ScheduleError("two refit dates fall on the same trading day")
    return FitSchedule(tuple(rows), n_sy, len(dates), 0, t_exec)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Split:
    """``[lo : hi)`` with one contiguous validation block ``[val_lo : val_hi)``."""

    k: int
    stage: str
    lo: int
    hi: int
    val_lo: int
    val_hi: int

    def train_rows(self) -> np.ndarray:
        r = np.arange(self.lo, self.hi)
        return r[(r < self.val_lo) | (r >= self.val_hi)]

    def val_rows(self) -> np.ndarray:
        return np.arange(self.val_lo, self.val_hi)

    def in_train(self, row: int) -> bool:
        return self.lo <= row < self.hi and not self.val_lo <= row < self.val_hi


@dataclass(frozen=True)
class SplitSpec:
    stage: str
    splits: dict  # k -> Split

    def __getitem__(self, k: int) -> Split:
        return self.splits[k]

    def k_star(self, row: int) -> int:
        """Smallest refit whose validation block contains ``row``; 0 if none."""
        for k in sorted(self.splits):
            s = self.splits[k]
            if s.val_lo <= row < s.val_hi:
                return k
        return 0


def make_splits(schedule: FitSchedule, stage: str, val_fraction: float = 0.2) -> SplitSpec:
    """Stage P refits ``k <= n_sy`` validate on the ``k``-th of ``n_sy`` equal consecutive
    blocks of the training era; all other refits validate on the trailing
    ``val_fraction`` of ``[t0 : t_k)``."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    t0, t1 = schedule.t0, schedule.t1
    bounds = [t0 + (j * (t1 - t0)) // schedule.n_sy for j in range(schedule.n_sy + 1)]
    out = {}
    for k in range(1, schedule.n_fit + 1):
        tk = schedule.t(k)
        if stage == "P" and k <= schedule.n_sy:
            a, b = bounds[k - 1], bounds[k]
        else:
            b = tk
            a = tk - max(1, int(math.ceil(val_fraction * (tk - t0))))
        out[k] = Split(k, stage, t0, tk, a, b)
    return SplitSpec(stage, out)


# ---------------------------------------------------------------- grid and knobs

@dataclass(frozen=True)
class HyperGrid:
    points: tuple  # ((param_budget, layers), ...)

    def __post_init__(self):
        if not self.points:
            raise ValueError("hyper-parameter grid must contain at least one point")
        for b, L in self.points:
            if b < 1 or L < 1:
                raise ValueError(f"invalid grid point ({b}, {L})")

    @property
    def n_hyper(self) -> int:
        return len(self.points)

    def ordered(self) -> list:
        """Points in tie-break order: smaller budget first, then fewer layers."""
        return sorted(self.points)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 64
    val_fraction: float = 0.2


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- data

@dataclass
class FxrpData:
    """Stacked feature graphs and scaled targets for a set of prediction rows."""

    rows: np.ndarray
    batch: nn.GraphBatch
    target: np.ndarray  # (B, n, n), 0 off-mask
    target_mask: np.ndarray  # (B, n, n)
    prev: np.ndarray  # (B, n, n)

    def take(self, idx) -> "FxrpData":
        return FxrpData(self.rows[idx], self.batch.take(idx), self.target[idx], self.target_mask[idx], self.prev[idx])


def _stack(market: Market, rows: Sequence[int], with_targets: bool) -> FxrpData:
    rows = np.asarray(rows, dtype=int)
    n, R = market.n, len(market.windows)
    B = len(rows)
    node_x = np.zeros((B, n, 2 * R))
    edge_x = np.zeros((B, n, n, R))
    node_m = np.zeros((B, n), bool)
    edge_m = np.zeros((B, n, n), bool)
    pred_m = np.zeros((B, n, n), bool)
    prev = np.full((B, n, n), np.nan)
    z = np.zeros((B, n, n))
    for b, t in enumerate(rows):
        g = market.feature_graph(int(t))
        node_x[b], edge_x[b], node_m[b], edge_m[b], pred_m[b] = (
            g.node_features, g.edge_features, g.node_mask, g.edge_mask, g.pred_mask)
        prev[b] = g.prev_rates
        if with_targets:
            # the label for row t is read through a view that ends after t
            x = market.view(int(t) + 1).rates(int(t), int(t) + 1)[0]
            with np.errstate(invalid="ignore", divide="ignore"):
                zt = np.log(x / g.prev_rates)
            ok = g.pred_mask & np.isfinite(zt)
            pred_m[b] = ok
            z[b] = np.where(ok, zt, 0.0)
    return FxrpData(rows, nn.GraphBatch(node_x, edge_x, node_m, edge_m), z, pred_m, prev)


def usable_rows(market: Market, rows: Sequence[int]) -> np.ndarray:
    rows = np.asarray(rows, dtype=int)
    return rows[(rows >= market.first_usable) & (rows < market.T)]


def load_rows(market: Market, rows, with_targets: bool = True) -> FxrpData:
    return _stack(market, usable_rows(market, rows), with_targets)


# ---------------------------------------------------------------- training

@dataclass
class GridResult:
    budget: int
    layers: int
    hidden: int
    val_mse: float
    epochs: int
    params: nn.GnnParams = field(repr=False)


@dataclass
class FxrpFit:
    k: int
    params: nn.GnnParams
    table: list  # GridResult per grid point, in tie-break order
    train_rows: np.ndarray
    val_rows: np.ndarray

    @property
    def best(self) -> GridResult:
        return min(self.table, key=lambda g: (g.val_mse, g.budget, g.layers))


def _mse(params: nn.GnnParams, data: FxrpData) -> float:
    if not data.target_mask.any():
        return float("nan")
    out, _ = nn.forward(params, data.batch)
    d = (out.value - data.target)[data.target_mask]
    return float(np.mean(d * d))


def _fit_one(params: nn.GnnParams, tr: FxrpData, va: FxrpData, cfg: TrainConfig):
    """Full-batch Adam on standardized targets with early stopping on validation MSE."""
    scale = params.target_scale
    zt = tr.target / scale
    mask = tr.target_mask
    count = mask.sum()
    opt = nn.Adam(lr=cfg.lr)
    best_val, best_params, best_epoch = _mse(params, va), params, 0
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tape = nn.Tape()
        leaves = nn.gnn.watch(params, tape)
        out, _ = nn.forward(params.with_target_scale(1.0), tr.batch, tape, leaves)
        diff = (out - zt) * mask
        loss = ad.vsum(ad.square(diff)) * (1.0 / count)
        tape.backward(loss)
        new, ok = opt.step(params.tensors(), nn.gradients(leaves))
        if ok:
            params = params.with_tensors(new)
        val = _mse(params, va)
        if val < best_val:
            best_val, best_params, best_epoch, wait = val, params, epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return best_params, best_val, best_epoch


def train_fxrp(
    market: Market,
    split: Split,
    grid: HyperGrid,
    seed: int,
    cfg: TrainConfig = TrainConfig(),
) -> FxrpFit:
    """Train every grid point on ``split``'s training rows; keep the lowest validation MSE.

    Ties go to the smaller budget, then to fewer layers.  Heads start at zero so
    every candidate begins as the random walk.
    """
    tr = load_rows(market, split.train_rows())
    va = load_rows(market, split.val_rows())
    if len(tr.rows) == 0 or not tr.target_mask.any():
        raise ValueError(f"refit {split.k}: no usable training dates in [{split.lo}, {split.hi})")
    if len(va.rows) == 0 or not va.target_mask.any():
        raise ValueError(f"refit {split.k}: no usable validation dates in [{split.val_lo}, {split.val_hi})")
    scaler = nn.FeatureScaler.fit([tr.batch])
    if scaler.degenerate:
        logger.info("refit %d: constant features %s", split.k, ", ".join(scaler.degenerate))
    sd = float(np.std(tr.target[tr.target_mask]))
    target_scale = sd if sd > 0 else 1.0
    dn, de = tr.batch.node_x.shape[-1], tr.batch.edge_x.shape[-1]
    table = []
    for gi, (budget, layers) in enumerate(grid.ordered()):
        h = nn.width_for_budget(budget, layers, dn, de, "edge_output")
        p0 = nn.init_gnn(dn, de, h, layers, "edge_output", derive_seed(seed, split.k, gi), zero_head=True,
                         scaler=scaler).with_target_scale(target_scale)
        params, val, epochs = _fit_one(p0, tr, va, cfg)
        logger.info("refit %d grid (%d, %d) h=%d: val mse %.6g after %d epochs", split.k, budget, layers, h, val, epochs)
        table.append(GridResult(budget, layers, h, val, epochs, params))
    best = min(table, key=lambda g: (g.val_mse, g.budget, g.layers))
    return FxrpFit(split.k, best.params, table, usable_rows(market, split.train_rows()),
                   usable_rows(market, split.val_rows()))


# ---------------------------------------------------------------- inference

def predict_rows(market: Market, rows: Sequence[int], params: nn.GnnParams) -> np.ndarray:
    """``X̂`` for each row, ``(B, n, n)``; NaN off each row's prediction set."""
    data = load_rows(market, rows, with_targets=False)
    if len(data.rows) != len(rows):
        raise ValueError("some rows lack look-back history for features")
    if len(data.rows) == 0:
        return np.zeros((0, market.n, market.n))
    out, _ = nn.forward(params, data.batch)
    with np.errstate(invalid="ignore", over="ignore"):
        xhat = data.prev * np.exp(out.value)
    return np.where(data.target_mask, xhat, np.nan)


def predict(market: Market, t: int, params: nn.GnnParams) -> np.ndarray:
    return predict_rows(market, [t], params)[0]


def baseline_random_walk(market: Market, t: int) -> np.ndarray:
    """``X̂_t = X̃_{t-1}`` on ``U_t``; pairs without a prior rate are omitted (NaN)."""
    view = market.view(t)
    u = prediction_edge_set(view, t)
    prev = view.rates(t - 1, t)[0]
    return np.where(u & ~np.isnan(prev), prev, np.nan)


# ---------------------------------------------------------------- stitching

@dataclass
class PredictionStore:
    currencies: tuple
    xhat: np.ndarray  # (T, n, n), NaN where no prediction
    provenance: np.ndarray  # (T,), refit index k, 0 = none

    def rows(self) -> np.ndarray:
        return np.nonzero(self.provenance > 0)[0]

    def lines(self) -> list[str]:
        out = []
        for r in self.rows():
            for i, j in zip(*np.nonzero(~np.isnan(self.xhat[r]))):
                out.append(f"{r + 1},{self.currencies[i]},{self.currencies[j]},{float(self.xhat[r, i, j])!r},{self.provenance[r]}")
        return out

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("t,i,j,xhat,provenance_k\n")
            for line in self.lines():
                fh.write(line + "\n")


def stitch_predictions(market: Market, schedule: FitSchedule, splits: SplitSpec, fits: dict) -> PredictionStore:
    """Training-era rows use the earliest refit that validated on them; test rows use
    the refit whose test period holds them."""
    missing = [k for k in range(1, schedule.n_fit + 1) if k not in fits]
    if missing:
        raise ValueError(f"untrained refits {missing}")
    T, n = market.T, market.n
    xhat = np.full((T, n, n), np.nan)
    prov = np.zeros(T, dtype=int)
    start = max(schedule.t0, market.first_usable)
    era = np.arange(start, schedule.t1)
    by_k: dict = {}
    for r in era:
        k = splits.k_star(int(r))
        if k == 0:
            raise CoverageError(f"row {r} is covered by no validation block")
        if splits[k].in_train(int(r)):
            raise CoverageError(f"row {r} lies in the training period of refit {k}")
        by_k.setdefault(k, []).append(int(r))
    for k in range(1, schedule.n_fit + 1):
        lo, hi = schedule.test_period(k)
        by_k.setdefault(k, []).extend(range(lo, hi))
    for k, rows in sorted(by_k.items()):
        if rows:
            xhat[rows] = predict_rows(market, rows, fits[k].params)
            prov[rows] = k
    return PredictionStore(market.currencies, xhat, prov)


def prediction_mse(xhat: np.ndarray, market: Market, rows: Sequence[int]) -> float:
    """Mean squared log error of ``xhat`` (rows aligned with ``rows``) against realized rates."""
    rows = np.asarray(rows, dtype=int)
    realized = market.fx.rates[rows]
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.log(xhat / realized)
    d = d[np.isfinite(d)]
    return float(np.mean(d * d)) if d.size else float("nan")
