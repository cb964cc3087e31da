"""FX-rate and interest-rate panels on a weekday trading calendar.

Panels are dense arrays indexed by row position ``r`` (0-based).  The
calendar's trading-date index is ``t = r + 1``; serialized records use ``t``.
FX rates live in an ``(T, n, n)`` array where ``rates[r, i, j]`` is the amount
of currency ``j`` per unit of ``i``; missing quotes (and the diagonal) are NaN.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MATURITIES = (1, 2, 5, 10)
DEFAULT_CODES = ("USD", "EUR", "JPY", "GBP", "AUD", "CAD", "CHF", "HKD", "SGD", "SEK")


class MarketDataError(ValueError):
    pass


class ParseError(MarketDataError):
    pass


class IngestionError(MarketDataError):
    pass


class DomainError(MarketDataError):
    pass


class LeakageError(RuntimeError):
    """A read touched data dated at or after the current decision date."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TradingCalendar:
    dates: tuple

    def __post_init__(self):
        ds = tuple(self.dates)
        object.__setattr__(self, "dates", ds)
        for a, b in zip(ds, ds[1:]):
            if not a < b:
                raise ValueError(f"calendar dates not strictly increasing at {b}")
        for d in ds:
            if d.weekday() >= 5:
                raise ValueError(f"calendar contains weekend date {d}")
        object.__setattr__(self, "_rows", {d: r for r, d in enumerate(ds)})

    @classmethod
    def weekdays(cls, start: date, end: date | None = None, n: int | None = None) -> "TradingCalendar":
        """Weekdays from ``start`` through ``end`` (inclusive), or the first ``n`` of them."""
        if (end is None) == (n is None):
            raise ValueError("give exactly one of end or n")
        out = []
        d = start
        while (n is not None and len(out) < n) or (end is not None and d <= end):
            if d.weekday() < 5:
                out.append(d)
            d += timedelta(days=1)
        return cls(tuple(out))

    @classmethod
    def spanning(cls, dates: Iterable[date]) -> "TradingCalendar":
        ds = list(dates)
        if not ds:
            raise ValueError("no dates")
        return cls.weekdays(min(ds), end=max(ds))

    def __len__(self) -> int:
        return len(self.dates)

    def __contains__(self, d) -> bool:
        return d in self._rows

    def row(self, d: date) -> int:
        return self._rows[d]

    def index(self, d: date) -> int:
        """Trading-date index (first date is 1)."""
        return self._rows[d] + 1

    def date_at(self, t: int) -> date:
        return self.dates[t - 1]


@dataclass(frozen=True)
class FxPanel:
    calendar: TradingCalendar
    currencies: tuple
    rates: np.ndarray
    # forward-filled shadow copy, consumed only by the currency-value solver
    filled: np.ndarray | None = None
    # quotes present in one direction only (left untouched by symmetrization)
    one_sided: np.ndarray | None = None
    dropped_rows: int = 0

    def __post_init__(self):
        n = len(self.currencies)
        if self.rates.shape != (len(self.calendar), n, n):
            raise ValueError(f"rates shape {self.rates.shape} does not match calendar/currencies")
        vals = self.rates[~np.isnan(self.rates)]
        if np.any(vals <= 0):
            raise DomainError("FX rates must be strictly positive")
        object.__setattr__(self, "rates", _frozen(self.rates))
        if self.filled is not None:
            object.__setattr__(self, "filled", _frozen(self.filled))
        if self.one_sided is not None:
            object.__setattr__(self, "one_sided", _frozen(self.one_sided))

    @property
    def n(self) -> int:
        return len(self.currencies)

    def code_index(self, code: str) -> int:
        return self.currencies.index(code)

    def shadow(self) -> np.ndarray:
        return self.rates if self.filled is None else self.filled


@dataclass(frozen=True)
class IrPanel:
    calendar: TradingCalendar
    currencies: tuple
    rates: np.ndarray  # (T, n, len(MATURITIES)) annualized decimals
    maturities: tuple = MATURITIES
    dropped_rows: int = 0

    def __post_init__(self):
        shape = (len(self.calendar), len(self.currencies), len(self.maturities))
        if self.rates.shape != shape:
            raise ValueError(f"IR shape {self.rates.shape} != {shape}")
        object.__setattr__(self, "rates", _frozen(self.rates))

    @property
    def daily_rate(self) -> np.ndarray:
        """Per-day rate: the 1-year rate divided by 365."""
        return self.rates[:, :, self.maturities.index(1)] / 365.0


@dataclass
class CleaningRecord:
    t: int
    field: str
    action: str
    value: float

    def line(self) -> str:
        return f"{self.t},{self.field},{self.action},{self.value!r}"


@dataclass
class CleaningLog:
    records: list = field(default_factory=list)

    def add(self, r: int, fld: str, action: str, value: float) -> None:
        self.records.append(CleaningRecord(r + 1, fld, action, float(value)))

    def __len__(self) -> int:
        return len(self.records)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


@dataclass(frozen=True)
class OutlierRule:
    """Drop observations of one series outside ``[lower, upper]`` within a date range.

    ``field`` is ``"fx"`` (key ``(base, quote)``) or ``"ir"`` (key ``(currency,)``;
    applied to every maturity).
    """

    field: str
    key: tuple
    start: date
    end: date
    lower: float | None = None
    upper: float | None = None


@dataclass(frozen=True)
class CleaningConfig:
    fx_ffill_limit: int = 7
    ir_ffill_limit: int = 30
    scale_factors: tuple = ()
    scale_tolerance: float = 1.5
    outlier_rules: tuple = ()

    def __post_init__(self):
        if self.fx_ffill_limit < 0 or self.ir_ffill_limit < 0:
            raise ValueError("forward-fill limits must be >= 0")
        if any(f <= 1 for f in self.scale_factors):
            raise ValueError("scale factors must exceed 1")


@dataclass(frozen=True)
class SyntheticConfig:
    n_currencies: int = 10
    n_days: int = 2000
    sigma_alpha: float = 0.001
    signal_strength: float = 0.0
    fx_vol: float = 0.005
    ir_level: float = 0.03
    ir_vol: float = 0.0003
    missing_prob: float = 0.0
    seed: int = 0
    start: date = date(2000, 1, 3)

    def __post_init__(self):
        if self.n_currencies < 2:
            raise ValueError("need at least two currencies")
        if self.n_days < 2:
            raise ValueError("need at least two days")
        if self.sigma_alpha < 0:
            raise ValueError("sigma_alpha must be >= 0")
        if not abs(self.signal_strength) < 1:
            raise ValueError("|signal_strength| must be < 1")
        if not 0 <= self.missing_prob < 1:
            raise ValueError("missing_prob must lie in [0, 1)")


@dataclass(frozen=True)
class GroundTruth:
    log_values: np.ndarray  # (T, n)
    increments: np.ndarray  # (T, n)
    alpha: np.ndarray  # (T, n, n), antisymmetric


# ---------------------------------------------------------------- ingestion

def _parse_date(s: str, lineno: int, path: Path) -> date:
    try:
        return date.fromisoformat(s.strip())
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: bad date {s!r}") from exc


def _parse_float(s: str, lineno: int, path: Path) -> float:
    try:
        v = float(s)
    except ValueError as exc:
        raise ParseError(f"{path}:{lineno}: bad number {s!r}") from exc
    if not math.isfinite(v):
        raise ParseError(f"{path}:{lineno}: non-finite number {s!r}")
    return v


def _read_rows(path: Path, header: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != list(header):
            raise ParseError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def load_panels(fx_path, ir_path, calendar: TradingCalendar, currencies: Sequence[str] | None = None):
    """Read ``date,base,quote,rate`` and ``date,currency,maturity_years,rate`` files.

    Rows dated off the calendar are dropped and counted in ``dropped_rows``.
    """
    fx_path, ir_path = Path(fx_path), Path(ir_path)
    fx_rows, ir_rows = [], []
    fx_dropped = ir_dropped = 0
    for lineno, (d, b, q, v) in _read_rows(fx_path, ("date", "base", "quote", "rate")):
        dt = _parse_date(d, lineno, fx_path)
        rate = _parse_float(v, lineno, fx_path)
        if rate <= 0:
            raise DomainError(f"{fx_path}:{lineno}: non-positive rate {rate}")
        if b == q:
            raise ParseError(f"{fx_path}:{lineno}: base equals quote")
        if dt not in calendar:
            fx_dropped += 1
            continue
        fx_rows.append((lineno, dt, b, q, rate))
    for lineno, (d, c, m, v) in _read_rows(ir_path, ("date", "currency", "maturity_years", "rate")):
        dt = _parse_date(d, lineno, ir_path)
        mat = _parse_float(m, lineno, ir_path)
        if mat not in MATURITIES:
            raise ParseError(f"{ir_path}:{lineno}: maturity {m} not in {MATURITIES}")
        rate = _parse_float(v, lineno, ir_path)
        if dt not in calendar:
            ir_dropped += 1
            continue
        ir_rows.append((lineno, dt, c, int(mat), rate))
    if fx_dropped or ir_dropped:
        logger.warning("dropped %d FX and %d IR rows dated off the calendar", fx_dropped, ir_dropped)

    if currencies is None:
        codes = sorted({r[2] for r in fx_rows} | {r[3] for r in fx_rows} | {r[2] for r in ir_rows})
    else:
        codes = list(currencies)
    pos = {c: k for k, c in enumerate(codes)}
    T, n = len(calendar), len(codes)

    fx = np.full((T, n, n), np.nan)
    for lineno, dt, b, q, rate in fx_rows:
        if b not in pos or q not in pos:
            raise IngestionError(f"{fx_path}:{lineno}: unknown currency in {b}/{q}")
        r, i, j = calendar.row(dt), pos[b], pos[q]
        if not np.isnan(fx[r, i, j]):
            raise IngestionError(f"{fx_path}:{lineno}: duplicate key ({dt}, {b}, {q})")
        fx[r, i, j] = rate
    ir = np.full((T, n, len(MATURITIES)), np.nan)
    for lineno, dt, c, mat, rate in ir_rows:
        if c not in pos:
            raise IngestionError(f"{ir_path}:{lineno}: unknown currency {c}")
        r, i, m = calendar.row(dt), pos[c], MATURITIES.index(mat)
        if not np.isnan(ir[r, i, m]):
            raise IngestionError(f"{ir_path}:{lineno}: duplicate key ({dt}, {c}, {mat})")
        ir[r, i, m] = rate
    return (
        FxPanel(calendar, tuple(codes), fx, dropped_rows=fx_dropped),
        IrPanel(calendar, tuple(codes), ir, dropped_rows=ir_dropped),
    )


def write_panels(fx: FxPanel, ir: IrPanel, fx_path, ir_path) -> None:
    with open(fx_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "base", "quote", "rate"])
        rr, ii, jj = np.nonzero(~np.isnan(fx.rates))
        for r, i, j in zip(rr, ii, jj):
            w.writerow([fx.calendar.dates[r].isoformat(), fx.currencies[i], fx.currencies[j], repr(float(fx.rates[r, i, j]))])
    with open(ir_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "currency", "maturity_years", "rate"])
        rr, ii, mm = np.nonzero(~np.isnan(ir.rates))
        for r, i, m in zip(rr, ii, mm):
            w.writerow([ir.calendar.dates[r].isoformat(), ir.currencies[i], ir.maturities[m], repr(float(ir.rates[r, i, m]))])


# ---------------------------------------------------------------- cleaning

def symmetrize_rates(panel: FxPanel) -> FxPanel:
    """Replace each reciprocal pair by the geometric mean of X_ij and 1/X_ji."""
    x = panel.rates
    if np.any(x[~np.isnan(x)] <= 0):
        raise DomainError("non-positive FX rate")
    xt = np.swapaxes(x, 1, 2)
    both = ~np.isnan(x) & ~np.isnan(xt)
    out = x.copy()
    with np.errstate(invalid="ignore"):
        upper = np.triu(np.ones(x.shape[1:], dtype=bool), 1)
        sel = both & upper
        s = np.sqrt(x[sel] / xt[sel])
        out[sel] = s
        low = np.swapaxes(sel, 1, 2)
        # X'_ji = 1 / X'_ij, written through the transposed mask
        out_t = np.swapaxes(out, 1, 2)
        out[low] = 1.0 / out_t[low]
    one_sided = ~np.isnan(x) & np.isnan(xt)
    return FxPanel(panel.calendar, panel.currencies, out, panel.filled, one_sided, panel.dropped_rows)


def forward_fill(a: np.ndarray, limit: int) -> np.ndarray:
    """Fill NaNs along axis 0 from the last observation, at most ``limit`` rows ahead."""
    T = a.shape[0]
    valid = ~np.isnan(a)
    idx = np.where(valid, np.arange(T).reshape((T,) + (1,) * (a.ndim - 1)), -1)
    last = np.maximum.accumulate(idx, axis=0)
    gap = np.arange(T).reshape((T,) + (1,) * (a.ndim - 1)) - last
    take = ~valid & (last >= 0) & (gap <= limit)
    out = a.copy()
    src = np.take_along_axis(a, np.clip(last, 0, None), axis=0)
    out[take] = src[take]
    return out


def impute_log_maturity(rates: np.ndarray, maturities: Sequence[float]) -> np.ndarray:
    """Least-squares fit of rate on log(maturity) per row; fill the missing maturities."""
    x = np.log(np.asarray(maturities, dtype=float))
    out = rates.copy()
    flat = out.reshape(-1, len(maturities))
    for row in flat:
        ok = ~np.isnan(row)
        if ok.all() or ok.sum() < 2:
            continue
        slope, icpt = np.polyfit(x[ok], row[ok], 1)
        row[~ok] = icpt + slope * x[~ok]
    return out


def _rescale_series(s: np.ndarray, factors, tol: float) -> list[tuple[int, float]]:
    """Divide out mis-scaling by a permissible factor relative to the prior valid value."""
    fixes = []
    prev = None
    logtol = math.log(tol)
    for r in range(len(s)):
        v = s[r]
        if np.isnan(v):
            continue
        if prev is not None:
            ratio = math.log(v / prev)
            for f in factors:
                lf = math.log(f)
                if abs(ratio - lf) < logtol:
                    s[r] = v / f
                    fixes.append((r, f))
                    break
                if abs(ratio + lf) < logtol:
                    s[r] = v * f
                    fixes.append((r, 1.0 / f))
                    break
        prev = s[r]
    return fixes


def clean_panels(fx: FxPanel, ir: IrPanel, cfg: CleaningConfig = CleaningConfig()):
    """Apply configured corrections, fill IR gaps, and build the FX shadow panel.

    Returns ``(fx, ir, log)``.  The FX forward fill is stored in ``fx.filled``
    only; ``fx.rates`` keeps its gaps so that edge sets reflect true tradability.
    """
    if fx.calendar != ir.calendar:
        raise MarketDataError("panels are on different calendars")
    log = CleaningLog()
    x = fx.rates.copy()
    y = ir.rates.copy()
    codes = fx.currencies
    dates = fx.calendar.dates

    if cfg.scale_factors:
        for i in range(fx.n):
            for j in range(fx.n):
                if i == j:
                    continue
                for r, f in _rescale_series(x[:, i, j], sorted(cfg.scale_factors), cfg.scale_tolerance):
                    log.add(r, f"fx:{codes[i]}/{codes[j]}", "rescale", f)

    for rule in cfg.outlier_rules:
        rows = [r for r, d in enumerate(dates) if rule.start <= d <= rule.end]
        if rule.field == "fx":
            i, j = codes.index(rule.key[0]), codes.index(rule.key[1])
            cells = [(r, (i, j), f"fx:{rule.key[0]}/{rule.key[1]}") for r in rows]
            target = x
        elif rule.field == "ir":
            i = ir.currencies.index(rule.key[0])
            cells = [(r, (i, m), f"ir:{rule.key[0]}:{ir.maturities[m]}") for r in rows for m in range(len(ir.maturities))]
            target = y
        else:
            raise ValueError(f"unknown outlier field {rule.field!r}")
        for r, (a, b), name in cells:
            v = target[r, a, b]
            if np.isnan(v):
                continue
            if (rule.lower is not None and v < rule.lower) or (rule.upper is not None and v > rule.upper):
                target[r, a, b] = np.nan
                log.add(r, name, "remove", v)

    y_filled = forward_fill(y, cfg.ir_ffill_limit)
    for r, i, m in zip(*np.nonzero(np.isnan(y) & ~np.isnan(y_filled))):
        log.add(r, f"ir:{ir.currencies[i]}:{ir.maturities[m]}", "ffill", y_filled[r, i, m])
    y_imp = impute_log_maturity(y_filled, ir.maturities)
    for r, i, m in zip(*np.nonzero(np.isnan(y_filled) & ~np.isnan(y_imp))):
        log.add(r, f"ir:{ir.currencies[i]}:{ir.maturities[m]}", "impute", y_imp[r, i, m])
    for r, i, m in zip(*np.nonzero(np.isnan(y_imp))):
        log.add(r, f"ir:{ir.currencies[i]}:{ir.maturities[m]}", "missing", float("nan"))

    x_filled = forward_fill(x, cfg.fx_ffill_limit)
    return (
        FxPanel(fx.calendar, fx.currencies, x, x_filled, fx.one_sided, fx.dropped_rows),
        IrPanel(ir.calendar, ir.currencies, y_imp, ir.maturities, ir.dropped_rows),
        log,
    )


# ---------------------------------------------------------------- synthetic

def currency_codes(n: int) -> tuple:
    extra = [f"X{k:02d}" for k in range(max(0, n - len(DEFAULT_CODES)))]
    return tuple((list(DEFAULT_CODES) + extra)[:n])


def generate_synthetic(cfg: SyntheticConfig):
    """Draw a market with AR(1) currency-value increments and Gaussian arbitrage noise.

    ``log X_tij = logV_ti - logV_tj + alpha_tij`` with ``alpha`` antisymmetric,
    drawn once per unordered pair per day.
    """
    rng = np.random.default_rng(cfg.seed)
    T, n = cfg.n_days, cfg.n_currencies
    cal = TradingCalendar.weekdays(cfg.start, n=T)
    codes = currency_codes(n)

    innov = rng.normal(0.0, cfg.fx_vol, size=(T, n))
    eps = np.empty((T, n))
    eps[0] = innov[0]
    for r in range(1, T):
        eps[r] = cfg.signal_strength * eps[r - 1] + innov[r]
    logv = np.cumsum(eps, axis=0)

    iu, ju = np.triu_indices(n, 1)
    alpha = np.zeros((T, n, n))
    draws = rng.normal(0.0, cfg.sigma_alpha, size=(T, len(iu))) if cfg.sigma_alpha > 0 else np.zeros((T, len(iu)))
    alpha[:, iu, ju] = draws
    alpha[:, ju, iu] = -draws

    logx = logv[:, :, None] - logv[:, None, :] + alpha
    x = np.exp(logx)
    diag = np.arange(n)
    x[:, diag, diag] = np.nan

    level = np.clip(cfg.ir_level + rng.normal(0.0, 0.01, size=n), 0.001, None)
    slope = rng.uniform(0.0, 0.003, size=n)
    r1 = np.empty((T, n))
    r1[0] = level
    shocks = rng.normal(0.0, cfg.ir_vol, size=(T, n))
    for r in range(1, T):
        r1[r] = np.clip(r1[r - 1] + 0.01 * (level - r1[r - 1]) + shocks[r], 1e-4, None)
    ir = r1[:, :, None] + slope[None, :, None] * np.log(np.asarray(MATURITIES, dtype=float))[None, None, :]

    if cfg.missing_prob > 0:
        miss = rng.random(size=x.shape) < cfg.missing_prob
        x[miss] = np.nan
        ir[rng.random(size=ir.shape) < cfg.missing_prob] = np.nan

    fx = symmetrize_rates(FxPanel(cal, codes, x))
    truth = GroundTruth(_frozen(logv), _frozen(eps), _frozen(alpha))
    return fx, IrPanel(cal, codes, ir), truth
