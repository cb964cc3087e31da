"""Currency graphs, least-squares currency values, and prediction-stage features.

Every per-date builder reads market data through a :class:`PanelView`, which
raises :class:`~fxarb.market_data.LeakageError` on any rate, interest-rate or
currency-value read dated at or after its decision row.  Tradability masks
(which pairs are quoted) count as schedule information and may be read
through the decision row itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .market_data import FxPanel, IrPanel, LeakageError

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS = (1, 3, 5, 10, 15, 20)


class InsufficientHistoryError(ValueError):
    pass


def check_windows(windows: Sequence[int]) -> tuple:
    w = tuple(int(x) for x in windows)
    if not w or any(x < 1 for x in w) or list(w) != sorted(set(w)):
        raise ValueError(f"look-back windows must be sorted, distinct and >= 1: {windows}")
    return w


# ---------------------------------------------------------------- edge sets

@dataclass(frozen=True)
class GraphSnapshot:
    currencies: tuple
    edges: frozenset
    node_rates: Mapping
    edge_rates: Mapping

    def __post_init__(self):
        for (i, j) in self.edges:
            if i == j:
                raise ValueError("self-loop in edge set")
        if any(v <= 0 for v in self.edge_rates.values()):
            raise ValueError("edge rates must be positive")


@dataclass(frozen=True)
class ReciprocalEdgeSet:
    links: frozenset

    def __contains__(self, e) -> bool:
        return e in self.links

    def __len__(self) -> int:
        return len(self.links)


def snapshot(fx: FxPanel, ir: IrPanel, r: int) -> GraphSnapshot:
    x = fx.rates[r]
    n = fx.n
    edges = frozenset((i, j) for i in range(n) for j in range(n) if i != j and not np.isnan(x[i, j]))
    y = ir.daily_rate[r]
    return GraphSnapshot(
        tuple(range(n)),
        edges,
        {i: float(y[i]) for i in range(n) if not np.isnan(y[i])},
        {e: float(x[e]) for e in edges},
    )


def reciprocal_edges(snap: GraphSnapshot) -> ReciprocalEdgeSet:
    return ReciprocalEdgeSet(frozenset(e for e in snap.edges if (e[1], e[0]) in snap.edges))


def reciprocal_mask(present: np.ndarray) -> np.ndarray:
    """``L`` from ``E`` on boolean ``(..., n, n)`` masks."""
    return present & np.swapaxes(present, -1, -2)


# ---------------------------------------------------------------- currency values

@dataclass(frozen=True)
class CurrencyValues:
    currencies: tuple
    log_values: np.ndarray
    residuals: Mapping  # (i, j) with i < j -> logX - logV_i + logV_j
    disconnected: bool = False
    isolated: tuple = ()


def _solve_pattern(upper: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Least squares for one link pattern and many right-hand sides.

    ``upper`` is an ``(n, n)`` boolean mask over pairs ``i < j``; ``y`` holds the
    corresponding log rates for each date, shape ``(B, n_links)``.  Each
    connected component gets its own mean-zero row; isolated nodes get 0.
    """
    n = upper.shape[0]
    ii, jj = np.nonzero(upper)
    v = np.zeros((y.shape[0], n))
    isolated = np.ones(n, dtype=bool)
    if len(ii) == 0:
        return v, isolated, n > 1
    adj = csr_matrix((np.ones(len(ii)), (ii, jj)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    inc = np.zeros((len(ii), n))
    inc[np.arange(len(ii)), ii] = 1.0
    inc[np.arange(len(ii)), jj] = -1.0
    deg = np.bincount(np.concatenate([ii, jj]), minlength=n)
    isolated = deg == 0
    rhs = y @ inc  # (B, n) = (inc^T y)^T
    normal = inc.T @ inc
    for c in range(ncomp):
        nodes = np.nonzero(labels == c)[0]
        if len(nodes) < 2:
            continue
        k = len(nodes)
        block = normal[np.ix_(nodes, nodes)] + 1.0 / k**2  # mean row (1/k)·1ᵀ appended with unit weight
        v[:, nodes] = np.linalg.solve(block, rhs[:, nodes].T).T
    return v, isolated, ncomp > 1


def solve_currency_values(log_rates: np.ndarray, link_mask: np.ndarray):
    """Vectorized currency values over dates.

    ``log_rates`` and ``link_mask`` are ``(T, n, n)``; only pairs ``i < j`` of
    the mask are used.  Returns ``(log_values (T, n), isolated (T, n),
    disconnected (T,))``.  Dates sharing a link pattern share one factorization.
    """
    T, n, _ = log_rates.shape
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    pat = (link_mask & upper).reshape(T, -1)
    logv = np.zeros((T, n))
    iso = np.ones((T, n), dtype=bool)
    disc = np.zeros(T, dtype=bool)
    if T == 0:
        return logv, iso, disc
    uniq, inv = np.unique(pat, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    for g in range(len(uniq)):
        rows = np.nonzero(inv == g)[0]
        m = uniq[g].reshape(n, n)
        ii, jj = np.nonzero(m)
        y = log_rates[rows][:, ii, jj]
        v, isolated, d = _solve_pattern(m, y)
        logv[rows] = v
        iso[rows] = isolated
        disc[rows] = d
    return logv, iso, disc


def currency_values(log_rates: Mapping, links: Iterable, currencies: Sequence) -> CurrencyValues:
    """Least-squares log values with mean zero, plus residuals on links ``i < j``.

    ``log_rates`` maps ``(i, j)`` to ``log X_ij``; ``links`` is a reciprocal edge
    set over positions ``0..n-1`` of ``currencies``.
    """
    n = len(currencies)
    link_set = links.links if isinstance(links, ReciprocalEdgeSet) else frozenset(links)
    upper = np.zeros((n, n), dtype=bool)
    for (i, j) in link_set:
        if i < j:
            upper[i, j] = True
        elif i > j and (j, i) not in link_set:
            raise ValueError(f"link set not reciprocal at {(i, j)}")
    ii, jj = np.nonzero(upper)
    y = np.array([[log_rates[(i, j)] for i, j in zip(ii, jj)]])
    v, isolated, disc = _solve_pattern(upper, y)
    v = v[0]
    res = {(int(i), int(j)): float(log_rates[(i, j)] - v[i] + v[j]) for i, j in zip(ii, jj)}
    if disc:
        logger.info("currency graph disconnected; solved per component")
    return CurrencyValues(tuple(currencies), v, res, bool(disc), tuple(int(k) for k in np.nonzero(isolated)[0]))


# ---------------------------------------------------------------- market state and guard

class Market:
    """Panels plus per-row derived tables (edge masks, currency values, daily IR).

    Every derived table row depends only on the panel row of the same date.
    """

    def __init__(self, fx: FxPanel, ir: IrPanel, windows: Sequence[int] = DEFAULT_WINDOWS):
        if fx.currencies != ir.currencies:
            raise ValueError("FX and IR panels cover different currencies")
        self.fx = fx
        self.ir = ir
        self.windows = check_windows(windows)
        self.calendar = fx.calendar
        self.currencies = fx.currencies
        self.n = fx.n
        self.T = len(fx.calendar)
        present = ~np.isnan(fx.rates)
        self.tradable = present
        self.links = reciprocal_mask(present)
        shadow = fx.shadow()
        shadow_links = reciprocal_mask(~np.isnan(shadow))
        with np.errstate(invalid="ignore", divide="ignore"):
            logx = np.where(shadow_links, np.log(np.where(shadow_links, shadow, 1.0)), 0.0)
        self.log_values, self.value_isolated, self.value_disconnected = solve_currency_values(logx, shadow_links)
        self.daily_ir = ir.daily_rate
        self._features: dict = {}

    @property
    def max_window(self) -> int:
        return self.windows[-1]

    @property
    def first_usable(self) -> int:
        """First prediction row whose feature graph has full look-back history."""
        return self.max_window + 1

    def view(self, decision: int) -> "PanelView":
        return PanelView(self, decision)

    def feature_graph(self, t: int) -> "FeatureGraph":
        g = self._features.get(t)
        if g is None:
            g = build_feature_graph(self.view(t), t, self.windows)
            self._features[t] = g
        return g


class PanelView:
    """Read-only window onto a :class:`Market` that refuses reads at rows >= ``decision``."""

    def __init__(self, market: Market, decision: int):
        self.market = market
        self.decision = int(decision)
        self.max_row_read = -1

    def _check(self, lo: int, hi: int, limit: int, what: str) -> None:
        if lo < 0:
            raise InsufficientHistoryError(f"{what}: read from row {lo} before the first date")
        if hi > limit:
            raise LeakageError(f"{what}: read of row {hi - 1} at decision row {self.decision}")
        self.max_row_read = max(self.max_row_read, hi - 1)

    def rates(self, lo: int, hi: int) -> np.ndarray:
        self._check(lo, hi, self.decision, "fx rates")
        return self.market.fx.rates[lo:hi]

    def log_values(self, lo: int, hi: int):
        self._check(lo, hi, self.decision, "currency values")
        return self.market.log_values[lo:hi], self.market.value_isolated[lo:hi]

    def daily_ir(self, lo: int, hi: int) -> np.ndarray:
        self._check(lo, hi, self.decision, "interest rates")
        return self.market.daily_ir[lo:hi]

    def links(self, lo: int, hi: int) -> np.ndarray:
        self._check(lo, hi, self.decision + 1, "links")
        return self.market.links[lo:hi]

    def tradable(self, lo: int, hi: int) -> np.ndarray:
        self._check(lo, hi, self.decision + 1, "tradable pairs")
        return self.market.tradable[lo:hi]


# ---------------------------------------------------------------- features

def _window_means(diffs: np.ndarray, mask: np.ndarray, windows: Sequence[int]):
    """Masked means of the last ``w`` rows for each window; 0 where no row qualifies."""
    rev_sum = np.cumsum((np.where(mask, diffs, 0.0))[::-1], axis=0)
    rev_cnt = np.cumsum(mask[::-1], axis=0)
    idx = np.asarray(windows) - 1
    s, c = rev_sum[idx], rev_cnt[idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(c > 0, s / np.maximum(c, 1), 0.0)
    return np.moveaxis(out, 0, -1), np.moveaxis(c, 0, -1)


def edge_momentum_features(view: PanelView, s: int, windows: Sequence[int]):
    """Masked average log-returns of every pair over each look-back window ending at ``s``.

    Returns ``(x, coverage)``, both ``(n, n, len(windows))``; ``coverage`` counts
    the qualifying dates (0 means the component defaulted to 0).
    """
    W = max(windows)
    x = view.rates(s - W, s + 1)
    L = view.links(s - W, s + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        lr = np.log(x[1:] / x[:-1])
    m = L[1:] & L[:-1]
    return _window_means(lr, m, windows)


def _plain_window_means(levels: np.ndarray, windows: Sequence[int]) -> np.ndarray:
    """``(1/w)·Σ`` of the last ``w`` first differences; NaN if any needed level is missing."""
    d = np.diff(levels, axis=0)
    bad = np.isnan(d)
    rev_sum = np.cumsum(np.where(bad, 0.0, d)[::-1], axis=0)
    rev_bad = np.cumsum(bad[::-1], axis=0)
    idx = np.asarray(windows) - 1
    w = np.asarray(windows, dtype=float).reshape((-1,) + (1,) * (levels.ndim - 1))
    out = np.where(rev_bad[idx] > 0, np.nan, rev_sum[idx] / w)
    return np.moveaxis(out, 0, -1)


def node_features(view: PanelView, s: int, windows: Sequence[int]) -> np.ndarray:
    """``[y ; v]`` per currency, ``(n, 2·len(windows))``; rows with a missing input are NaN."""
    W = max(windows)
    y = view.daily_ir(s - W, s + 1)
    logv, iso = view.log_values(s - W, s + 1)
    yf = _plain_window_means(np.log1p(y), windows)
    lv = np.where(iso, np.nan, logv)
    vf = _plain_window_means(lv, windows)
    return np.concatenate([yf, vf], axis=1)


@dataclass(frozen=True)
class FeatureGraph:
    """Feature graph at ``t - 1`` for predicting row ``t``."""

    t: int
    node_features: np.ndarray  # (n, 2R)
    node_mask: np.ndarray  # (n,)
    edge_features: np.ndarray  # (n, n, R)
    edge_mask: np.ndarray  # (n, n): L_{t-1} ∩ L_{t-2} minus excluded nodes
    pred_mask: np.ndarray  # (n, n): U_t minus excluded nodes
    prev_rates: np.ndarray  # (n, n): X_{t-1}, NaN off-link
    coverage: np.ndarray  # (n, n, R)

    def lines(self, calendar_index: int | None = None) -> list[str]:
        t = self.t + 1 if calendar_index is None else calendar_index
        out = []
        for i in np.nonzero(self.node_mask)[0]:
            out.append(",".join([str(t), "node", str(i)] + [repr(float(v)) for v in self.node_features[i]]))
        for i, j in zip(*np.nonzero(self.edge_mask)):
            out.append(",".join([str(t), "edge", str(i), str(j)] + [repr(float(v)) for v in self.edge_features[i, j]]))
        return out


def prediction_edge_set(view: PanelView, t: int) -> np.ndarray:
    """``U_t = L_t ∩ L_{t-1} ∩ L_{t-2}`` as an ``(n, n)`` mask."""
    L = view.links(t - 2, t + 1)
    return L[0] & L[1] & L[2]


def build_feature_graph(view: PanelView, t: int, windows: Sequence[int]) -> FeatureGraph:
    windows = check_windows(windows)
    first = max(windows) + 1
    if t < first:
        cal = view.market.calendar
        raise InsufficientHistoryError(
            f"row {t} lacks look-back history; first usable date is {cal.dates[first]} (index {first + 1})"
        )
    s = t - 1
    x, cov = edge_momentum_features(view, s, windows)
    c = node_features(view, s, windows)
    L = view.links(s - 1, s + 1)
    edges = L[0] & L[1]
    node_ok = ~np.isnan(c).any(axis=1)
    if not node_ok.all():
        logger.debug("row %d: %d currencies lack node features", t, int((~node_ok).sum()))
    keep = node_ok[:, None] & node_ok[None, :]
    edges = edges & keep
    pred = prediction_edge_set(view, t) & keep
    prev = view.rates(s, s + 1)[0]
    x = np.where(edges[..., None], x, 0.0)
    c = np.where(node_ok[:, None], c, 0.0)
    return FeatureGraph(t, c, node_ok, x, edges, pred, np.where(pred | edges, prev, np.nan), cov)


def scale_target(x_new, x_prev):
    """Log ratio of the next rate to the previous one."""
    return np.log(np.asarray(x_new, dtype=float) / np.asarray(x_prev, dtype=float))


def unscale_prediction(z, x_prev):
    return np.asarray(x_prev, dtype=float) * np.exp(z)


def targets(view: PanelView, t: int, pred_mask: np.ndarray) -> np.ndarray:
    """Scaled targets on ``pred_mask`` at row ``t`` (NaN elsewhere); reads row ``t``."""
    x = view.rates(t - 1, t + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.log(x[1] / x[0])
    return np.where(pred_mask, z, np.nan)
