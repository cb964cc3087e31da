"""Stage 2: statistical arbitrage on predicted rates.

Given symmetrized predictions ``X̂'`` on the tradable links ``U'_t``, trade
weights must satisfy

    Σ w = 1,   w >= 0,   w_ij · w_ji = 0,   Ĥ_i = 0 for every i != o,

where ``Ĥ`` are predicted end-of-day holdings.  The network emits a raw score
``u'`` per exchange; projecting onto the kernel of the flow and pair rows and
normalizing the positive part lands exactly in that set.

Exchanges ``(i, j)`` are indexed uniformly over all ``n(n-1)`` ordered pairs in
row-major order, so per-date quantities can be stacked across dates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import neural as nn
from .fx_graph import Market, prediction_edge_set, solve_currency_values
from .fxrp import HyperGrid, PredictionStore, Split, TrainConfig, derive_seed
from .neural import autodiff as ad

logger = logging.getLogger(__name__)

DEGENERATE_FLOOR = 1e-12
EPS_VAR = 1e-12
EPS_S = 1e-8
SUM_TOL = 1e-12
HOLDING_TOL = 1e-9


class ConstraintError(ValueError):
    pass


# ---------------------------------------------------------------- indexing

def exchange_index(n: int) -> np.ndarray:
    """``(n, n)`` map from ordered pair to uniform exchange index; -1 on the diagonal."""
    idx = np.full((n, n), -1, dtype=int)
    off = ~np.eye(n, dtype=bool)
    idx[off] = np.arange(n * (n - 1))
    return idx


def exchange_pairs(n: int) -> np.ndarray:
    return np.argwhere(~np.eye(n, dtype=bool))


def pair_index(n: int) -> np.ndarray:
    """``(n, n)`` map from either orientation of ``{i, j}`` to the unordered pair index."""
    idx = np.full((n, n), -1, dtype=int)
    iu, ju = np.triu_indices(n, 1)
    idx[iu, ju] = np.arange(len(iu))
    idx[ju, iu] = np.arange(len(iu))
    return idx


def _home_row(xs: np.ndarray, home: int) -> np.ndarray:
    """``X̂'_{o,i}`` with the convention ``X̂'_{o,o} = 1``."""
    xo = np.array(xs[home], dtype=float)
    xo[home] = 1.0
    return xo


# ---------------------------------------------------------------- links

@dataclass(frozen=True)
class TradableLinks:
    home: int
    mask: np.ndarray  # (n, n) bool, symmetric, empty diagonal

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    def pairs(self) -> np.ndarray:
        """Links in canonical (row-major) order."""
        return np.argwhere(self.mask)

    def __len__(self) -> int:
        return int(self.mask.sum())


def tradable_links(u: np.ndarray, e: np.ndarray, home: int) -> TradableLinks:
    """Largest symmetric subset of ``U_t`` whose endpoints ``i`` have ``(o, i)`` in ``U_t``
    and ``(i, o)`` in ``E_t`` (both trivially true for ``i = o``)."""
    u = np.asarray(u, dtype=bool)
    e = np.asarray(e, dtype=bool)
    n = u.shape[0]
    ok = u[home] & e[:, home]
    ok[home] = True
    mask = u & ok[:, None] & ok[None, :]
    mask &= mask.T
    mask[np.arange(n), np.arange(n)] = False
    return TradableLinks(home, mask)


def symmetrize_predictions(xhat: np.ndarray, mask: np.ndarray | None = None):
    """``X̂'_ij = sqrt(X̂_ij / X̂_ji)`` with ``X̂'_ji = 1 / X̂'_ij``.

    Returns ``(xs, ok)``; pairs predicted in only one direction are dropped
    (``ok`` False, ``xs`` NaN).
    """
    x = np.asarray(xhat, dtype=float)
    n = x.shape[0]
    good = np.isfinite(x) & (x > 0)
    if mask is not None:
        good &= np.asarray(mask, dtype=bool)
    ok = good & good.T
    ok[np.arange(n), np.arange(n)] = False
    xs = np.full((n, n), np.nan)
    iu, ju = np.nonzero(np.triu(ok, 1))
    up = np.sqrt(x[iu, ju] / x[ju, iu])
    xs[iu, ju] = up
    xs[ju, iu] = 1.0 / up
    return xs, ok


def restrict(links: TradableLinks, ok: np.ndarray) -> TradableLinks:
    """Intersect with a symmetric pair mask, re-applying the home-leg conditions."""
    mask = links.mask & ok
    o = links.home
    node = mask[o].copy()
    node[o] = True
    mask &= node[:, None] & node[None, :]
    return TradableLinks(o, mask)


# ---------------------------------------------------------------- constraints

@dataclass(frozen=True)
class ConstraintSystem:
    """Flow and pair rows over the links of ``U'_t`` and the kernel projector.

    ``pairs`` lists links in canonical order; ``fwd``/``bwd`` give the link
    positions of ``(i, j)`` and ``(j, i)`` for each unordered pair ``i < j``,
    and ``ratio`` is ``X̂'_oi / (X̂'_oj X̂'_ji)``, so every kernel vector has
    ``u_ji = -ratio · u_ij``.
    """

    home: int
    n: int
    pairs: np.ndarray  # (m, 2)
    fwd: np.ndarray  # (p,)
    bwd: np.ndarray  # (p,)
    ratio: np.ndarray  # (p,)
    A: np.ndarray  # (n - 1 + p, m)
    basis: np.ndarray  # (m, k)
    reducer: np.ndarray  # (p, m): pair coordinates of the projection
    proj: np.ndarray  # (m, m)

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def lift(self, d: np.ndarray) -> np.ndarray:
        """Pair coordinates ``(p, ...)`` to link coordinates ``(m, ...)``."""
        u = np.zeros((self.m,) + d.shape[1:])
        u[self.fwd] = d
        u[self.bwd] = -self.ratio.reshape((-1,) + (1,) * (d.ndim - 1)) * d
        return u

    def project(self, u_raw: np.ndarray) -> np.ndarray:
        """``P̂ u'`` evaluated so that each pair's two entries have opposite signs exactly."""
        if self.m == 0:
            return np.zeros(0)
        return self.lift(self.reducer @ np.asarray(u_raw, dtype=float))

    def dump(self) -> str:
        lines = [f"# links {self.m} kernel_dim {self.dim}"]
        lines.append("link," + ",".join(f"{i}-{j}" for i, j in self.pairs))
        for name, mat in (("A", self.A), ("basis", self.basis.T), ("proj", self.proj)):
            for r, row in enumerate(mat):
                lines.append(f"{name}[{r}]," + ",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"


def build_constraints(links: TradableLinks, xs: np.ndarray) -> ConstraintSystem:
    """Rows ``Σ_j u_ij = 0`` (``i != o``) and ``X̂'_oi u_ij + X̂'_oj X̂'_ji u_ji = 0`` (``i < j``).

    The kernel is taken in pair coordinates, where the second family holds by
    construction, with an SVD cut at ``1e-10`` times the largest row norm; the
    orthonormal link-space basis follows from a QR step.
    """
    n, o = links.n, links.home
    pairs = links.pairs()
    m = len(pairs)
    pos = {(int(i), int(j)): k for k, (i, j) in enumerate(pairs)}
    up = [(i, j) for i, j in pos if i < j]
    fwd = np.array([pos[p] for p in up], dtype=int)
    bwd = np.array([pos[(j, i)] for i, j in up], dtype=int)
    xo = _home_row(xs, o)
    if m and not np.all(np.isfinite(xo[np.unique(pairs)])):
        raise ConstraintError("home-leg prediction missing for a linked currency")
    ii = np.array([p[0] for p in up], dtype=int)
    jj = np.array([p[1] for p in up], dtype=int)
    ratio = xo[ii] / (xo[jj] * xs[jj, ii]) if len(up) else np.zeros(0)
    others = [i for i in range(n) if i != o]
    row_of = {c: r for r, c in enumerate(others)}

    A = np.zeros((len(others) + len(up), m))
    for (i, j), k in pos.items():
        if i != o:
            A[row_of[i], k] = 1.0
    for r, (i, j) in enumerate(up):
        A[len(others) + r, fwd[r]] = xo[i]
        A[len(others) + r, bwd[r]] = xo[j] * xs[j, i]

    p = len(up)
    F = np.zeros((len(others), p))
    for r, (i, j) in enumerate(up):
        if i != o:
            F[row_of[i], r] += 1.0
        if j != o:
            F[row_of[j], r] -= ratio[r]

    empty = ConstraintSystem(o, n, pairs, fwd, bwd, ratio, A, np.zeros((m, 0)), np.zeros((p, m)), np.zeros((m, m)))
    if p == 0:
        return empty
    norms = np.linalg.norm(F, axis=1)
    tol = 1e-10 * (norms.max() if norms.size else 0.0)
    _, s, vt = np.linalg.svd(F, full_matrices=True)
    rank = int(np.sum(s > tol)) if tol > 0 else 0
    N = vt[rank:].T  # (p, k), orthonormal in pair space
    if N.shape[1] == 0:
        return empty
    sys0 = empty
    Z = sys0.lift(N)
    _, R = np.linalg.qr(Z)
    G = solve_triangular(R, N.T, trans="T").T  # N R^{-1}
    B = sys0.lift(G)
    reducer = G @ B.T
    proj = B @ B.T
    return ConstraintSystem(o, n, pairs, fwd, bwd, ratio, A, B, reducer, proj)


# ---------------------------------------------------------------- plans

@dataclass
class TradePlan:
    t: int
    home: int
    w: np.ndarray  # (n, n), zero off the link set
    degenerate: bool
    reason: str = ""
    cert_sum: float = 0.0
    cert_direct: float = 0.0
    cert_max_h: float = 0.0
    relu_ties: int = 0

    def lines(self, currencies: Sequence[str]) -> list[str]:
        out = []
        ii, jj = np.nonzero(self.w)
        for i, j in zip(ii, jj):
            out.append(f"{self.t + 1},{currencies[i]},{currencies[j]},{float(self.w[i, j])!r},{int(self.degenerate)},"
                       f"{float(self.cert_sum)!r},{float(self.cert_max_h)!r}")
        if not len(ii):
            out.append(f"{self.t + 1},,,0.0,{int(self.degenerate)},{float(self.cert_sum)!r},{float(self.cert_max_h)!r}")
        return out


PLAN_HEADER = "t,i,j,w,degenerate,cert_sum,cert_maxH"


def holdings_hat(w: np.ndarray, xs: np.ndarray, home: int) -> np.ndarray:
    """``Ĥ_i = Σ_j X̂'_ji X̂'_oj w_ji - Σ_j X̂'_oi w_ij``."""
    return _holdings(w, xs, _home_row(xs, home))


def _holdings(w, x_trade, xo):
    x = np.where(w > 0, x_trade, 0.0)
    inflow = ((x * xo[:, None]) * w).sum(axis=0)
    outflow = xo * w.sum(axis=1)
    return inflow - outflow


def degenerate_plan(t: int, n: int, home: int, reason: str) -> TradePlan:
    return TradePlan(t, home, np.zeros((n, n)), True, reason)


def certify(plan: TradePlan, xs: np.ndarray) -> TradePlan:
    w = plan.w
    h = holdings_hat(w, xs, plan.home)
    others = np.arange(len(h)) != plan.home
    plan.cert_sum = float(w.sum())
    plan.cert_direct = float((w * w.T).max()) if w.size else 0.0
    plan.cert_max_h = float(np.abs(h[others]).max()) if others.any() else 0.0
    return plan


def h_so(u_raw: np.ndarray, system: ConstraintSystem, t: int = -1, floor: float = DEGENERATE_FLOOR,
         xs: np.ndarray | None = None) -> TradePlan:
    """Project raw link scores onto the kernel and normalize the positive part."""
    n, o = system.n, system.home
    if system.m == 0:
        return degenerate_plan(t, n, o, "no tradable links")
    if system.dim == 0:
        return degenerate_plan(t, n, o, "no feasible direction")
    u_raw = np.asarray(u_raw, dtype=float)
    if not np.all(np.isfinite(u_raw)):
        return degenerate_plan(t, n, o, "non-finite scores")
    u = system.project(u_raw)
    pos = np.maximum(u, 0.0)
    total = pos.sum()
    if total <= floor:
        return degenerate_plan(t, n, o, "no positive projected score")
    w = np.zeros((n, n))
    w[system.pairs[:, 0], system.pairs[:, 1]] = pos / total
    plan = TradePlan(t, o, w, False, relu_ties=int(np.sum(u == 0.0)))
    if plan.relu_ties:
        logger.debug("row %d: %d projected scores exactly 0", t, plan.relu_ties)
    return certify(plan, xs) if xs is not None else plan


def verify_c1(w: np.ndarray, xs: np.ndarray, home: int) -> tuple[bool, list]:
    """Check budget, sign, no direct round trips and zero predicted off-home holdings."""
    w = np.asarray(w, dtype=float)
    bad = []
    if abs(w.sum() - 1.0) > SUM_TOL:
        bad.append(f"sum(w) = {w.sum()!r}")
    if (w < 0).any():
        bad.append(f"negative weight {w.min()!r}")
    prod = w * w.T
    if (prod != 0).any():
        i, j = np.unravel_index(np.argmax(prod), prod.shape)
        bad.append(f"both directions traded on ({i}, {j})")
    h = holdings_hat(w, xs, home)
    others = np.arange(len(h)) != home
    scale = max(1.0, float(np.nanmax(np.abs(np.where(np.isfinite(xs), xs, 0.0)))))
    if others.any() and np.abs(h[others]).max() > HOLDING_TOL * scale:
        bad.append(f"off-home holding {np.abs(h[others]).max()!r}")
    return not bad, bad


def c1_to_u(w: np.ndarray, xs: np.ndarray, links: TradableLinks) -> np.ndarray:
    """A kernel vector whose normalized positive part is ``w``.

    ``u_ij = w_ij`` where ``w_ij > 0``, else ``-(X̂'_oj X̂'_ji / X̂'_oi) w_ji``.
    """
    ok, why = verify_c1(w, xs, links.home)
    if not ok:
        raise ConstraintError("plan violates the trade constraints: " + "; ".join(why))
    xo = _home_row(xs, links.home)
    pairs = links.pairs()
    i, j = pairs[:, 0], pairs[:, 1]
    wij, wji = w[i, j], w[j, i]
    return np.where(wij > 0, wij, -(xo[j] * xs[j, i] / xo[i]) * wji)


def arbitrage_residuals(xs: np.ndarray, links: TradableLinks):
    """``α̂_ij = log X̂'_ij - log V̂_i + log V̂_j`` on the links; NaN elsewhere."""
    with np.errstate(invalid="ignore", divide="ignore"):
        logx = np.where(links.mask, np.log(np.where(links.mask, xs, 1.0)), 0.0)
    logv, iso, _ = solve_currency_values(logx[None], links.mask[None])
    v = logv[0]
    alpha = np.where(links.mask, logx - v[:, None] + v[None, :], np.nan)
    return alpha, v


# ---------------------------------------------------------------- gains

def home_discount(y: np.ndarray, x_to_home: np.ndarray, home: int) -> np.ndarray:
    """``c_i = (1 + Y_i) / (1 + Y_o) · X_{i,o}`` with ``c_o = 1``."""
    c = (1.0 + y) / (1.0 + y[home]) * x_to_home
    c = np.array(c, dtype=float)
    c[home] = 1.0
    return c


def gain_matrix(x_trade: np.ndarray, xo: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Gain per unit weight: ``g_ab = X̂'_oa (X_ab c_b - c_a)``, so ``G = Σ w ∘ g``."""
    return xo[:, None] * (x_trade * c[None, :] - c[:, None])


def realized_gain(w, xs, x_t, x_next_home, y_t, home: int):
    """``(H̃, G̃)`` from realized rates at ``t``, home rates at ``t + 1`` and rates ``Ỹ_t``."""
    xo = _home_row(xs, home)
    traded = w > 0
    if np.any(traded & ~np.isfinite(x_t)):
        raise ValueError("missing realized rate on a traded link")
    h = _holdings(w, np.where(traded, x_t, 0.0), xo)
    c = home_discount(np.asarray(y_t, dtype=float), np.asarray(x_next_home, dtype=float), home)
    involved = (w.sum(axis=0) + w.sum(axis=1)) > 0
    if np.any(involved & ~np.isfinite(c)):
        raise ValueError("missing next-day home rate or interest rate")
    g = float(np.sum(np.where(involved, c, 0.0) * np.where(involved, h, 0.0)))
    return h, g


def predicted_gain(w, xs, y_hat, home: int) -> float:
    """``Ĝ = Σ_i ((1 + Ŷ_i)/(1 + Ŷ_o)) X̂'_io Ĥ_i``."""
    xo = _home_row(xs, home)
    x_io = 1.0 / xo
    c = home_discount(np.asarray(y_hat, dtype=float), x_io, home)
    h = holdings_hat(w, xs, home)
    involved = (w.sum(axis=0) + w.sum(axis=1)) > 0
    return float(np.sum(np.where(involved, c * h, 0.0)))


# ---------------------------------------------------------------- loss

def fxsa_loss(gains, eps_var: float = EPS_VAR) -> ad.Var:
    """``-μ²/σ²`` when the batch mean is positive, else ``-μ``.

    ``σ²`` is the unbiased batch variance floored at ``eps_var``; below the floor
    the denominator is the constant floor.
    """
    g = ad.as_var(gains)
    b = g.shape[0]
    if b < 2:
        raise ValueError(f"loss needs at least 2 gains, got {b}")
    mu = ad.vsum(g) * (1.0 / b)
    dev = g - mu
    var = ad.vsum(ad.square(dev)) * (1.0 / (b - 1))
    if mu.value > 0:
        denom = var if var.value > eps_var else eps_var
        return -(ad.square(mu) / denom)
    return -mu


# ---------------------------------------------------------------- per-date state

@dataclass
class DayState:
    t: int
    links: TradableLinks
    xs: np.ndarray
    system: ConstraintSystem
    alpha: np.ndarray
    y_hat: np.ndarray
    reason: str = ""


def day_state(market: Market, store: PredictionStore, t: int, home: int) -> DayState:
    """Tradable links, symmetrized predictions, constraints and residuals for row ``t``.

    Reads only the links and tradability of row ``t`` (schedule information),
    the interest rates of row ``t - 1`` and the stored predictions for ``t``.
    """
    n = market.n
    view = market.view(t)
    if store.provenance[t] == 0:
        links = TradableLinks(home, np.zeros((n, n), bool))
        xs = np.full((n, n), np.nan)
        reason = "no prediction"
    else:
        u = prediction_edge_set(view, t)
        e = view.tradable(t, t + 1)[0]
        links = tradable_links(u, e, home)
        xs, ok = symmetrize_predictions(store.xhat[t], links.mask)
        links = restrict(links, ok)
        reason = ""
    xs = np.where(links.mask, xs, np.nan)
    system = build_constraints(links, xs)
    alpha, _ = arbitrage_residuals(xs, links)
    y_hat = view.daily_ir(t - 1, t)[0]
    return DayState(t, links, xs, system, alpha, y_hat, reason)


class ExchangeHistory:
    """Per-date projectors and residuals stacked on the uniform exchange index,
    with running sums for the window averages of the trading graph."""

    def __init__(self, market: Market, store: PredictionStore, home: int, windows: Sequence[int],
                 eps_s: float = EPS_S, rows: Sequence[int] | None = None):
        if eps_s <= 0:
            raise ValueError("eps_s must be positive")
        self.market, self.store, self.home = market, store, home
        self.windows = tuple(sorted(int(w) for w in windows))
        self.eps_s = eps_s
        n = market.n
        self.n, self.M, self.P = n, n * (n - 1), n * (n - 1) // 2
        self.ex = exchange_index(n)
        self.pidx = pair_index(n)
        T = market.T
        rows = store.rows() if rows is None else np.asarray(rows, dtype=int)
        self.states: dict = {}
        self.present = np.zeros((T, self.M), bool)
        alpha = np.zeros((T, self.M))
        proj = np.zeros((T, self.M, self.M))
        for t in rows:
            s = day_state(market, store, int(t), home)
            self.states[int(t)] = s
            e = self.ex[s.system.pairs[:, 0], s.system.pairs[:, 1]] if s.system.m else np.zeros(0, int)
            self.present[t, e] = True
            alpha[t, e] = s.alpha[s.system.pairs[:, 0], s.system.pairs[:, 1]] if s.system.m else 0.0
            proj[t][np.ix_(e, e)] = s.system.proj
        self.proj = proj
        # running sums over dates (index t + 1 holds the sum through row t)
        pm = self.present.astype(float)
        self._a_sum = np.concatenate([np.zeros((1, self.M)), np.cumsum(alpha, axis=0)])
        self._a_cnt = np.concatenate([np.zeros((1, self.M)), np.cumsum(pm, axis=0)])
        both = pm[:, :, None] * pm[:, None, :]
        self._p_sum = np.concatenate([np.zeros((1, self.M, self.M)), np.cumsum(proj, axis=0)])
        self._p_cnt = np.concatenate([np.zeros((1, self.M, self.M)), np.cumsum(both, axis=0)])
        del both

    def state(self, t: int) -> DayState:
        return self.states[int(t)]

    def graph(self, rows: Sequence[int]) -> nn.GraphBatch:
        """Trading graphs for ``rows``: window means of ``α̂`` (nodes) and ``P̂`` (edges)
        over dates ``(t - w, t]``; edges where the current ``|P̂| > ε_S``."""
        rows = np.asarray(rows, dtype=int)
        hi = rows + 1
        node_x = np.empty((len(rows), self.M, len(self.windows)))
        edge_x = np.empty((len(rows), self.M, self.M, len(self.windows)))
        for k, w in enumerate(self.windows):
            lo = np.maximum(hi - w, 0)
            s = self._a_sum[hi] - self._a_sum[lo]
            c = self._a_cnt[hi] - self._a_cnt[lo]
            node_x[..., k] = np.where(c > 0, s / np.maximum(c, 1), 0.0)
            s = self._p_sum[hi] - self._p_sum[lo]
            c = self._p_cnt[hi] - self._p_cnt[lo]
            edge_x[..., k] = np.where(c > 0.5, s / np.maximum(c, 1), 0.0)
        pres = self.present[rows]
        cur = np.abs(self.proj[rows]) > self.eps_s
        edge_mask = cur & pres[:, :, None] & pres[:, None, :]
        node_x[~pres] = 0.0
        edge_x[~edge_mask] = 0.0
        return nn.GraphBatch(node_x, edge_x, pres, edge_mask)

    def projector_factors(self, rows: Sequence[int]):
        """Embedded ``(reducer, lift)`` per row: ``u = lift @ (reducer @ u')``."""
        rows = np.asarray(rows, dtype=int)
        red = np.zeros((len(rows), self.P, self.M))
        lift = np.zeros((len(rows), self.M, self.P))
        for b, t in enumerate(rows):
            s = self.states[int(t)].system
            if s.dim == 0:
                continue
            pairs = s.pairs
            e = self.ex[pairs[:, 0], pairs[:, 1]]
            pi = self.pidx[pairs[s.fwd, 0], pairs[s.fwd, 1]]
            red[b][np.ix_(pi, e)] = s.reducer
            lift[b, e[s.fwd], pi] = 1.0
            lift[b, e[s.bwd], pi] = -s.ratio
        return red, lift

    def realized_gain_matrix(self, t: int) -> np.ndarray | None:
        """Per-exchange realized gain ``g`` for row ``t`` on the uniform index; ``None`` if unevaluable.

        Reads rates of rows ``t`` and ``t + 1``: evaluation-time only.
        """
        if t + 1 >= self.market.T:
            return None
        s = self.states[int(t)]
        if s.system.m == 0:
            return np.zeros(self.M)
        view = self.market.view(t + 2)
        x = view.rates(t, t + 2)
        y = view.daily_ir(t, t + 1)[0]
        xnh = x[1][:, self.home]
        xnh = np.array(xnh)
        xnh[self.home] = 1.0
        xo = _home_row(s.xs, self.home)
        c = home_discount(y, xnh, self.home)
        g = gain_matrix(x[0], xo, c)
        p = s.system.pairs
        vals = g[p[:, 0], p[:, 1]]
        if not np.all(np.isfinite(vals)):
            return None
        out = np.zeros(self.M)
        out[self.ex[p[:, 0], p[:, 1]]] = vals
        return out


# ---------------------------------------------------------------- training

@dataclass
class FxsaGridResult:
    budget: int
    layers: int
    hidden: int
    val_loss: float
    epochs: int
    params: nn.GnnParams = field(repr=False)


@dataclass
class FxsaFit:
    k: int
    params: nn.GnnParams
    table: list
    train_rows: np.ndarray
    val_rows: np.ndarray


@dataclass
class _Days:
    rows: np.ndarray
    gains: np.ndarray  # (B, M)


def evaluable_days(hist: ExchangeHistory, rows: Sequence[int], last: int) -> _Days:
    """Rows with a state and realized gains, restricted to ``t + 1 < last``."""
    keep, gains = [], []
    for t in rows:
        t = int(t)
        if t not in hist.states or t + 1 >= last:
            continue
        g = hist.realized_gain_matrix(t)
        if g is None:
            continue
        keep.append(t)
        gains.append(g)
    g = np.array(gains) if gains else np.zeros((0, hist.M))
    return _Days(np.array(keep, dtype=int), g)


def batch_gains(params: nn.GnnParams, hist: ExchangeHistory, rows, gains, tape=None, leaves=None):
    """Differentiable realized gains for ``rows`` and the non-degenerate mask."""
    batch = hist.graph(rows)
    out, leaves = nn.forward(params, batch, tape, leaves)
    score = out * batch.node_mask.astype(float)
    red, lift = hist.projector_factors(rows)
    u = ad.batch_matvec(lift, ad.batch_matvec(red, score))
    pos = ad.relu(u)
    total = ad.vsum(pos, axis=1)
    ok = total.value > DEGENERATE_FLOOR
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return None, ok, leaves
    g = ad.vsum(pos[idx] * gains[idx], axis=1) / total[idx]
    return g, ok, leaves


def _val_loss(params, hist, days: _Days, eps_var: float = EPS_VAR, chunk: int = 64) -> float:
    gs = []
    for a in range(0, len(days.rows), chunk):
        g, ok, _ = batch_gains(params, hist, days.rows[a:a + chunk], days.gains[a:a + chunk])
        if g is not None:
            gs.append(g.value)
    g = np.concatenate(gs) if gs else np.zeros(0)
    if len(g) < 2:
        return float("inf")
    return float(fxsa_loss(g, eps_var).value)


def train_fxsa(
    hist: ExchangeHistory,
    split: Split,
    grid: HyperGrid,
    seed: int,
    cfg: TrainConfig = TrainConfig(max_epochs=20, patience=5),
    eps_var: float = EPS_VAR,
) -> FxsaFit:
    """Mini-batch training of the trading network for refit ``split.k``.

    Training and validation days need realized gains, so only rows
    ``t <= t_k - 2`` take part.  Degenerate days drop out of each batch.
    """
    last = split.hi
    tr = evaluable_days(hist, split.train_rows(), last)
    va = evaluable_days(hist, split.val_rows(), last)
    if len(tr.rows) < 2:
        raise ValueError(f"refit {split.k}: fewer than 2 evaluable training dates")
    R = len(hist.windows)
    probe = hist.graph(tr.rows[: min(len(tr.rows), 256)])
    scaler = nn.FeatureScaler.fit([probe])
    table = []
    for gi, (budget, layers) in enumerate(grid.ordered()):
        h = nn.width_for_budget(budget, layers, R, R, "node_output")
        rng = np.random.default_rng(derive_seed(seed, split.k, gi, 1))
        params = nn.init_gnn(R, R, h, layers, "node_output", derive_seed(seed, split.k, gi), scaler=scaler)
        opt = nn.Adam(lr=cfg.lr)
        best = (_val_loss(params, hist, va, eps_var), params, 0)
        wait, any_step = 0, False
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(tr.rows))
            for a in range(0, len(order), cfg.batch_size):
                sel = np.sort(order[a:a + cfg.batch_size])
                tape = nn.Tape()
                leaves = nn.gnn.watch(params, tape)
                g, ok, _ = batch_gains(params, hist, tr.rows[sel], tr.gains[sel], tape, leaves)
                if g is None or g.shape[0] < 2:
                    continue
                loss = fxsa_loss(g, eps_var)
                tape.backward(loss)
                new, accepted = opt.step(params.tensors(), nn.gradients(leaves))
                if accepted:
                    params = params.with_tensors(new)
                    any_step = True
            val = _val_loss(params, hist, va, eps_var)
            if val < best[0]:
                best, wait = (val, params, epoch), 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    break
        if not any_step:
            raise ValueError(f"refit {split.k}: every training batch was degenerate; nothing to learn from")
        logger.info("trading refit %d grid (%d, %d) h=%d: val loss %.6g at epoch %d",
                    split.k, budget, layers, h, best[0], best[2])
        table.append(FxsaGridResult(budget, layers, h, best[0], best[2], best[1]))
    pick = min(table, key=lambda r: (r.val_loss, r.budget, r.layers))
    return FxsaFit(split.k, pick.params, table, tr.rows, va.rows)


# ---------------------------------------------------------------- inference

def decide_trades(hist: ExchangeHistory, t: int, params: nn.GnnParams) -> TradePlan:
    """Plan for row ``t`` from the trading network; degenerate with a reason if inputs are missing."""
    t = int(t)
    if t not in hist.states:
        return degenerate_plan(t, hist.n, hist.home, "no prediction")
    s = hist.state(t)
    if s.system.m == 0:
        return degenerate_plan(t, hist.n, hist.home, s.reason or "no tradable links")
    batch = hist.graph([t])
    out, _ = nn.forward(params, batch)
    scores = out.value[0]
    e = hist.ex[s.system.pairs[:, 0], s.system.pairs[:, 1]]
    return h_so(scores[e], s.system, t, xs=s.xs)


def write_plans(path, plans: Sequence[TradePlan], currencies: Sequence[str]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(PLAN_HEADER + "\n")
        for p in plans:
            for line in p.lines(currencies):
                fh.write(line + "\n")
