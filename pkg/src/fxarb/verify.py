"""Invariant battery run by ``fxarb verify``: constraints, gradients, oracles and guards."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import neural as nn
from .fx_graph import Market, currency_values
from .lp_bench import LpProblem, simplex_solve, vertex_enumeration
from .market_data import LeakageError, SyntheticConfig, generate_synthetic
from .neural import autodiff as ad
from .neural import checkpoint
from .statarb import (
    TradableLinks,
    build_constraints,
    c1_to_u,
    fxsa_loss,
    h_so,
    symmetrize_predictions,
    verify_c1,
)


def random_instance(rng: np.random.Generator, n: int, p_link: float = 0.8, home: int = 0, noise: float = 0.01):
    """Random symmetric link set (every currency linked to home) and symmetrized rates."""
    mask = np.triu(rng.random((n, n)) < p_link, 1)
    mask[home, :] = True
    mask[:, home] = True
    mask = mask | mask.T
    mask[np.arange(n), np.arange(n)] = False
    logv = rng.normal(0.0, 0.5, n)
    x = np.exp(logv[:, None] - logv[None, :] + rng.normal(0.0, noise, (n, n)))
    xs, _ = symmetrize_predictions(x, mask)
    return TradableLinks(home, mask), xs


@dataclass
class Check:
    name: str
    ok: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def check_currency_triangle():
    lr = {(0, 1): 1.0, (1, 2): 1.0, (0, 2): 1.0}
    lr.update({(j, i): -v for (i, j), v in list(lr.items())})
    cv = currency_values(lr, lr.keys(), ("A", "B", "C"))
    err = max(np.abs(cv.log_values - [2 / 3, 0, -2 / 3]).max(),
              abs(cv.residuals[(0, 1)] - 1 / 3), abs(cv.residuals[(1, 2)] - 1 / 3), abs(cv.residuals[(0, 2)] + 1 / 3))
    return err <= 1e-12, f"max error {err:.2e}"


def check_projection(count: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        links, xs = random_instance(rng, int(rng.integers(3, 7)))
        s = build_constraints(links, xs)
        P = s.proj
        u = rng.normal(size=s.m)
        worst = max(worst, np.abs(P - P.T).max(), np.abs(P @ P - P).max(), np.abs(s.A @ (P @ u)).max())
    return worst <= 1e-10, f"worst residual {worst:.2e} over {count} systems"


def check_h_so(count: int = 200, seed: int = 1):
    rng = np.random.default_rng(seed)
    bad = done = 0
    for _ in range(count):
        links, xs = random_instance(rng, int(rng.integers(3, 7)))
        s = build_constraints(links, xs)
        plan = h_so(rng.normal(size=s.m), s, xs=xs)
        if plan.degenerate:
            continue
        done += 1
        bad += not verify_c1(plan.w, xs, links.home)[0]
    return bad == 0 and done > 0, f"{bad} violations in {done} non-degenerate plans"


def check_round_trip(count: int = 200, seed: int = 2):
    rng = np.random.default_rng(seed)
    worst, done = 0.0, 0
    for _ in range(count):
        links, xs = random_instance(rng, int(rng.integers(3, 7)))
        s = build_constraints(links, xs)
        plan = h_so(rng.normal(size=s.m), s, xs=xs)
        if plan.degenerate:
            continue
        back = h_so(c1_to_u(plan.w, xs, links), s, xs=xs)
        worst = max(worst, np.abs(back.w - plan.w).max())
        done += 1
    return worst <= 1e-12 and done > 0, f"worst deviation {worst:.2e} over {done} plans"


def check_loss_cases():
    a = float(fxsa_loss(np.array([0.01, 0.03])).value)
    b = float(fxsa_loss(np.array([-0.01, -0.03])).value)
    ok = abs(a + 2.0) <= 1e-12 and abs(b - 0.02) <= 1e-12
    return ok, f"loss values {a!r}, {b!r}"


def check_lp_oracle(count: int = 200, seed: int = 3):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(count):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, 4))
        A = rng.integers(-3, 4, size=(m, n)).astype(float)
        A = np.vstack([A, np.ones(n)])
        b = np.append(rng.integers(-2, 3, size=m).astype(float), 1.0)
        p = LpProblem(rng.normal(size=n), A, b)
        got, ref = simplex_solve(p), vertex_enumeration(p)
        if got.status != ref.status or (ref.status == "optimal" and abs(got.value - ref.value) > 1e-9):
            bad += 1
    return bad == 0, f"{bad} disagreements in {count} problems"


def check_gradients(seed: int = 4):
    rng = np.random.default_rng(seed)
    m = 5
    mask = rng.random((1, m, m)) < 0.7
    mask[:, np.arange(m), np.arange(m)] = False
    batch = nn.GraphBatch(rng.normal(size=(1, m, 2)), rng.normal(size=(1, m, m, 2)), np.ones((1, m), bool), mask)
    params = nn.init_gnn(2, 2, 3, 2, "edge_output", seed=seed)
    params.head.bias[:] = 0.1
    target = rng.normal(size=(1, m, m))

    def loss_of(p):
        out, _ = nn.forward(p, batch)
        return float(np.mean((out.value - target) ** 2))

    tape = nn.Tape()
    out, leaves = nn.forward(params, batch, tape)
    tape.backward(ad.vmean(ad.square(out - target)))
    grads = nn.gradients(leaves)
    worst = 0.0
    tensors = params.tensors()
    for k, v in tensors.items():
        for idx in np.ndindex(v.shape):
            hi = {kk: vv.copy() for kk, vv in tensors.items()}
            lo = {kk: vv.copy() for kk, vv in tensors.items()}
            hi[k][idx] += 1e-5
            lo[k][idx] -= 1e-5
            fd = (loss_of(params.with_tensors(hi)) - loss_of(params.with_tensors(lo))) / 2e-5
            worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-8))
    return worst < 1e-5, f"worst relative error {worst:.2e}"


def check_leakage_guard():
    fx, ir, _ = generate_synthetic(SyntheticConfig(n_currencies=3, n_days=40, seed=0))
    market = Market(fx, ir)
    view = market.view(30)
    try:
        view.rates(29, 31)
    except LeakageError:
        return True, "read at the decision row refused"
    return False, "future read was allowed"


def check_checkpoint_bytes():
    p = nn.init_gnn(3, 2, 4, 2, "node_output", seed=5)
    a = checkpoint.to_bytes(p)
    time.sleep(0.01)
    b = checkpoint.to_bytes(checkpoint.from_bytes(a))
    return a == b, "checkpoint bytes reproducible" if a == b else "checkpoint bytes differ"


CHECKS: dict = {
    "currency value triangle": check_currency_triangle,
    "projection laws": check_projection,
    "trade constraint guarantee": check_h_so,
    "plan round trip": check_round_trip,
    "loss hand cases": check_loss_cases,
    "simplex vs vertex enumeration": check_lp_oracle,
    "gradient finite differences": check_gradients,
    "leakage guard": check_leakage_guard,
    "checkpoint determinism": check_checkpoint_bytes,
}


def run_all(checks: dict | None = None, echo: Callable | None = None) -> list:
    out = []
    for name, fn in (checks or CHECKS).items():
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported with its cause
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        c = Check(name, bool(ok), detail, time.perf_counter() - start)
        if echo:
            echo(c.line())
        out.append(c)
    return out
