import sys
from dataclasses import replace

import numpy as np

from fxarb.config import parse_config
from fxarb.fx_graph import Market
from fxarb.market_data import clean_panels, generate_synthetic

SMALL_TOML = """\
schema_version = 1
seed = {seed}
home = "USD"
output_dir = "{out}"
strategy = "{strategy}"
windows = [1, 3, 5, 10, 15, 20]

[data]
source = "synthetic"

[data.synthetic]
n_currencies = {n}
n_days = {days}
sigma_alpha = 0.005
signal_strength = 0.3

[schedule]
start = {start}
refit_freq = "{freq}"
n_fit = {n_fit}
n_sy = 2

[fxrp]
grid = {fxrp_grid}

[fxrp.train]
lr = 0.003
max_epochs = {fxrp_epochs}
patience = {fxrp_patience}

[fxsa]
grid = {fxsa_grid}

[fxsa.train]
lr = 0.003
max_epochs = {fxsa_epochs}
patience = 1
"""

SMALL = dict(seed=0, out="out", strategy="both", n=4, days=420, start="2001-03-01", freq="monthly", n_fit=3,
             fxrp_grid="[[120, 1]]", fxrp_epochs=3, fxrp_patience=2, fxsa_grid="[[120, 1]]", fxsa_epochs=2)

# ten currencies, eight quarterly refits over 2000 days, one grid point per stage
WALK_FORWARD = dict(SMALL, n=10, days=2000, start="2005-10-01", freq="quarterly", n_fit=8,
                    fxrp_grid="[[300, 1]]", fxrp_epochs=60, fxrp_patience=10, fxsa_grid="[[300, 1]]", fxsa_epochs=2)


def config_text(**kw) -> str:
    return SMALL_TOML.format(**{**SMALL, **kw})


def small_config(**kw):
    return parse_config(config_text(**kw))


def walk_forward_config(**kw):
    return parse_config(config_text(**{**WALK_FORWARD, **kw}))


def market_for(cfg):
    fx, ir, _ = generate_synthetic(cfg.data.synthetic)
    fx, ir, _ = clean_panels(fx, ir)
    return Market(fx, ir, cfg.windows)


def run_small(**kw):
    cfg = small_config(**kw)
    return cfg, market_for(cfg)


def planted_future(m, row, factor=1.5):
    """Copy of ``m`` whose home-leg rates from ``row`` on are scaled, keeping reciprocity."""
    scale = np.ones((m.n, m.n))
    scale[0, 1:], scale[1:, 0] = factor, 1 / factor
    rates = m.fx.rates.copy()
    rates[row:] *= scale
    filled = None
    if m.fx.filled is not None:
        filled = m.fx.filled.copy()
        filled[row:] *= scale
    return Market(replace(m.fx, rates=rates, filled=filled), m.ir, m.windows)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
