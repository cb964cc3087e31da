"""Run configuration: a versioned TOML file with strict keys.

Unknown keys are errors.  The raw bytes are kept so every report can echo the
file verbatim and carry its SHA-256.
"""

from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fx_graph import DEFAULT_WINDOWS, check_windows
from .fxrp import FREQ_MONTHS, HyperGrid, TrainConfig
from .market_data import CleaningConfig, OutlierRule, SyntheticConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "FXARB_"
STRATEGIES = ("gnn", "lp", "both")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | files
    fx_path: str = "data/fx.csv"
    ir_path: str = "data/ir.csv"
    start: date | None = None  # calendar bounds for file data; default spans the file
    end: date | None = None
    synthetic: SyntheticConfig = SyntheticConfig()
    cleaning: CleaningConfig = CleaningConfig()


@dataclass(frozen=True)
class ScheduleConfig:
    start: date = date(2005, 10, 1)
    refit_freq: str = "quarterly"
    n_fit: int = 8
    n_sy: int = 2
    t_exec: float = 0.5


@dataclass(frozen=True)
class FxsaConfig:
    grid: HyperGrid = HyperGrid(((2000, 2),))
    train: TrainConfig = TrainConfig(max_epochs=20, patience=5)
    eps_s: float = 1e-8
    eps_var: float = 1e-12


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    home: str = "USD"
    output_dir: str = "out"
    threads: int = 0  # 0 = available cores
    strategy: str = "both"
    windows: tuple = DEFAULT_WINDOWS
    annualization: int = 252
    rolling_days: int = 365
    data: DataConfig = DataConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    fxrp_grid: HyperGrid = HyperGrid(((300, 1), (1000, 1), (3000, 1), (300, 2), (1000, 2), (3000, 2),
                                      (300, 3), (1000, 3), (3000, 3)))
    fxrp_train: TrainConfig = TrainConfig()
    fxsa: FxsaConfig = FxsaConfig()
    raw: bytes = field(default=b"", repr=False, compare=False)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    @property
    def n_threads(self) -> int:
        return self.threads or (os.cpu_count() or 1)


# ---------------------------------------------------------------- parsing

def _take(table: dict, where: str, allowed: dict) -> dict:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    out = {}
    for k, typ in allowed.items():
        if k not in table:
            continue
        v = table[k]
        try:
            out[k] = typ(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{where}] {k} = {v!r}: {exc}") from exc
    return out


def _date(v) -> date:
    if isinstance(v, date):
        return v
    return date.fromisoformat(str(v))


def _int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _str(v) -> str:
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _grid(v) -> HyperGrid:
    pts = tuple((int(b), int(L)) for b, L in v)
    return HyperGrid(pts)


def _train(table: dict, where: str, base: TrainConfig) -> TrainConfig:
    kw = _take(table, where, {"lr": _float, "max_epochs": _int, "patience": _int, "batch_size": _int,
                              "val_fraction": _float})
    cfg = replace(base, **kw)
    if cfg.lr <= 0 or cfg.max_epochs < 1 or cfg.patience < 1 or cfg.batch_size < 2:
        raise ConfigError(f"[{where}] needs lr > 0, max_epochs >= 1, patience >= 1, batch_size >= 2")
    if not 0 < cfg.val_fraction < 1:
        raise ConfigError(f"[{where}] val_fraction must lie in (0, 1)")
    return cfg


def _split_table(doc: dict, key: str) -> tuple[dict, dict]:
    """Scalars of ``doc[key]`` and its sub-tables, separately."""
    t = doc.get(key, {})
    if not isinstance(t, dict):
        raise ConfigError(f"[{key}] must be a table")
    return {k: v for k, v in t.items() if not isinstance(v, dict)}, {k: v for k, v in t.items() if isinstance(v, dict)}


def parse_config(raw: bytes | str) -> RunConfig:
    if isinstance(raw, str):
        raw = raw.encode()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    if "schema_version" not in doc:
        raise ConfigError("config lacks schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']!r}; expected {SCHEMA_VERSION}")
    sections = {"data", "schedule", "fxrp", "fxsa", "metrics"}
    top = {k: v for k, v in doc.items() if k not in sections}
    kw = _take(top, "top level", {"schema_version": _int, "seed": _int, "home": _str, "output_dir": _str,
                                  "threads": _int, "strategy": _str, "windows": lambda v: check_windows(v)})
    cfg = RunConfig(**kw)
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    if cfg.threads < 0:
        raise ConfigError("threads must be >= 0")

    scal, subs = _split_table(doc, "data")
    unknown = sorted(set(subs) - {"synthetic", "cleaning"})
    if unknown:
        raise ConfigError(f"unknown table(s) in [data]: {', '.join(unknown)}")
    dkw = _take(scal, "data", {"source": _str, "fx_path": _str, "ir_path": _str, "start": _date, "end": _date})
    if dkw.get("source", "synthetic") not in ("synthetic", "files"):
        raise ConfigError("[data] source must be 'synthetic' or 'files'")
    syn = _take(subs.get("synthetic", {}), "data.synthetic", {
        "n_currencies": _int, "n_days": _int, "sigma_alpha": _float, "signal_strength": _float,
        "fx_vol": _float, "ir_level": _float, "ir_vol": _float, "missing_prob": _float, "start": _date})
    cl = subs.get("cleaning", {})
    rules = cl.pop("outlier_rules", []) if isinstance(cl, dict) else []
    ckw = _take(cl, "data.cleaning", {"fx_ffill_limit": _int, "ir_ffill_limit": _int,
                                      "scale_factors": lambda v: tuple(float(x) for x in v),
                                      "scale_tolerance": _float})
    parsed_rules = []
    for r in rules:
        rk = _take(r, "data.cleaning.outlier_rules", {"field": _str, "key": lambda v: tuple(str(x) for x in v),
                                                      "start": _date, "end": _date, "lower": _float, "upper": _float})
        parsed_rules.append(OutlierRule(**rk))
    try:
        data = DataConfig(**dkw, synthetic=SyntheticConfig(**syn, seed=cfg.seed),
                          cleaning=CleaningConfig(**ckw, outlier_rules=tuple(parsed_rules)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    scal, subs = _split_table(doc, "schedule")
    if subs:
        raise ConfigError(f"unknown table(s) in [schedule]: {', '.join(subs)}")
    skw = _take(scal, "schedule", {"start": _date, "refit_freq": _str, "n_fit": _int, "n_sy": _int,
                                   "t_exec": _float})
    sched = ScheduleConfig(**skw)
    if sched.refit_freq not in FREQ_MONTHS:
        raise ConfigError(f"[schedule] refit_freq must be one of {sorted(FREQ_MONTHS)}")
    if not 1 <= sched.n_sy < sched.n_fit:
        raise ConfigError("[schedule] need 1 <= n_sy < n_fit")

    scal, subs = _split_table(doc, "fxrp")
    unknown = sorted(set(subs) - {"train"})
    if unknown:
        raise ConfigError(f"unknown table(s) in [fxrp]: {', '.join(unknown)}")
    pkw = _take(scal, "fxrp", {"grid": _grid})
    ptrain = _train(subs.get("train", {}), "fxrp.train", TrainConfig())

    scal, subs = _split_table(doc, "fxsa")
    unknown = sorted(set(subs) - {"train"})
    if unknown:
        raise ConfigError(f"unknown table(s) in [fxsa]: {', '.join(unknown)}")
    akw = _take(scal, "fxsa", {"grid": _grid, "eps_s": _float, "eps_var": _float})
    strain = _train(subs.get("train", {}), "fxsa.train", FxsaConfig().train)
    fxsa = FxsaConfig(train=strain, **akw)
    if fxsa.eps_s <= 0 or fxsa.eps_var <= 0:
        raise ConfigError("[fxsa] eps_s and eps_var must be positive")

    scal, subs = _split_table(doc, "metrics")
    if subs:
        raise ConfigError(f"unknown table(s) in [metrics]: {', '.join(subs)}")
    mkw = _take(scal, "metrics", {"annualization": _int, "rolling_days": _int})

    return replace(cfg, data=data, schedule=sched, fxrp_grid=pkw.get("grid", cfg.fxrp_grid), fxrp_train=ptrain,
                   fxsa=fxsa, raw=raw, **mkw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_bytes())


def apply_overrides(cfg: RunConfig, seed=None, out=None, threads=None, strategy=None, env=None) -> RunConfig:
    """Flags win over ``FXARB_*`` environment variables, which win over the file."""
    env = os.environ if env is None else env
    def pick(flag, name, conv):
        if flag is not None:
            return flag
        v = env.get(ENV_PREFIX + name)
        if v is None:
            return None
        try:
            return conv(v)
        except ValueError as exc:
            raise ConfigError(f"{ENV_PREFIX}{name}={v!r}: {exc}") from exc

    seed = pick(seed, "SEED", int)
    out = pick(out, "OUT", str)
    threads = pick(threads, "THREADS", int)
    strategy = pick(strategy, "STRATEGY", str)
    if strategy is not None and strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    kw = {}
    if seed is not None:
        kw["seed"] = seed
        kw["data"] = replace(cfg.data, synthetic=replace(cfg.data.synthetic, seed=seed))
    if out is not None:
        kw["output_dir"] = out
    if threads is not None:
        if threads < 0:
            raise ConfigError("threads must be >= 0")
        kw["threads"] = threads
    if strategy is not None:
        kw["strategy"] = strategy
    return replace(cfg, **kw)


DEFAULT_TOML = """\
# fxarb run configuration
schema_version = 1
seed = 0
home = "USD"
output_dir = "out"
threads = 0
strategy = "both"
windows = [1, 3, 5, 10, 15, 20]

[data]
source = "synthetic"

[data.synthetic]
n_currencies = 10
n_days = 2000
sigma_alpha = 0.005
signal_strength = 0.3

[schedule]
start = 2005-10-01
refit_freq = "quarterly"
n_fit = 8
n_sy = 2

[fxrp]
grid = [[300, 1], [1000, 1], [3000, 1], [300, 2], [1000, 2], [3000, 2], [300, 3], [1000, 3], [3000, 3]]

[fxrp.train]
lr = 0.001
max_epochs = 500
patience = 20
val_fraction = 0.2

[fxsa]
grid = [[2000, 2]]
eps_s = 1e-8
eps_var = 1e-12

[fxsa.train]
lr = 0.001
max_epochs = 20
patience = 5
batch_size = 64
val_fraction = 0.2

[metrics]
annualization = 252
rolling_days = 365
"""
