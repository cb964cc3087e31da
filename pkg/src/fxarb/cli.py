"""Command-line entry point: ``fxarb {synth,ingest,train-fxrp,backtest,verify}``.

Flags override ``FXARB_SEED``, ``FXARB_OUT``, ``FXARB_THREADS`` and
``FXARB_STRATEGY``, which override the config file.  ``FXARB_CONFIG`` names the
config when ``--config`` is absent.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from datetime import date
from pathlib import Path

from . import __version__
from .backtest import WalkForwardError, run_walk_forward, write_atomic
from .config import DEFAULT_TOML, STRATEGIES, ConfigError, RunConfig, apply_overrides, load_config, parse_config
from .fx_graph import Market
from .fxrp import ScheduleError, build_schedule, make_splits, train_fxrp
from .market_data import MarketDataError, TradingCalendar, clean_panels, generate_synthetic, load_panels, write_panels
from .neural import checkpoint

logger = logging.getLogger("fxarb")

EXIT_USAGE = 2
EXIT_VIOLATION = 3
EXIT_FAILED = 1


class MissingPrerequisite(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers

def _manifest(cfg: RunConfig, files: dict, extra: dict | None = None) -> bytes:
    doc = {"config_sha256": cfg.sha256, "seed": cfg.seed, "fxarb_version": __version__,
           "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())}}
    doc.update(extra or {})
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()


def raw_paths(cfg: RunConfig) -> tuple[Path, Path]:
    if cfg.data.source == "synthetic":
        base = Path(cfg.output_dir) / "data"
        return base / "fx.csv", base / "ir.csv"
    return Path(cfg.data.fx_path), Path(cfg.data.ir_path)


def _file_dates(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows, None)
        out = set()
        for row in rows:
            if row:
                try:
                    out.add(date.fromisoformat(row[0]))
                except ValueError as exc:
                    raise MarketDataError(f"{path}: bad date {row[0]!r}") from exc
    return sorted(out)


def load_market(cfg: RunConfig):
    """Raw panels from disk, cleaned; returns ``(market, cleaning_log)``."""
    fx_path, ir_path = raw_paths(cfg)
    missing = [str(p) for p in (fx_path, ir_path) if not p.exists()]
    if missing:
        hint = "run `fxarb synth` first" if cfg.data.source == "synthetic" else "check [data] fx_path / ir_path"
        raise MissingPrerequisite(f"missing data file(s) {', '.join(missing)}; {hint}")
    if cfg.data.start is not None and cfg.data.end is not None:
        cal = TradingCalendar.weekdays(cfg.data.start, end=cfg.data.end)
    else:
        ds = _file_dates(fx_path)
        if not ds:
            raise MarketDataError(f"{fx_path} holds no observations")
        cal = TradingCalendar.spanning([d for d in ds if d.weekday() < 5] or ds)
        if cfg.data.start is not None or cfg.data.end is not None:
            lo = cfg.data.start or cal.dates[0]
            hi = cfg.data.end or cal.dates[-1]
            cal = TradingCalendar.weekdays(lo, end=hi)
    fx, ir = load_panels(fx_path, ir_path, cal)
    fx, ir, log = clean_panels(fx, ir, cfg.data.cleaning)
    return Market(fx, ir, cfg.windows), log


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> int:
    if cfg.data.source != "synthetic":
        raise ConfigError("synth needs [data] source = \"synthetic\"")
    fx, ir, truth = generate_synthetic(cfg.data.synthetic)
    out = Path(cfg.output_dir) / "data"
    tmp = out.with_name("data.tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    try:
        write_panels(fx, ir, tmp / "fx.csv", tmp / "ir.csv")
        lines = ["t," + ",".join(fx.currencies)]
        lines += [f"{r + 1}," + ",".join(repr(float(v)) for v in row) for r, row in enumerate(truth.log_values)]
        files = {"fx.csv": (tmp / "fx.csv").read_bytes(), "ir.csv": (tmp / "ir.csv").read_bytes(),
                 "truth_log_values.csv": ("\n".join(lines) + "\n").encode(), "config.toml": cfg.raw}
    finally:
        for p in tmp.glob("*"):
            p.unlink()
        tmp.rmdir()
    files["manifest.json"] = _manifest(cfg, files)
    write_atomic(out, files)
    print(f"wrote synthetic panels ({fx.n} currencies, {len(fx.calendar)} days) to {out}")
    return 0


def cmd_ingest(cfg: RunConfig) -> int:
    market, log = load_market(cfg)
    out = Path(cfg.output_dir) / "clean"
    tmp = out.with_name("clean.tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    try:
        write_panels(market.fx, market.ir, tmp / "fx.csv", tmp / "ir.csv")
        files = {"fx.csv": (tmp / "fx.csv").read_bytes(), "ir.csv": (tmp / "ir.csv").read_bytes()}
    finally:
        for p in tmp.glob("*"):
            p.unlink()
        tmp.rmdir()
    files["cleaning_log.csv"] = ("t,field,action,value\n" + "".join(l + "\n" for l in log.lines())).encode()
    files["config.toml"] = cfg.raw
    files["manifest.json"] = _manifest(cfg, files)
    write_atomic(out, files)
    print(f"cleaned panels written to {out}; {len(log)} cleaning actions")
    return 0


def cmd_train_fxrp(cfg: RunConfig) -> int:
    market, _ = load_market(cfg)
    sc = cfg.schedule
    schedule = build_schedule(market.calendar, sc.start, sc.n_fit, sc.n_sy, sc.refit_freq, sc.t_exec)
    splits = make_splits(schedule, "P", cfg.fxrp_train.val_fraction)
    files = {}
    table = ["k,budget,layers,hidden,val_mse,epochs,selected"]
    for k in range(1, schedule.n_fit + 1):
        fit = train_fxrp(market, splits[k], cfg.fxrp_grid, cfg.seed, cfg.fxrp_train)
        files[f"fxrp_k{k:02d}.npz"] = checkpoint.to_bytes(fit.params)
        for g in fit.table:
            table.append(f"{k},{g.budget},{g.layers},{g.hidden},{float(g.val_mse)!r},{g.epochs},{int(g.params is fit.params)}")
        print(f"refit {k}/{schedule.n_fit}: val mse {fit.best.val_mse:.6g}")
    head = f"# config_sha256={cfg.sha256}\n# seed={cfg.seed}\n"
    files["validation.csv"] = (head + "\n".join(table) + "\n").encode()
    files["config.toml"] = cfg.raw
    files["manifest.json"] = _manifest(cfg, files, {"refit_rows": [int(r) + 1 for r in schedule.refit_rows]})
    write_atomic(Path(cfg.output_dir) / "fxrp", files)
    return 0


def cmd_backtest(cfg: RunConfig) -> int:
    market, _ = load_market(cfg)
    report = run_walk_forward(cfg, market)
    out = report.write(Path(cfg.output_dir) / "report")
    for name, scope, s in report.summary_rows():
        print(f"{name:4s} {scope:6s} IR={_f(s['information_ratio'])} Sortino={_f(s['sortino'])} "
              f"MDD={_f(s['mdd'])} HHI={_f(s['mean_hhi'])} holdings={_f(s['mean_holdings'])}")
    print(f"report written to {out}")
    if report.violations:
        print(f"{len(report.violations)} constraint-certificate violation(s); see certificates.csv", file=sys.stderr)
        return EXIT_VIOLATION
    return 0


def _f(v) -> str:
    return "undefined" if v is None else f"{v:.4g}"


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_all
    checks = run_all(echo=print)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} properties pass")
    return EXIT_FAILED if failed else 0


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "train-fxrp": cmd_train_fxrp, "backtest": cmd_backtest,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fxarb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fxarb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML run configuration (default: built-in defaults)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("default-config", help="print the default configuration")
    return ap


def resolve_config(args, env=None) -> RunConfig:
    env = os.environ if env is None else env
    path = args.config or (Path(env["FXARB_CONFIG"]) if env.get("FXARB_CONFIG") else None)
    cfg = load_config(path) if path is not None else parse_config(DEFAULT_TOML)
    return apply_overrides(cfg, args.seed, args.out, args.threads, args.strategy, env)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        sys.stdout.write(DEFAULT_TOML)
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, MissingPrerequisite, ScheduleError) as exc:
        print(f"fxarb {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MarketDataError, WalkForwardError, ValueError) as exc:
        print(f"fxarb {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
