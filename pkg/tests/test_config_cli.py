import hashlib
import json
import subprocess
import sys
from datetime import date

import pytest

from conftest import config_text
from fxarb import cli
from fxarb.config import DEFAULT_TOML, ConfigError, apply_overrides, load_config, parse_config


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for k in ("FXARB_SEED", "FXARB_OUT", "FXARB_THREADS", "FXARB_STRATEGY", "FXARB_CONFIG"):
        monkeypatch.delenv(k, raising=False)


# ---------------------------------------------------------------- config

def test_default_config_parses():
    cfg = parse_config(DEFAULT_TOML)
    assert cfg.schedule.start == date(2005, 10, 1) and cfg.schedule.n_fit == 8 and cfg.schedule.n_sy == 2
    assert len(cfg.fxrp_grid.points) == 9
    assert cfg.fxsa.eps_s == 1e-8 and cfg.fxsa.eps_var == 1e-12
    assert cfg.annualization == 252 and cfg.rolling_days == 365
    assert cfg.data.synthetic.seed == cfg.seed


@pytest.mark.parametrize("text, match", [
    ("schema_version = 1\nbogus = 3\n", "unknown key"),
    ("schema_version = 2\n", "schema_version"),
    ("seed = 1\n", "schema_version"),
    ("schema_version = 1\n[data]\nsource = \"web\"\n", "source"),
    ("schema_version = 1\n[data.synthetic]\nn_currency = 4\n", "unknown key"),
    ("schema_version = 1\n[schedule]\nn_fit = 2\nn_sy = 2\n", "n_sy"),
    ("schema_version = 1\n[schedule]\nrefit_freq = \"weekly\"\n", "refit_freq"),
    ("schema_version = 1\nstrategy = \"all\"\n", "strategy"),
    ("schema_version = 1\nseed = \"x\"\n", "seed"),
    ("schema_version = 1\n[fxsa]\neps_s = 0.0\n", "eps_s"),
    ("schema_version = 1\n[fxrp.train]\nlr = -1.0\n", "lr"),
    ("schema_version = 1\n[metrics.extra]\n", "metrics"),
    ("schema_version = 1\nwindows = [5, 5]\n", "windows"),
    ("schema_version = = 1\n", "TOML"),
])
def test_invalid_configs_rejected(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_outlier_rules_parse():
    cfg = parse_config('schema_version = 1\n[data.cleaning]\nfx_ffill_limit = 3\n'
                       '[[data.cleaning.outlier_rules]]\nfield = "fx"\nkey = ["USD", "JPY"]\n'
                       'start = 2001-01-01\nend = 2001-12-31\nlower = 50.0\nupper = 200.0\n')
    rule = cfg.data.cleaning.outlier_rules[0]
    assert rule.key == ("USD", "JPY") and rule.upper == 200.0
    assert cfg.data.cleaning.fx_ffill_limit == 3


def test_sha256_and_echo(tmp_path):
    text = config_text(seed=5)
    (tmp_path / "run.toml").write_text(text)
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.raw == text.encode()
    assert cfg.sha256 == hashlib.sha256(text.encode()).hexdigest()
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_precedence_flags_over_env_over_file():
    cfg = parse_config(config_text(seed=1))
    env = {"FXARB_SEED": "2", "FXARB_OUT": "envout", "FXARB_STRATEGY": "lp", "FXARB_THREADS": "3"}
    a = apply_overrides(cfg, env=env)
    assert (a.seed, a.output_dir, a.strategy, a.threads) == (2, "envout", "lp", 3)
    assert a.data.synthetic.seed == 2
    b = apply_overrides(cfg, seed=7, out="flagout", strategy="gnn", threads=1, env=env)
    assert (b.seed, b.output_dir, b.strategy, b.threads) == (7, "flagout", "gnn", 1)
    c = apply_overrides(cfg, env={})
    assert (c.seed, c.strategy) == (1, "both")
    with pytest.raises(ConfigError):
        apply_overrides(cfg, env={"FXARB_SEED": "abc"})
    with pytest.raises(ConfigError):
        apply_overrides(cfg, env={"FXARB_STRATEGY": "both-ways"})


# ---------------------------------------------------------------- command line

def write_cfg(tmp_path, **kw):
    path = tmp_path / "run.toml"
    path.write_text(config_text(out=str(tmp_path / "out"), **kw))
    return path


def test_default_config_command(capsys):
    assert cli.main(["default-config"]) == 0
    assert capsys.readouterr().out == DEFAULT_TOML


def test_backtest_without_data_is_a_usage_error(tmp_path, capsys):
    path = write_cfg(tmp_path)
    assert cli.main(["backtest", "--config", str(path)]) == cli.EXIT_USAGE
    assert "fxarb synth" in capsys.readouterr().err


def test_bad_config_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("schema_version = 1\nnope = 1\n")
    assert cli.main(["synth", "--config", str(path)]) == cli.EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err


def test_synth_ingest_train_backtest(tmp_path, capsys):
    path = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["synth", "--config", str(path)]) == 0
    assert sorted(p.name for p in (out / "data").iterdir()) == [
        "config.toml", "fx.csv", "ir.csv", "manifest.json", "truth_log_values.csv"]
    assert (out / "data" / "config.toml").read_bytes() == path.read_bytes()

    assert cli.main(["ingest", "--config", str(path)]) == 0
    assert (out / "clean" / "cleaning_log.csv").read_text().startswith("t,field,action,value")

    assert cli.main(["train-fxrp", "--config", str(path)]) == 0
    names = sorted(p.name for p in (out / "fxrp").iterdir())
    assert names[:3] == ["config.toml", "fxrp_k01.npz", "fxrp_k02.npz"]
    man = json.loads((out / "fxrp" / "manifest.json").read_text())
    assert man["config_sha256"] == hashlib.sha256(path.read_bytes()).hexdigest()

    assert cli.main(["backtest", "--config", str(path)]) == 0
    report = out / "report"
    first = {p.name: p.read_bytes() for p in report.iterdir()}
    assert {"summary.csv", "daily_gnn.csv", "daily_lp.csv", "rolling_lp.csv", "plans_gnn.csv", "predictions.csv",
            "validation.csv", "certificates.csv", "config.toml", "manifest.json"} <= set(first)
    assert first["config.toml"] == path.read_bytes()
    text = capsys.readouterr().out
    assert "gnn  all" in text and "report written" in text

    assert cli.main(["backtest", "--config", str(path)]) == 0
    assert {p.name: p.read_bytes() for p in report.iterdir()} == first
    assert not any(p.name.endswith(".partial") for p in out.iterdir())


def test_env_config_and_seed_flag(tmp_path, monkeypatch):
    path = write_cfg(tmp_path, seed=3)
    monkeypatch.setenv("FXARB_CONFIG", str(path))
    monkeypatch.setenv("FXARB_SEED", "4")
    assert cli.main(["synth", "--seed", "9"]) == 0
    man = json.loads((tmp_path / "out" / "data" / "manifest.json").read_text())
    assert man["seed"] == 9


def test_installed_entry_point_runs_verify():
    proc = subprocess.run([sys.executable, "-m", "fxarb.cli", "verify"], capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "9/9 properties pass" in proc.stdout
    assert proc.stdout.count("PASS ") == 9
