import csv
import hashlib
import json

import numpy as np
import pytest

from raresim.cli import main
from raresim.errors import CacheInvalidError, ConfigError, FieldParseError
from raresim.experiments import cache_control, parse_config
from raresim.fields import read_field_csv, write_field_csv
from raresim.hjb import GridSpec, extract_control, solve_hjb
from raresim.presets import get_preset


@pytest.fixture(scope="module")
def ou_fields():
    sc = get_preset("ou-chain-2x1")
    grid = GridSpec.for_problem(sc.system, sc.domain, 0.5, 21, terminal=sc.terminal, n_store=11)
    J = solve_hjb(sc.system, sc.domain, sc.terminal, 0.5, grid)
    return sc, J, extract_control(J, sc.system)


def test_control_round_trip(tmp_path, ou_fields):
    sc, J, v = ou_fields
    path = tmp_path / "field_v.csv"
    write_field_csv(path, v, "v", {"preset": sc.name, "params": sc.params})
    back = cache_control(path, sc, 0.5, 21)
    assert np.array_equal(back.values, v.values) and np.array_equal(back.clamped, v.clamped)
    assert np.array_equal(back.times, v.times) and back.cap == v.cap and back.grid == v.grid
    x = np.array([[0.1, -0.3], [0.95, 0.2]])
    assert np.array_equal(back.evaluate(0.4, x)[0], v.evaluate(0.4, x)[0])


def test_value_round_trip(tmp_path, ou_fields):
    _, J, _ = ou_fields
    write_field_csv(tmp_path / "J.csv", J, "J")
    back = read_field_csv(tmp_path / "J.csv")
    assert np.array_equal(back.values, J.values) and back.scheme == J.scheme


def test_cache_guards(tmp_path, ou_fields):
    sc, _, v = ou_fields
    path = tmp_path / "field_v.csv"
    write_field_csv(path, v, "v", {"preset": sc.name, "params": sc.params})
    with pytest.raises(CacheInvalidError):
        cache_control(path, sc, 0.25)
    with pytest.raises(CacheInvalidError):
        cache_control(path, sc, 0.5, 41)
    with pytest.raises(CacheInvalidError):
        cache_control(path, get_preset("ou-chain-2x1", L=2.0), 0.5)
    lines = path.read_text().splitlines(keepends=True)
    cut = tmp_path / "cut.csv"
    cut.write_text("".join(lines[:200]) + lines[200][:7])
    with pytest.raises(FieldParseError) as info:
        cache_control(cut, sc, 0.5)
    assert info.value.line == 201 and "line 201" in str(info.value)
    cut.write_text("".join(lines[:200]))
    with pytest.raises(FieldParseError) as info:
        cache_control(cut, sc, 0.5)
    assert "truncated" in str(info.value)


def test_config_errors_name_field_and_line():
    with pytest.raises(ConfigError) as info:
        parse_config('preset = "free-bm-1"\n\neps = [1.0, -1]\n')
    assert info.value.field == "eps" and info.value.line == 3 and "line 3" in str(info.value)
    with pytest.raises(ConfigError) as info:
        parse_config('preset = "free-bm-1"\nn_sample = 10\n')
    assert info.value.line == 2
    with pytest.raises(ConfigError) as info:
        parse_config('preset = "free-bm-1"\neps = [1.0\n')
    assert info.value.line is not None
    with pytest.raises(ConfigError):
        parse_config('kind = "plot"\n')
    with pytest.raises(ConfigError):
        parse_config('[grid]\npoints = 2\n')
    cfg = parse_config('preset = "ou-chain-2x1"\neps = 0.5\n[params]\nL = 2.0\n[action]\nknots = 16\n')
    assert cfg.eps == [0.5] and cfg.params == {"L": 2.0} and cfg.action_knots == 16


def write_config(tmp_path, body):
    path = tmp_path / "run.toml"
    path.write_text(f'output_dir = "{(tmp_path / "out").as_posix()}"\n' + body + "\n")
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_cli_mc_smoke(tmp_path):
    cfg = write_config(tmp_path, 'preset = "free-bm-1"\neps = [1.0]\nn_samples = 10000\nseed = 4')
    assert main(["mc", "--config", str(cfg), "--workers", "1"]) == 0
    out = tmp_path / "out"
    rows = read_rows(out / "reports.csv")
    assert len(rows) == 1 and rows[0]["kind"] == "plain" and rows[0]["seed"] == "4"
    manifest = json.loads((out / "manifest.json").read_text())
    digest = hashlib.sha256((out / "reports.csv").read_bytes()).hexdigest()
    assert manifest["outputs"] == {"reports.csv": digest}
    assert manifest["config"]["n_samples"] == 10000 and manifest["stages"]


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_config(tmp_path, 'preset = "free-bm-1"\neps = [-1.0]')
    assert main(["mc", "--config", str(bad)]) == 2
    assert "eps" in capsys.readouterr().err
    assert main(["mc", "--config", str(tmp_path / "missing.toml")]) == 2
    overflow = write_config(tmp_path, 'preset = "free-bm-1"\ndt = 0.001\n[simulation]\nmax_steps = 10')
    assert main(["mc", "--config", str(overflow)]) == 3
    assert "stage" in capsys.readouterr().err
    badp = write_config(tmp_path, 'preset = "free-bm-1"\n[params]\nL = -1.0')
    assert main(["mc", "--config", str(badp)]) == 2


def test_cli_compare_campaign(tmp_path):
    cfg = write_config(tmp_path, 'preset = "ou-chain-2x1"\neps = [0.5, 0.25]\nn_samples = 100000\nseed = 8\n'
                                 '[grid]\npoints = 41')
    assert main(["compare", "--config", str(cfg), "--workers", "1"]) == 0
    out = tmp_path / "out"
    rows = read_rows(out / "reports.csv")
    assert [r["kind"] for r in rows] == ["plain", "importance"] * 2
    for r in read_rows(out / "compare.csv"):
        assert float(r["delta_is"]) < float(r["delta_plain"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"reports.csv", "compare.csv"}


def test_cli_hjb_then_cached_is(tmp_path):
    cfg = write_config(tmp_path, 'preset = "ou-chain-2x1"\neps = [0.5]\nn_samples = 2000\n[grid]\npoints = 21')
    assert main(["hjb", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert {"field_J.csv", "field_v.csv", "field_q.csv", "hjb.csv"} <= {p.name for p in out.iterdir()}
    cached = tmp_path / "is.toml"
    cached.write_text(f'control_cache = "{out.as_posix()}"\n' + cfg.read_text())
    assert main(["is", "--config", str(cached), "--out", str(tmp_path / "is"), "--dump-paths"]) == 0
    rows = read_rows(tmp_path / "is" / "reports.csv")
    assert rows[0]["kind"] == "importance"
    paths = read_rows(tmp_path / "is" / "paths.csv")
    assert {r["estimator"] for r in paths} == {"plain", "is"}
    assert all(r["log_weight"] == "0.0" for r in paths if r["estimator"] == "plain")
    assert any(float(r["log_weight"]) != 0.0 for r in paths if r["estimator"] == "is")


def test_cli_action_and_sweep(tmp_path):
    cfg = write_config(tmp_path, 'preset = "free-bm-1"\neps = [1.0, 0.5]\nn_samples = 5000')
    assert main(["action", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    summary = read_rows(out / "action_summary.csv")[0]
    assert float(summary["action"]) == pytest.approx(0.5) and summary["converged"] == "1"
    assert len(read_rows(out / "comparison.csv")) == 2
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "sw")]) == 0
    assert len(read_rows(tmp_path / "sw" / "sweep.csv")) == 2
