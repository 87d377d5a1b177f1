import json
import pathlib

import numpy as np
import pytest

from volterra_heston import cli
from volterra_heston.errors import BlowupError
from volterra_heston.montecarlo import PathSet

FIXTURE = json.loads((pathlib.Path(__file__).parent / "fixtures" / "heston_classical.json").read_text())

BASE = {
    "schema_version": 1,
    "model": {"lam": 2.0, "nu": 0.3, "rho": -0.7},
    "kernel": {"kind": "fractional", "alpha": 0.6},
    "curve": {"V0": 0.04, "theta": 0.08},
    "grid": {"dt": 0.01, "T": 1.0},
}


def config(tmp_path, name="cfg.json", **overrides):
    doc = json.loads(json.dumps(BASE))
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_rows(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config=")
    return lines[1], [line.split(",") for line in lines[2:]]


def test_kernel_check_constant_kernel(tmp_path, capsys):
    cfg = config(tmp_path, kernel={"kind": "expsum", "terms": [[1.0, 0.0]]})
    assert run("kernel-check", "--config", cfg, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "kernel_check.json").read_text())
    assert report["pass"] and report["resolvent_residual"] == 0.0


def test_kernel_check_fractional_passes(tmp_path, capsys):
    cfg = config(tmp_path, grid={"dt": 1e-3, "T": 1.0})
    assert run("kernel-check", "--config", cfg, "--out", tmp_path) == 0
    assert json.loads(capsys.readouterr().out)["pass"]


@pytest.mark.parametrize("change", [
    {"kernel": {"kind": "fractional", "alpha": 0.4}},
    {"bogus": 1},
    {"grid": {"dt": 0.3, "T": 1.0}},
    {"model": {"lam": 1.0, "nu": 0.1, "rho": 1.5}},
    {"schema_version": 2},
])
def test_config_errors_exit_2(tmp_path, capsys, change):
    assert run("charfn", "--config", config(tmp_path, **change), "--out", tmp_path) == 2
    assert json.loads(capsys.readouterr().out)["error"] == "config"


def test_missing_config_and_bad_flags(tmp_path, capsys):
    assert run("charfn", "--config", tmp_path / "nope.json") == 2
    assert run("charfn", "--config", config(tmp_path), "--threads", "0") == 2
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_curve_check_pass_and_fail(tmp_path, capsys):
    assert run("curve-check", "--config", config(tmp_path), "--out", tmp_path / "a") == 0
    bad = config(tmp_path, "bad.json", curve={"tabulated": {"0": 0.04, "0.5": -0.02, "1": 0.04}})
    assert run("curve-check", "--config", bad, "--out", tmp_path / "b") == 1
    report = json.loads((tmp_path / "b" / "curve_check.json").read_text())["report"]
    assert not report["pass"] and report["worst_violation"] < 0


def test_csv_curve_is_inlined(tmp_path, capsys):
    (tmp_path / "curve.csv").write_text("t,value\n0,0.04\n1,0.05\n")
    cfg = config(tmp_path, curve={"csv": "curve.csv"})
    assert run("charfn", "--config", cfg, "--out", tmp_path / "o") == 0
    embedded = json.loads((tmp_path / "o" / "charfn.csv").read_text().splitlines()[0][len("# config="):])
    assert embedded["curve"] == {"tabulated": {"0.0": 0.04, "1.0": 0.05}}


def test_charfn_at_zero(tmp_path, capsys):
    assert run("charfn", "--config", config(tmp_path, charfn={"z": [0.0]}), "--out", tmp_path) == 0
    header, rows = read_rows(tmp_path / "charfn.csv")
    assert header == "z,re,im" and rows == [["0", "1", "0"]]


def test_price_matches_closed_form(tmp_path, capsys):
    cfg = config(tmp_path, kernel={"kind": "expsum", "terms": [[1.0, 0.0]]}, grid={"dt": 1e-3, "T": 1.0},
                 price={"strikes": [row["strike"] for row in FIXTURE["calls"]]})
    assert run("price", "--config", cfg, "--out", tmp_path) == 0
    header, rows = read_rows(tmp_path / "price.csv")
    assert header == "strike,price,iv"
    prices = np.array([float(r[1]) for r in rows])
    np.testing.assert_allclose(prices, [row["price"] for row in FIXTURE["calls"]], atol=1e-6)


def test_simulate_deterministic_and_thread_independent(tmp_path, capsys):
    cfg = config(tmp_path, simulate={"n_paths": 300})
    outs = []
    for i, threads in enumerate((1, 1, 4)):
        assert run("simulate", "--config", cfg, "--out", tmp_path / str(i), "--seed", 42, "--threads", threads) == 0
        outs.append((tmp_path / str(i) / "paths.bin").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    ps = PathSet.read_binary(tmp_path / "0" / "paths.bin")
    assert ps.V.shape == (300, 101)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "other", "--seed", 43) == 0
    assert (tmp_path / "other" / "paths.bin").read_bytes() != outs[0]


@pytest.mark.parametrize("command,artifact", [
    ("kernel-check", "kernel_check.json"),
    ("curve-check", "curve_check.json"),
    ("charfn", "charfn.csv"),
    ("price", "price.csv"),
    ("simulate", "paths.bin"),
    ("simulate", "summary.csv"),
])
def test_rerun_from_embedded_config_is_byte_identical(tmp_path, capsys, command, artifact):
    cfg = config(tmp_path, simulate={"n_paths": 100}, seed=5)
    assert run(command, "--config", cfg, "--out", tmp_path / "first") in (0, 1)
    first = (tmp_path / "first" / artifact).read_bytes()
    assert run(command, "--config", tmp_path / "first" / artifact, "--out", tmp_path / "second") in (0, 1)
    assert (tmp_path / "second" / artifact).read_bytes() == first


def test_lift_compare(tmp_path, capsys):
    cfg = config(tmp_path, grid={"dt": 0.005, "T": 1.0})
    assert run("lift-compare", "--config", cfg, "--out", tmp_path, "--emit-plot-data") == 0
    header, rows = read_rows(tmp_path / "lift_compare.csv")
    assert header == "n,l2_error,cf_error,runtime_s"
    assert [int(r[0]) for r in rows] == [5, 10, 20, 40]
    l2 = [float(r[1]) for r in rows]
    assert all(b < a for a, b in zip(l2, l2[1:]))
    assert (tmp_path / "plot_lift_cf_error.csv").exists()
    # every column but the wall-clock one reproduces
    assert run("lift-compare", "--config", tmp_path / "lift_compare.csv", "--out", tmp_path / "again") == 0
    _, again = read_rows(tmp_path / "again" / "lift_compare.csv")
    assert [r[:3] for r in again] == [r[:3] for r in rows]


def test_plot_data_series(tmp_path, capsys):
    assert run("price", "--config", config(tmp_path), "--out", tmp_path, "--emit-plot-data") == 0
    header, rows = read_rows(tmp_path / "plot_implied_vol.csv")
    assert header == "x,y" and len(rows) == 5


def test_numerical_failure_exit_1(tmp_path, capsys, monkeypatch):
    def boom(*args, **kwargs):
        raise BlowupError("non-finite solution", last_valid_time=0.25)

    monkeypatch.setattr(cli, "characteristic_function", boom)
    assert run("charfn", "--config", config(tmp_path), "--out", tmp_path) == 1
    body = json.loads(capsys.readouterr().out)
    assert body["error"] == "blowup" and body["blowup_time"] == 0.25


def test_log_level_does_not_change_output(tmp_path, capsys, monkeypatch):
    cfg = config(tmp_path)
    assert run("charfn", "--config", cfg, "--out", tmp_path / "quiet") == 0
    monkeypatch.setenv("VH_LOG", "DEBUG")
    assert run("charfn", "--config", cfg, "--out", tmp_path / "loud") == 0
    assert (tmp_path / "quiet" / "charfn.csv").read_bytes() == (tmp_path / "loud" / "charfn.csv").read_bytes()


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        run("price", "--help")
    assert "strike,price,iv" in capsys.readouterr().out
