import json

import pytest

from conftest import small_config
from strategic_select import cli
from strategic_select.model import DataFormatError, save_config

COMMANDS = ("table1", "table2", "estimation-error", "rho-sweep", "coalition", "sensitivity", "welfare")


def write_config(tmp_path, command, **kw):
    path = tmp_path / f"{command}.yaml"
    save_config(small_config(cli.DEFAULT_N[command], replicates=2, **kw), path)
    return path


def run(tmp_path, command, *extra, out="out"):
    cfg = write_config(tmp_path, command)
    argv = [command, "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / out), *extra]
    return cli.main(argv)


def test_table1_outputs(tmp_path, capsys):
    assert run(tmp_path, "table1") == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "table1.csv", "table1.svg"]
    header = (out / "table1.csv").read_text().splitlines()[0]
    assert header == "candidate,utility,stderr,n_complied"
    assert "table1 results written" in capsys.readouterr().out


def test_manifest_contents(tmp_path):
    assert run(tmp_path, "table1", "--replicates", "2") == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    entry = manifest["commands"]["table1"]
    assert entry["seed"] == 3
    assert entry["flags"] == {"replicates": 2}
    assert len(entry["config_hash"]) == 64
    assert "table1.csv" in entry["outputs"]
    assert {"strategic_select", "numpy", "scipy", "python"} <= set(manifest["versions"])
    assert "time" not in json.dumps(manifest)


def test_manifest_merges_commands(tmp_path):
    assert run(tmp_path, "table1") == 0
    assert run(tmp_path, "welfare") == 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert set(manifest["commands"]) == {"table1", "welfare"}


def test_rerun_is_byte_identical(tmp_path):
    assert run(tmp_path, "rho-sweep", "--rho-grid", "0.5,1", out="a") == 0
    assert run(tmp_path, "rho-sweep", "--rho-grid", "0.5,1", "--threads", "3", out="b") == 0
    for name in ("rho-sweep.csv", "rho-sweep.svg", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_welfare_prints_verdicts(tmp_path, capsys):
    assert run(tmp_path, "welfare") == 0
    text = capsys.readouterr().out
    assert "env 1: regulation" in text
    assert (tmp_path / "out" / "welfare.json").exists()


def test_grid_flags(tmp_path):
    assert run(tmp_path, "estimation-error", "--t-grid", "20 40") == 0
    rows = cli.read_csv(tmp_path / "out" / "estimation-error.csv")
    assert {r["T"] for r in rows} == {"20", "40"}


def test_alpha_grid_flag(tmp_path):
    assert run(tmp_path, "sensitivity", "--alpha-grid", "0,1") == 0
    rows = cli.read_csv(tmp_path / "out" / "sensitivity.csv")
    assert {r["alpha"] for r in rows} == {"0.0", "1.0"}


# errors and exit codes


def test_negative_seed_is_usage_error(tmp_path, capsys):
    assert cli.main(["table1", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert "error: usage:" in capsys.readouterr().err


def test_bad_grid_is_usage_error(tmp_path):
    assert cli.main(["rho-sweep", "--rho-grid", "a,b", "--out", str(tmp_path)]) == 2


def test_unknown_command():
    assert cli.main(["nonsense"]) == 2


def test_invalid_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("population:\n  agents_per_round: -5\n")
    assert cli.main(["table1", "--config", str(cfg), "--out", str(tmp_path)]) == 3
    assert "error: config:" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert cli.main(["table1", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) in (3, 7)


def test_wrong_environment_count(tmp_path, capsys):
    cfg = tmp_path / "n1.yaml"
    save_config(small_config(1), cfg)
    assert cli.main(["table2", "--config", str(cfg), "--out", str(tmp_path)]) == 5


def test_thread_env_overrides_flag(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SS_THREADS", "0")
    assert run(tmp_path, "table1", "--threads", "2") == 2
    monkeypatch.setenv("SS_THREADS", "two")
    assert run(tmp_path, "table1") == 2
    assert "SS_THREADS" in capsys.readouterr().err


def test_thread_env_accepted(tmp_path, monkeypatch):
    assert run(tmp_path, "table1", out="a") == 0
    monkeypatch.setenv("SS_THREADS", "4")
    assert run(tmp_path, "table1", out="b") == 0
    assert (tmp_path / "a" / "table1.csv").read_bytes() == (tmp_path / "b" / "table1.csv").read_bytes()


# plotting


def test_plot_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["plot", str(empty)]) == 4
    assert "empty input" in capsys.readouterr().err


def test_plot_header_only(tmp_path):
    path = tmp_path / "head.csv"
    path.write_text("candidate,utility,stderr\n")
    with pytest.raises(DataFormatError, match="empty"):
        cli.read_csv(path)


def test_plot_lists_missing_columns(tmp_path, capsys):
    path = tmp_path / "odd.csv"
    path.write_text("candidate,utility\nAO,1.0\n")
    assert cli.main(["plot", str(path)]) == 4
    err = capsys.readouterr().err
    assert "missing columns" in err and "stderr" in err


def test_detect_schema_strict():
    with pytest.raises(DataFormatError, match="missing columns: ci_high, ci_low"):
        cli.detect_schema(["method", "rho", "mean"], "rho-sweep")
    assert cli.detect_schema(["candidate", "utility", "stderr", "n_complied"]) == "table1"
    assert cli.detect_schema(["theta1", "theta2", "utility", "stderr"]) == "table2"


def test_plot_table1_bars(tmp_path):
    assert run(tmp_path, "table1") == 0
    csv_path = tmp_path / "out" / "table1.csv"
    target = tmp_path / "again.svg"
    assert cli.main(["plot", str(csv_path), "--output", str(target)]) == 0
    svg = target.read_text()
    assert svg.startswith("<svg") and "<rect" in svg
    assert svg == (tmp_path / "out" / "table1.svg").read_text()


def test_plot_estimation_error_band(tmp_path):
    assert run(tmp_path, "estimation-error") == 0
    svg = (tmp_path / "out" / "estimation-error.svg").read_text()
    assert "<polygon" in svg and "<polyline" in svg


def test_write_csv_repr_floats(tmp_path):
    path = tmp_path / "x.csv"
    cli.write_csv(path, [{"a": 0.1, "b": 1}, {"a": float("nan"), "c": True}])
    assert path.read_text() == "a,b,c\n0.1,1,\nnan,,1\n"


def test_version(capsys):
    assert cli.main(["--version"]) == 0
    assert "strategic-select" in capsys.readouterr().out
