import json

import app.cli
from app.cli import EXIT_CONFIG, EXIT_INTERNAL, EXIT_NUMERICAL, EXIT_OK, main


def _write(tmp_path, text):
    path = tmp_path / "run.conf"
    path.write_text(text)
    return str(path)


def test_successful_run(tmp_path, capsys):
    config = _write(tmp_path, "solver = meanfield\nmodel.N = 10\ntime.t_end = 1\n")
    code = main(["simulate", "--config", config, "--out", str(tmp_path / "out"), "--seed", "7"])
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["base_seed"] == 7
    assert "final_m" in json.loads(capsys.readouterr().out)


def test_invalid_config_exits_with_error_record(tmp_path):
    config = _write(tmp_path, "solver = meanfield\nmodel.N = -3\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_CONFIG
    error = json.loads((out / "error.json").read_text())
    assert error["exit_code"] == EXIT_CONFIG
    assert error["error_type"] == "ConfigError"
    assert error["errors"][0].startswith("line 2: model.N")


def test_missing_config_file(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(tmp_path / "absent.conf"), "--out", str(out)]) == EXIT_CONFIG
    assert (out / "error.json").exists()


def test_override_flag(tmp_path):
    config = _write(tmp_path, "solver = meanfield\nmodel.N = 10\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out), "--override", "model.N=0"]) == EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path):
    config = _write(tmp_path, "solver = exact\nmodel.N = 2\nmodel.coupling = 3\nexact.n_fock = 2\n"
                              "time.t_end = 1\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_NUMERICAL
    error = json.loads((out / "error.json").read_text())
    assert error["error_type"] == "FockTruncationExceeded"
    assert (out / "manifest.json").exists()


def test_unwritable_output_directory(tmp_path):
    config = _write(tmp_path, "solver = meanfield\nmodel.N = 10\ntime.t_end = 1\n")
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    assert main(["simulate", "--config", config, "--out", str(blocker / "out")]) == EXIT_INTERNAL


def test_unexpected_error_leaves_error_record(tmp_path, monkeypatch):
    def broken_run(*args, **kwargs):
        raise KeyError("sx")

    monkeypatch.setattr(app.cli, "run", broken_run)
    config = _write(tmp_path, "solver = meanfield\nmodel.N = 10\n")
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_INTERNAL
    error = json.loads((out / "error.json").read_text())
    assert error["exit_code"] == EXIT_INTERNAL
    assert error["error_type"] == "KeyError"
