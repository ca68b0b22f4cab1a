"""Config parsing and the command-line driver.

Configs are flat ``key = value`` files resolved against per-command
schemas.  The driver maps every failure class to a documented exit
code (0 ok, 2 bad config, 3 numerical abort) and writes the fully
resolved config next to its outputs, so runs can be reproduced from
the output directory alone.
"""

from __future__ import annotations

import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ebdl import autodiff as ad
from ebdl.cli import main
from ebdl.config import (
    ConfigError,
    Field,
    dump_config,
    parse_bool,
    parse_floats,
    read_config_file,
    resolve_config,
)


def _write(tmp_path: Path, text: str, name: str = "run.cfg") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


# -- config files -------------------------------------------------------------------


def test_read_config_ignores_comments_and_blank_lines(tmp_path):
    path = _write(
        tmp_path,
        "# full-line comment\n\nalpha = 3   # trailing comment\n  beta=x y\n",
    )
    assert read_config_file(path) == {"alpha": "3", "beta": "x y"}


def test_read_config_splits_on_the_first_equals_only(tmp_path):
    path = _write(tmp_path, "spec = file:means=weird.txt\n")
    assert read_config_file(path) == {"spec": "file:means=weird.txt"}


def test_read_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        read_config_file(tmp_path / "nope.cfg")


def test_read_config_rejects_bare_words(tmp_path):
    path = _write(tmp_path, "alpha = 1\njust-a-word\n")
    with pytest.raises(ConfigError, match="expected key=value"):
        read_config_file(path)


def test_read_config_rejects_duplicates(tmp_path):
    path = _write(tmp_path, "alpha = 1\nalpha = 2\n")
    with pytest.raises(ConfigError, match="duplicate key"):
        read_config_file(path)


def test_parse_bool_spellings():
    for text in ("true", "1", "yes", "on", " TRUE "):
        assert parse_bool(text) is True
    for text in ("false", "0", "no", "off", "Off"):
        assert parse_bool(text) is False
    with pytest.raises(ValueError, match="not a boolean"):
        parse_bool("maybe")


def test_parse_floats_mixed_separators():
    assert parse_floats("1, 2 3.5,4e-2") == (1.0, 2.0, 3.5, 0.04)
    assert parse_floats("") == ()


# -- schema resolution --------------------------------------------------------------

_SCHEMA = {
    "steps": Field(int),
    "rate": Field(float, 0.5),
    "tag": Field(str, "base"),
    "on": Field(parse_bool, False),
}


def test_resolve_parses_and_fills_defaults():
    values = resolve_config(_SCHEMA, {"steps": "12", "on": "yes"})
    assert values == {"steps": 12, "rate": 0.5, "tag": "base", "on": True}


def test_resolve_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys: blorp, zap"):
        resolve_config(_SCHEMA, {"steps": "1", "zap": "2", "blorp": "3"})


def test_resolve_reports_the_bad_value():
    with pytest.raises(ConfigError, match="bad value for 'steps'"):
        resolve_config(_SCHEMA, {"steps": "twelve"})


def test_resolve_requires_fields_without_defaults():
    with pytest.raises(ConfigError, match="missing required config key 'steps'"):
        resolve_config(_SCHEMA, {})


def test_resolve_overrides_win_unless_none():
    values = resolve_config(
        _SCHEMA, {"steps": "3", "tag": "file"}, {"steps": 9, "tag": None}
    )
    assert values["steps"] == 9
    assert values["tag"] == "file"


def test_resolve_override_satisfies_a_required_key():
    values = resolve_config(_SCHEMA, {}, {"steps": 4})
    assert values["steps"] == 4


def test_dump_config_is_sorted_and_rereadable(tmp_path):
    values = {
        "steps": 12,
        "rate": 1.0 / 3.0,
        "tag": "base",
        "on": True,
        "grid": (0.1, 0.25),
    }
    path = tmp_path / "resolved.txt"
    dump_config(path, values)
    lines = path.read_text().splitlines()
    assert [line.split(" = ")[0] for line in lines] == sorted(values)
    schema = {
        "steps": Field(int),
        "rate": Field(float),
        "tag": Field(str),
        "on": Field(parse_bool),
        "grid": Field(parse_floats),
    }
    assert resolve_config(schema, read_config_file(path)) == values


def test_dump_config_floats_survive_the_round_trip(tmp_path):
    awkward = {"a": 0.1, "b": 1.0 / 3.0, "c": 1e-300, "d": 12345678901234567.0}
    path = tmp_path / "floats.txt"
    dump_config(path, awkward)
    raw = read_config_file(path)
    assert {k: float(v) for k, v in raw.items()} == awkward


# -- driver: clean runs -------------------------------------------------------------

_FE_CFG = """\
potential = gaussian-pair
dim = 2
sigma_a = 1.0
sigma_b = 2.0
estimators = fep,ti,mbar
n_samples = 400
ti_grid = 8
ti_per_t = 256
ti_end = 512
mbar_replicates = 2
"""


def _fe_config(tmp_path: Path, extra: str = "", name: str = "fe.cfg") -> Path:
    return _write(tmp_path, _FE_CFG + extra, name=name)


def test_free_energy_command_writes_the_summary(tmp_path):
    cfg = _fe_config(tmp_path)
    out = tmp_path / "run"
    code = main(["free-energy", "--config", str(cfg), "--seed", "0", "--out", str(out)])
    assert code == 0
    rows = list(csv.reader((out / "free_energy.csv").open()))
    assert rows[0] == ["estimator", "delta_f", "stderr", "n_samples", "grid"]
    assert [r[0] for r in rows[1:]] == ["fep", "ti", "mbar"]
    exact = 2.0 * np.log(2.0)  # d log(sigma_b / sigma_a)
    for row in rows[2:]:  # fep is noisy at this sample size; ti and mbar are not
        assert abs(float(row[1]) - exact) < 0.3
    resolved = (out / "resolved_config.txt").read_text()
    assert "sigma_b = 2\n" in resolved
    assert "seed = 0\n" in resolved


def test_rerun_with_the_same_seed_is_byte_identical(tmp_path):
    cfg = _fe_config(tmp_path)
    blobs = []
    for name in ("one", "two"):
        out = tmp_path / name
        code = main(
            ["free-energy", "--config", str(cfg), "--seed", "3", "--out", str(out)]
        )
        assert code == 0
        blobs.append((out / "free_energy.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_seed_flag_beats_the_config_value(tmp_path):
    cfg = _fe_config(tmp_path, extra="seed = 7\n")
    out = tmp_path / "run"
    assert main(["free-energy", "--config", str(cfg), "--seed", "11", "--out", str(out)]) == 0
    assert "seed = 11\n" in (out / "resolved_config.txt").read_text()


def test_out_directories_are_created_recursively(tmp_path):
    cfg = _fe_config(tmp_path)
    out = tmp_path / "a" / "b" / "c"
    assert main(["free-energy", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "free_energy.csv").is_file()


def test_module_entry_point(tmp_path):
    cfg = _fe_config(tmp_path, name="entry.cfg")
    out = tmp_path / "entry"
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "ebdl.cli",
            "free-energy",
            "--config",
            str(cfg),
            "--out",
            str(out),
        ],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "free_energy.csv").is_file()


# -- driver: config errors ----------------------------------------------------------


def test_missing_out_is_a_config_error(capsys):
    assert main(["free-energy"]) == 2
    assert "no output directory" in capsys.readouterr().err


def test_more_than_one_worker_is_rejected(tmp_path, capsys):
    cfg = _fe_config(tmp_path)
    code = main(
        [
            "free-energy",
            "--config",
            str(cfg),
            "--out",
            str(tmp_path / "w"),
            "--workers",
            "2",
        ]
    )
    assert code == 2
    assert "single-threaded" in capsys.readouterr().err


def test_unknown_config_key_exits_with_the_config_code(tmp_path, capsys):
    cfg = _fe_config(tmp_path, extra="zap = 1\n")
    assert main(["free-energy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "unknown config keys: zap" in capsys.readouterr().err


def test_unparseable_value_exits_with_the_config_code(tmp_path, capsys):
    cfg = _fe_config(tmp_path, extra="fd_step = tiny\n")
    assert main(["free-energy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "bad value for 'fd_step'" in capsys.readouterr().err


def test_missing_config_file_exits_with_the_config_code(tmp_path, capsys):
    code = main(
        [
            "free-energy",
            "--config",
            str(tmp_path / "nope.cfg"),
            "--out",
            str(tmp_path / "r"),
        ]
    )
    assert code == 2
    assert "config file not found" in capsys.readouterr().err


def test_unknown_estimator_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "estimators = fep,zap\n", name="bad.cfg")
    assert main(["free-energy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "unknown estimators: zap" in capsys.readouterr().err


_TRAIN_MIN = "steps = 0\nbatch_size = 8\ndim = 2\n"


def test_unknown_mixture_spec_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, _TRAIN_MIN + "mixture = mog7\n", name="t1.cfg")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "unknown mixture spec" in capsys.readouterr().err


def test_missing_mixture_file_is_a_config_error(tmp_path, capsys):
    spec = f"mixture = file:{tmp_path / 'm.txt'}\n"
    cfg = _write(tmp_path, _TRAIN_MIN + spec, name="t2.cfg")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "mixture file not found" in capsys.readouterr().err


def test_unknown_schedule_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, _TRAIN_MIN + "mixture = mog2\nschedule = warp\n", name="t3.cfg")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2
    assert "unknown schedule" in capsys.readouterr().err


def test_sample_requires_a_checkpoint(tmp_path, capsys):
    assert main(["sample", "--out", str(tmp_path / "r")]) == 2
    assert "missing required config key 'checkpoint'" in capsys.readouterr().err


def test_sample_checkpoint_flag_reaches_the_loader(tmp_path, capsys):
    code = main(
        [
            "sample",
            "--checkpoint",
            str(tmp_path / "nope.ckpt"),
            "--out",
            str(tmp_path / "r"),
        ]
    )
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


# -- driver: numerical aborts -------------------------------------------------------


def test_stalled_mbar_exits_with_the_numerical_code(tmp_path, capsys):
    # a tolerance no residual can beat drives the self-consistent loop
    # into its iteration cap
    cfg = _write(
        tmp_path,
        "estimators = mbar\nn_samples = 50\nmbar_replicates = 2\nmbar_tol = 0.0\n",
        name="stall.cfg",
    )
    assert main(["free-energy", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3
    assert "numerical abort" in capsys.readouterr().err


# -- driver: gradient checker -------------------------------------------------------


def test_grad_check_passes_on_a_healthy_build(tmp_path, capsys):
    out = tmp_path / "gc"
    assert main(["grad-check", "--seed", "0", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "grad_check.csv").open()))
    assert rows[0] == ["check", "max_rel_err", "status"]
    assert len(rows) > 15
    assert all(row[2] == "pass" for row in rows[1:])
    assert "gradient checks passed" in capsys.readouterr().out


def test_grad_check_reports_a_corrupted_adjoint(tmp_path, capsys):
    cfg = _write(tmp_path, "break_op = tanh\n", name="broken.cfg")
    out = tmp_path / "gc"
    assert main(["grad-check", "--config", str(cfg), "--out", str(out)]) == 1
    rows = {row[0]: row[2] for row in list(csv.reader((out / "grad_check.csv").open()))[1:]}
    assert rows["op:tanh"] == "FAIL"
    assert rows["op:matmul"] == "pass"
    assert "gradient check failed" in capsys.readouterr().err
    assert ad.BROKEN_OP_FOR_TESTS is None  # the hook is restored on exit
