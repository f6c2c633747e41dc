"""Tests for the command-line interface and its exit codes."""

import numpy as np
import pytest

from airfeel import cli
from airfeel import channel as ch

TINY = """\
K = 2
N = 4
q = 5
D = 20
m_b = 4
trials = 2
holdout = 50
policies = ("gap-min", "fixed-power")
w_bound_factor = 1.0
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def run(argv):
    return cli.main(argv)


def test_bad_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("warp_speed = 9\n")
    assert run(["compare", "--config", str(path)]) == cli.EXIT_BAD_CONFIG
    assert "unknown config key" in capsys.readouterr().err


def test_bad_override_exits_1(capsys):
    assert run(["compare", "--set", "nope=1"]) == cli.EXIT_BAD_CONFIG
    assert run(["compare", "--set", "oops"]) == cli.EXIT_BAD_CONFIG


def test_solve_success_exits_0(tiny_config, capsys):
    assert run(["solve", "--config", tiny_config]) == cli.EXIT_OK
    assert "objective" in capsys.readouterr().out


def test_solve_writes_schedule(tiny_config, tmp_path, capsys):
    out = tmp_path / "sched.csv"
    assert run(["solve", "--config", tiny_config, "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 2 * 4 + 1  # K * N data rows plus header


def test_infeasible_unbiased_exits_2(tiny_config, capsys):
    code = run(["solve", "--config", tiny_config, "--case", "unbiased",
                "--set", "p_ave_base=(1e-4,)", "--set", "p_max_multiplier=1.0"])
    assert code == cli.EXIT_INFEASIBLE
    assert "infeasible" in capsys.readouterr().err


def test_feasibility_reports_level(tiny_config, capsys):
    code = run(["feasibility", "--config", tiny_config,
                "--set", "p_ave_base=(500.0,)"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert "feasible: True" in out


def test_solve_reads_trace_file(tiny_config, tmp_path, capsys):
    trace = ch.draw_channels(3, 2, 4, 0.0)
    tpath = tmp_path / "trace.txt"
    ch.save_trace(trace, tpath)
    assert run(["solve", "--config", tiny_config,
                "--trace", str(tpath)]) == cli.EXIT_OK


def test_compare_writes_csv(tiny_config, tmp_path, capsys):
    out = tmp_path / "cmp.csv"
    assert run(["compare", "--config", tiny_config, "--out", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("#")
    assert "round" in text


def test_simulate_single_policy(tiny_config, capsys):
    assert run(["simulate", "--config", tiny_config,
                "--policy", "fixed-power"]) == cli.EXIT_OK
    assert "fixed-power" in capsys.readouterr().out


def test_bound_command(tiny_config, capsys):
    code = run(["bound", "--config", tiny_config, "--checkpoints", "2,4",
                "--set", "trials=2", "--set", "p_ave_base=(500.0,)"])
    assert code == cli.EXIT_OK
    assert "N=" in capsys.readouterr().out


def test_verify_command(tiny_config, capsys):
    code = run(["verify", "--config", tiny_config, "--instances", "2"])
    assert code == cli.EXIT_OK
    assert "verified" in capsys.readouterr().out
