"""Acceptance criteria 1-11, one PASS/FAIL line each.

Criteria 1-10 come from a single ``rectiflow check`` run (which is itself
part of criterion 11); each test reports its criterion's line and asserts on
the recorded verdict. Thresholds live in :mod:`rectiflow.checks`.
"""

import json
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from rectiflow.checks import CHECKS
from rectiflow.cli import main
from rectiflow.experiments import SimulationConfig, run_simulation
from rectiflow.remote import RemoteField, RemoteFieldEndpoint

SERVER = [sys.executable, "-m", "rectiflow.fieldserver", "--mode", "analytic"]


def report(capsys, line):
    with capsys.disabled():
        print(f"\n{line}")


@pytest.fixture(scope="module")
def check_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("check")
    res = CliRunner().invoke(main, ["check", "--out", str(out)], catch_exceptions=False)
    lines = {}
    for line in res.output.splitlines():
        if line.startswith("[PASS]") or line.startswith("[FAIL]"):
            number = int(line.split("]", 1)[1].split(".", 1)[0])
            lines[number] = line
    doc = json.loads((out / "check.json").read_text())
    return res.exit_code, lines, {c["number"]: c for c in doc["criteria"]}, out


@pytest.mark.parametrize("number", range(1, len(CHECKS) + 1))
def test_criterion(check_run, capsys, number):
    _, lines, results, _ = check_run
    report(capsys, lines.get(number, f"[FAIL] {number:2d}. did not run"))
    assert results[number]["passed"], lines.get(number)


def _replay_ok(runner, args, tmp):
    orig, again = tmp / "orig", tmp / "again"
    first = runner.invoke(main, [*args, "--out", str(orig)], catch_exceptions=False)
    second = runner.invoke(main, ["replay", str(orig / "manifest.json"), "--out", str(again)],
                           catch_exceptions=False)
    return first.exit_code == 0 and second.exit_code == 0 and "DIFF" not in second.output


def test_criterion_11_tooling(check_run, capsys, tmp_path):
    exit_code, lines, _, _ = check_run
    runner = CliRunner()
    parts = {"check exits 0 with criteria 1-10": exit_code == 0 and len(lines) == len(CHECKS)}

    runs = {
        "simulate": ["simulate", "--process", "fwd_ctrl_sde", "--gamma", "0.3", "--steps", "50"],
        "paths": ["paths", "--process", "ou_fwd_ode", "--steps", "30", "--format", "json"],
        "invert": ["invert", "--method", "ctrl_sde", "--steps", "40"],
        "table5": ["table5", "--steps", "50"],
        "check": ["check", "--only", "8", "--only", "9"],
    }
    for name, args in runs.items():
        parts[f"replay {name}"] = _replay_ok(runner, args, tmp_path / name)

    same = True
    for process in ("fwd_ctrl_ode", "rev_ctrl_ode"):
        cfg = SimulationConfig(process=process, gamma=0.5, eta=0.5, n_steps=40, n_particles=6)
        with RemoteField(RemoteFieldEndpoint(command=SERVER)) as rf:
            same &= np.array_equal(run_simulation(cfg, rf.as_field()).paths, run_simulation(cfg).paths)
    proc = subprocess.Popen([*SERVER, "--tcp", "0"], stdout=subprocess.PIPE, text=True)
    try:
        port = int(proc.stdout.readline())
        cfg = SimulationConfig(process="fwd_ctrl_ode", gamma=0.5, n_steps=40, n_particles=6)
        with RemoteField(RemoteFieldEndpoint(transport="tcp", address=f"127.0.0.1:{port}")) as rf:
            same &= np.array_equal(run_simulation(cfg, rf.as_field(), n_jobs=3).paths, run_simulation(cfg).paths)
    finally:
        proc.kill()
        proc.wait()
    parts["remote double bit-for-bit (stdio, tcp)"] = bool(same)

    ok = all(parts.values())
    detail = "; ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in parts.items())
    report(capsys, f"[{'PASS' if ok else 'FAIL'}] 11. tooling: {detail}")
    assert ok, detail
