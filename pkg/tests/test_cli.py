from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from hwqueue.cli import EXPERIMENTS, main, parse_config
from hwqueue.model import ModelError, exponents

from conftest import SB_MU1, SB_MU2, SB_P

SYSTEM = f"""[system]
n = 100
B = 0.0
p = {SB_P!r}
mu1 = {SB_MU1!r}
mu2 = {SB_MU2!r}
theta = 0.2
"""


def _write(tmp_path, experiment_lines: str):
    path = tmp_path / "run.ini"
    path.write_text(SYSTEM + "\n[experiment]\n" + experiment_lines)
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _summary(path):
    out = {}
    for line in path.read_text().splitlines():
        k, v = line.split(": ", 1)
        out[k] = v
    return out


def test_exponent_experiment(tmp_path):
    cfg = _write(tmp_path, "name = exponent\n")
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 0
    row = _rows(out / "results.csv")[0]
    rep = exponents(0.2, SB_MU1, SB_MU2)
    assert float(row["true_exponent"]) == rep.true_exponent
    assert float(row["dai_he_exponent"]) == rep.dai_he_exponent
    assert float(row["gap"]) == rep.gap
    assert (out / "figure.csv").read_text().startswith("theta,true_exponent,dai_he_exponent\n")
    man = json.loads((out / "manifest.json").read_text())
    assert man["experiment"] == "exponent" and man["config"].startswith("[system]")


def test_counterexample_experiment(tmp_path):
    cfg = _write(tmp_path, "name = counterexample\n")
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out)]) == 0
    rows = _rows(out / "results.csv")
    assert [r["distribution"] for r in rows] == ["S_a", "S_b"]
    for r in rows:
        assert abs(float(r["mean"]) - 1) <= 1e-12 and abs(float(r["second_moment"]) - 4) <= 1e-12
    assert rows[0]["true_exponent"] != rows[1]["true_exponent"]
    assert rows[0]["dai_he_exponent"] == rows[1]["dai_he_exponent"] or \
        abs(float(rows[0]["dai_he_exponent"]) - float(rows[1]["dai_he_exponent"])) <= 1e-15


def test_malformed_config_exits_2_without_artifacts(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[system]\nn = ten\n")
    out = tmp_path / "out"
    assert main(["--config", str(path), "--out", str(out)]) == 2
    assert not out.exists()


@pytest.mark.parametrize("extra", ["name = nope\n", "name = simulate\nbogus = 1\n", "name = simulate\nhorizon = -1\n",
                                   "name = gauss-sup\nx_lo = 3\nx_hi = 2\n"])
def test_config_validation(extra):
    with pytest.raises(ModelError):
        parse_config(SYSTEM + "\n[experiment]\n" + extra)


def test_overrides_apply():
    cfg = parse_config(SYSTEM + "\n[experiment]\nname = simulate\nseed = 1\n",
                       {"experiment": "skorokhod", "seed": 9, "reps": 4, "parallel": 1})
    assert cfg.experiment == "skorokhod" and cfg.seed == 9 and cfg.reps == 4 and cfg.parallel == 1
    assert set(EXPERIMENTS) >= {"exponent", "report"}


def test_simulate_is_deterministic_across_parallelism(tmp_path):
    cfg = _write(tmp_path, "name = simulate\nreps = 3\nhorizon = 150\nburn_in = 20\nseed = 4\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(a), "--parallel", "1"]) == 0
    assert main(["--config", str(cfg), "--out", str(b), "--parallel", "2"]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "summary.txt").read_bytes() == (b / "summary.txt").read_bytes()


def test_manifest_regenerates_run(tmp_path):
    cfg = _write(tmp_path, "name = skorokhod\nreps = 2\nhorizon = 10\nseed = 3\n")
    a = tmp_path / "a"
    assert main(["--config", str(cfg), "--out", str(a), "--parallel", "1"]) == 0
    man = json.loads((a / "manifest.json").read_text())
    replay = tmp_path / "replay.ini"
    replay.write_text(man["config"])
    b = tmp_path / "b"
    assert main(["--config", str(replay), "--out", str(b), "--parallel", "1"]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert float(_summary(a / "summary.txt")["max_discrepancy"]) <= 1e-9


def test_dominance_experiment(tmp_path):
    path = tmp_path / "dom.ini"
    path.write_text("[system]\nn = 3\nB = 0\np = 0.3333333333333333\nmu1 = 0.5\nmu2 = 2\ntheta = 0.1\n"
                    "[experiment]\nname = dominance\nreps = 5\nhorizon = 20\n")
    out = tmp_path / "out"
    assert main(["--config", str(path), "--out", str(out), "--parallel", "1"]) == 0
    assert _summary(out / "summary.txt")["violations"] == "0"


def test_failure_leaves_marker(tmp_path):
    cfg = _write(tmp_path, "name = gauss-sup\nn_paths = 200\nx_lo = 3\nx_hi = 4\n")
    out = tmp_path / "out"
    assert main(["--config", str(cfg), "--out", str(out), "--parallel", "1"]) == 1
    assert (out / "FAILED").exists() and (out / "manifest.json").exists()


def test_report_and_module_entry_point(tmp_path):
    cfg = _write(tmp_path, "name = report\nn_paths = 4000\nx_lo = 1.5\nx_hi = 2.5\nhorizon = 300\n"
                           "burn_in = 20\ndt = 0.02\nreps = 2\n")
    out = tmp_path / "out"
    proc = subprocess.run([sys.executable, "-m", "hwqueue", "--config", str(cfg), "--out", str(out),
                           "--parallel", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    rows = _rows(out / "results.csv")
    assert [r["source"] for r in rows] == ["theory", "conjecture", "gauss-sup", "limit-sim"]
    assert float(rows[0]["estimate"]) == exponents(0.2, SB_MU1, SB_MU2).true_exponent
