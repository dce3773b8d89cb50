import csv
import json

import pytest

from densityreach import cli, dynamics as D
from densityreach.conditions import Certificate
from densityreach.problem import example1, save_problem
from densityreach.sdp import parse_sdpa


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run("synthesize", "--problem", "double_integrator", "--deg-rho", 6, "--deg-mult", 6,
               "--no-search", "--samples", 100, "--out", out)
    assert code == 0
    return out


def test_synthesize_writes_fixed_layout(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {"certificate.json", "check.json", "summary.txt", "manifest.json"} <= names
    check = json.loads((synth_dir / "check.json").read_text())
    assert check["verdict"] == "pass"
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["status"] == "certified"
    assert {"config", "versions", "seeds", "wall_time_s", "timestamp"} <= manifest.keys()
    val = json.loads((synth_dir / "validation.json").read_text())
    assert val["reach_fraction"] >= 0.99


def test_synthesis_on_control_free_problem_is_usage_error(tmp_path):
    assert run("verify", "--problem", "decay", "--condition", "synthesis", "--out", tmp_path) == 1
    assert run("synthesize", "--problem", "example1", "--out", tmp_path) == 1


def test_exhausted_search_exits_2_with_attempt_table(tmp_path):
    code = run("verify", "--problem", "growth", "--condition", "weak-exp", "--deg-rho", "2..4",
               "--out", tmp_path)
    assert code == 2
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[0] == "search exhausted"
    assert len(summary) == 1 + 7
    assert not (tmp_path / "certificate.json").exists()
    assert (tmp_path / "manifest.json").exists()


def test_bad_flags_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run("verify", "--problem", "decay", "--condition", "nonsense")
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        run("verify", "--problem", "decay", "--condition", "weak-exp", "--deg-rho", "5..2")
    assert err.value.code == 1
    assert run("verify", "--problem", "decay", "--condition", "prajna", "--lambda", "0.1",
               "--out", tmp_path) == 1
    assert run("verify", "--problem", tmp_path / "missing.json", "--condition", "prajna",
               "--out", tmp_path) == 1
    assert capsys.readouterr().out == ""


def test_verify_decay_and_rerun_is_byte_identical(tmp_path):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert run("verify", "--problem", "decay", "--condition", "weak-exp", "--deg-rho", "6..8",
                   "--out", d) == 0
    for name in ("certificate.json", "check.json", "summary.txt", "problem.json"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    m = [json.loads((d / "manifest.json").read_text()) for d in dirs]
    for x in m:
        x.pop("timestamp"), x.pop("wall_time_s"), x["config"].pop("out")
    assert m[0] == m[1]


def test_check_subcommand_pass_and_fail(tmp_path, synth_dir):
    cert = synth_dir / "certificate.json"
    assert run("check", "--problem", "double_integrator", "--certificate", cert,
               "--out", tmp_path / "ok") == 0
    obj = json.loads(cert.read_text())
    broken = Certificate.from_json(obj)
    basis, Q = broken.grams["flow"]
    Q = Q.copy()
    Q[0, 0] += 1e-2
    broken.grams["flow"] = (basis, Q)
    broken.save(tmp_path / "broken.json")
    assert run("check", "--problem", "double_integrator", "--certificate", tmp_path / "broken.json",
               "--out", tmp_path / "bad") == 2
    assert json.loads((tmp_path / "bad" / "check.json").read_text())["verdict"] == "fail"


def test_simulate_example1_reaches_everywhere(tmp_path):
    path = tmp_path / "example1.json"
    save_problem(example1(), path)
    assert run("simulate", "--problem", path, "--samples", 1000, "--seed", 7, "--out", tmp_path / "s") == 0
    rep = json.loads((tmp_path / "s" / "validation.json").read_text())
    assert rep["reach_fraction"] == 1.0
    assert rep["samples"] == 1000


def test_simulate_single_trajectory_and_determinism(tmp_path, synth_dir):
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        assert run("simulate", "--problem", "double_integrator", "--certificate",
                   synth_dir / "certificate.json", "--x0", "0.0,0.1", "--out", d) == 0
        outs.append((d / "trajectory.csv").read_bytes())
    assert outs[0] == outs[1]
    rows = list(csv.reader(outs[0].decode().splitlines()))
    assert rows[0] == ["t", "x1", "x2", "outcome"]
    assert rows[-1][-1] == D.REACHED
    assert run("simulate", "--problem", "double_integrator", "--x0", "0.1", "--out", tmp_path) == 1


def test_levelset_closed_curve(tmp_path, synth_dir):
    assert run("levelset", "--certificate", synth_dir / "certificate.json", "--res", 400,
               "--out", tmp_path) == 0
    rows = list(csv.reader(open(tmp_path / "levelset.csv")))
    assert rows[0] == ["curve_id", "x", "y"]
    assert len(rows) > 10
    assert "closed" in (tmp_path / "summary.txt").read_text()
    closed = int((tmp_path / "summary.txt").read_text().split(",")[1].split()[0])
    assert closed >= 1


def test_export_sdpa_prajna_roundtrips(tmp_path):
    path = tmp_path / "example1.json"
    save_problem(example1(), path)
    assert run("export-sdpa", "--problem", path, "--condition", "prajna", "--deg-rho", 6,
               "--deg-mult", 12, "--out", tmp_path / "x") == 0
    files = list((tmp_path / "x").glob("*.dat-s"))
    assert [f.name for f in files] == ["example1_prajna_6_12.dat-s"]
    sdp = parse_sdpa(files[0])
    assert sdp.m > 0 and sdp.n_free > 0


@pytest.mark.xfail(strict=True, reason="weak-exp lambda=-0.499 is infeasible at (6, 6) at eps0=1e-6; "
                                       "see notes/decisions.md")
def test_verify_example1_at_degree_six(tmp_path):
    path = tmp_path / "example1.json"
    save_problem(example1(), path)
    assert run("verify", "--problem", path, "--condition", "weak-exp", "--lambda", "-0.499",
               "--deg-rho", 6, "--deg-mult", 6, "--no-search", "--out", tmp_path / "v") == 0
