import json
import subprocess
import sys

import pytest

from mrpack import cli
from mrpack.ir import parse_plan


@pytest.fixture(scope="module")
def tfidf_dir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("tfidf")
    assert cli.main(["gen", "tfidf", "--scale", "2000", "--out", str(wd)]) == 0
    return wd


def test_gen_writes_plan_and_data(tfidf_dir):
    plan = parse_plan(tfidf_dir / "plan.json")
    assert sorted(plan.jobs) == ["J1", "J2", "J3"]
    assert (tfidf_dir / "data" / "D0" / "part-00000.tsv").exists()
    assert plan.jobs["J1"].annotations.profile is not None


def test_run_prints_counters(tfidf_dir, tmp_path, capsys):
    assert cli.main(["run", str(tfidf_dir / "plan.json"), "--data", str(tfidf_dir / "data"),
                     "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("J1\tmap_in=2000")
    assert (tmp_path / "out" / "D3").is_dir()


def test_optimize_then_verify(tfidf_dir, tmp_path, capsys):
    opt = tmp_path / "opt.json"
    rep = tmp_path / "rep.json"
    assert cli.main(["optimize", str(tfidf_dir / "plan.json"), "--out", str(opt), "--report", str(rep),
                     "--budget", "20"]) == 0
    text = capsys.readouterr().out
    assert "[vertical unit 1]" in text and " * p" in text
    report = json.loads(rep.read_text())
    assert report["summary"]["jobs_after"] == len(parse_plan(opt).jobs)
    assert cli.main(["verify", str(tfidf_dir / "plan.json"), str(opt), "--data", str(tfidf_dir / "data")]) == 0
    assert capsys.readouterr().out.startswith("equal")


def test_verify_reports_differences(tfidf_dir, tmp_path, capsys):
    obj = json.loads((tfidf_dir / "plan.json").read_text())
    obj["jobs"]["J3"]["program"]["reduce"][0]["reduce"]["args"]["total_docs"] += 1
    other = tmp_path / "other.json"
    other.write_text(json.dumps(obj))
    assert cli.main(["verify", str(tfidf_dir / "plan.json"), str(other), "--data", str(tfidf_dir / "data")]) == 1
    assert "outputs differ" in capsys.readouterr().out


def test_explain_text_and_json(capsys, tfidf_dir):
    assert cli.main(["explain", str(tfidf_dir / "plan.json")]) == 0
    text = capsys.readouterr().out
    assert "unit 1: producers=J1 consumers=J2" in text
    assert "not applicable: " in text and "not-applicable" not in text
    assert cli.main(["explain", str(tfidf_dir / "plan.json"), "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["jobs"] == 3 and rep["units"]


def test_input_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{ nope")
    assert cli.main(["explain", str(bad)]) == 2
    assert "line 1" in capsys.readouterr().err
    assert cli.main(["gen", "nosuch", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["explain", str(tmp_path / "missing.json")]) == 2


def test_verify_needs_inputs(tfidf_dir):
    p = str(tfidf_dir / "plan.json")
    assert cli.main(["verify", p, p]) == 2
    assert cli.main(["verify", p, p, "--gen", "tfidf", "--scale", "500"]) == 0


def test_profile_rejects_empty_inputs(tmp_path, tfidf_dir):
    data = tmp_path / "data" / "D0"
    data.mkdir(parents=True)
    (data / "part-00000.tsv").write_text("")
    assert cli.main(["profile", str(tfidf_dir / "plan.json"), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "p.json")]) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "7")
    assert cli.main(["gen", "postproc", "--scale", "50", "--no-profile", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen", "postproc", "--scale", "50", "--no-profile", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "data" / "D0" / "part-00000.tsv").read_text()
    assert a == (tmp_path / "b" / "data" / "D0" / "part-00000.tsv").read_text()
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert cli.main(["gen", "postproc", "--out", str(tmp_path / "c")]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mrpack", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "optimize" in res.stdout
    res = subprocess.run([sys.executable, "-m", "mrpack", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2
