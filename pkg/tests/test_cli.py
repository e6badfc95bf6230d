import json
import os

import pytest

from visifrac import cli


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def files(d):
    return sorted(p.name for p in d.iterdir())


def test_gen_and_unknown_builtin(tmp_path, capsys):
    assert run_cli("gen", "--set", "carpet", "--depth", 4, "--out", tmp_path, "--pgm", "true") == 0
    assert {"set.dyset", "set.pgm", "runs.jsonl"} <= set(files(tmp_path))
    assert run_cli("gen", "--set", "nope", "--out", tmp_path) == 2
    assert "carpet" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    assert run_cli("gen", "--set", "carpet", "--depth", 40, "--out", tmp_path) == 2
    assert run_cli("gen", "--config", tmp_path / "missing.cfg") == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("deltas=2^-8,0.3\nset=carpet\ndepth=6\n")
    assert run_cli("experiment", "--kind", "vis-average", "--config", bad, "--out", tmp_path) == 2
    assert "deltas" in capsys.readouterr().err


def test_parameter_errors_exit_3(tmp_path):
    assert run_cli("decomp", "--set", "segment", "--depth", 8, "--deltas", "2^-8", "--strict", "true",
                   "--out", tmp_path) == 3
    assert run_cli("decomp", "--set", "carpet", "--depth", 5, "--deltas", "2^-8", "--out", tmp_path) == 3


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nset=square\ndepth=3\n")
    assert run_cli("gen", "--config", cfg, "--depth", 2, "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "runs.jsonl").read_text().splitlines()[-1])
    assert rec["config"]["set"] == "square" and rec["config"]["depth"] == "2"
    assert (tmp_path / "set.dyset").read_text().startswith("DYSET1")


def test_jobs_default_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("VISIFRAC_JOBS", "3")
    assert run_cli("gen", "--set", "square", "--depth", 2, "--out", tmp_path) == 0
    rec = json.loads((tmp_path / "runs.jsonl").read_text().splitlines()[-1])
    assert rec["config"]["jobs"] == "3"


def test_dyset_source(tmp_path):
    assert run_cli("gen", "--set", "carpet", "--depth", 5, "--out", tmp_path) == 0
    out2 = tmp_path / "b"
    assert run_cli("vis", "--set", tmp_path / "set.dyset", "--s", 1.8, "--angle", 0.4, "--out", out2) == 0
    assert "visible.dyset" in files(out2)


@pytest.mark.parametrize("argv", [
    ["experiment", "--kind", "vis-average", "--set", "carpet", "--depth", 7, "--deltas", "2^-5,2^-7",
     "--directions", 3, "--seed", 5],
    ["calibrate", "--n", 1, "--trials", 300, "--seed", 1],
    ["slice", "--set", "carpet", "--depth", 6, "--seed", 2],
    ["sobolev", "--set", "carpet", "--depth", 5, "--directions", 3, "--seed", 4],
    ["decomp", "--set", "carpet", "--depth", 7, "--deltas", "2^-7", "--angle", 0.7],
])
def test_reruns_are_byte_identical(tmp_path, argv):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(*argv, "--out", a) == 0
    assert run_cli(*argv, "--out", b) == 0
    names = [n for n in files(a) if n != "runs.jsonl"]
    assert names and names == [n for n in files(b) if n != "runs.jsonl"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    ra = json.loads((a / "runs.jsonl").read_text())
    rb = json.loads((b / "runs.jsonl").read_text())
    assert ra["outputs"] == rb["outputs"] and ra["version"] == rb["version"]


def test_failed_write_leaves_nothing(tmp_path, monkeypatch):
    calls = []
    real = os.replace

    def flaky(src, dst):
        calls.append(dst)
        if len(calls) == 1:
            raise OSError("disk full")
        return real(src, dst)

    monkeypatch.setattr(cli.os, "replace", flaky)
    with pytest.raises(OSError):
        run_cli("vis", "--set", "carpet", "--depth", 4, "--angle", 0.3, "--out", tmp_path)
    assert files(tmp_path) == []


def test_summarize(tmp_path, capsys):
    idx = tmp_path / "runs.jsonl"
    assert run_cli("summarize", "--index", idx) == 2
    idx.write_text("")
    assert run_cli("summarize", "--index", idx, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["runs"] == 0
    for deltas in ("2^-5", "2^-7"):
        assert run_cli("experiment", "--kind", "vis-average", "--set", "carpet", "--depth", 7,
                       "--deltas", deltas, "--directions", 2, "--out", tmp_path) == 0
    summary = cli.summarize(idx)
    A = {}
    for ln in idx.read_text().splitlines():
        A.update(json.loads(ln)["metrics"]["A"])
    import math
    (d1, a1), (d2, a2) = sorted((float(k), v) for k, v in A.items())
    expected = (math.log(a2) - math.log(a1)) / (math.log(d2) - math.log(d1))
    assert summary["experiments"]["vis-average"]["slope_logA_logdelta"] == pytest.approx(expected)
    assert run_cli("calibrate", "--n", 1, "--trials", 200, "--out", tmp_path) == 0
    base = tmp_path / "baseline.json"
    c = json.loads((tmp_path / "calibration.json").read_text())["c_star"]
    base.write_text(json.dumps({"calibrate.c_star": c / 3}))
    capsys.readouterr()
    assert run_cli("summarize", "--index", idx, "--baseline", base) == 0
    assert "WARN calibrate.c_star" in capsys.readouterr().out
