import json
import subprocess
import sys

import pytest

from faultforge.cli import main
from faultforge.simstore import ImageView


@pytest.fixture
def cli(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FAULTFORGE_STATE", str(tmp_path / "state"))
    monkeypatch.setenv("FAULTFORGE_LOG", str(tmp_path / "events.log"))
    monkeypatch.chdir(tmp_path)

    def run(*argv):
        code = main([str(a) for a in argv])
        out = capsys.readouterr()
        return code, out.out, out.err

    return run


def test_store_roundtrip(cli, tmp_path):
    img = tmp_path / "s.img"
    assert cli("store", "format", img, "--blocks", 128)[0] == 0
    assert cli("store", "put", img, "greet", "--data", "hello")[0] == 0
    code, out, _ = cli("store", "get", img, "greet")
    assert code == 0 and out.startswith("hello")
    assert ImageView(img.read_bytes()).objects() == {"greet": b"hello"}
    code, out, _ = cli("store", "ls", img)
    assert out == "5\tgreet\n"
    assert cli("store", "get", img, "missing")[0] == 1
    assert cli("store", "check", img)[1].startswith("clean")


def test_format_too_small(cli, tmp_path):
    assert cli("store", "format", tmp_path / "x.img", "--blocks", 8)[0] == 1


def test_cfg_persists_and_verbose_trace(cli, tmp_path):
    img = tmp_path / "s.img"
    cli("store", "format", img)
    assert cli("cfg", "set", "failslab/verbose", 2)[0] == 0
    cli("cfg", "set", "failslab/probability", 100)
    cli("cfg", "set", "failslab/times", 1)
    assert cli("cfg", "get", "failslab/probability")[1].strip() == "100"
    code, out, _ = cli("store", "put", img, "a", "--data", "x")
    assert code == 0  # the failure was injected, not an expectation violation
    log = (tmp_path / "events.log").read_text()
    assert "failslab FAIL" in log and "Call Trace:" in log
    code, out, _ = cli("log", "show", "--failures")
    assert "failslab FAIL" in out
    cli("cfg", "reset")
    assert cli("cfg", "get", "failslab/probability")[1].strip() == "0"


def test_cfg_bounds_error(cli):
    code, _, err = cli("cfg", "set", "failslab/probability", 101)
    assert code == 2 and "outside" in err


def test_cfg_device_nodes(cli):
    assert cli("cfg", "set", "nvme/nvme0n1/fault_inject/probability", 100)[0] == 0
    assert cli("cfg", "get", "nvme/nvme0n1/fault_inject/probability")[1].strip() == "100"


def test_failcmd_times_cap(cli):
    code, out, _ = cli("--json", "failcmd", "--capability=failslab", "--times=100", "--", "put-loop")
    assert code == 0
    report = json.loads(out)
    assert report["results"]["failures"] <= 100


def test_failcmd_bad_workload(cli):
    assert cli("failcmd", "--capability=failslab", "--", "nope")[0] == 2
    assert cli("failcmd", "--capability=nothing", "--", "put-loop")[0] == 2


def test_rfsck_expectations(cli):
    assert cli("rfsck", "--image", "fixture:corrupted")[0] == 0
    assert cli("rfsck", "--image", "fixture:crosslink", "--variant", "inplace")[0] == 0
    # asking the buggy checker to be perfect violates the expectation
    assert cli("rfsck", "--image", "fixture:crosslink", "--variant", "inplace", "--expect", "no-mismatch")[0] == 1


def test_rfsck_history_file(cli, tmp_path):
    cli("rfsck", "--image", "fixture:corrupted", "--history", tmp_path / "h.bin")
    assert (tmp_path / "h.bin").read_bytes()[:8] == b"FFHIST01"


def test_crashgen_flow(cli, tmp_path):
    t = tmp_path / "t.bin"
    assert cli("crashgen", "record", "--trace", t, "--workload", "puts3")[0] == 0
    code, out, _ = cli("--json", "crashgen", "test", "--trace", t)
    assert code == 0 and json.loads(out)["results"]["counts"]["Consistent"] == 46
    u = tmp_path / "u.bin"
    cli("crashgen", "record", "--trace", u, "--workload", "puts3", "--unsafe")
    assert cli("crashgen", "test", "--trace", u)[0] == 0
    assert cli("crashgen", "test", "--trace", u, "--expect", "consistent")[0] == 1


def test_crashgen_determinism(cli, tmp_path):
    t = tmp_path / "t.bin"
    cli("crashgen", "record", "--trace", t, "--workload", "put-delete", "--unsafe")
    a = cli("--json", "crashgen", "test", "--trace", t, "--seed", 1, "--limit", 10)[1]
    b = cli("--json", "crashgen", "test", "--trace", t, "--seed", 1, "--limit", 10)[1]
    assert a == b and json.loads(a)["seed"] == 1


def test_crashgen_guard(cli, tmp_path):
    t = tmp_path / "t.bin"
    cli("crashgen", "record", "--trace", t, "--workload", "put:a:90000", "--unsafe", "--blocks", 128)
    code, _, err = cli("crashgen", "enumerate", "--trace", t, "--torn")
    assert code == 2 and "limit" in err
    assert cli("crashgen", "enumerate", "--trace", t, "--torn", "--limit", 5)[0] == 0


def test_pfault(cli, tmp_path):
    img = tmp_path / "s.img"
    cli("store", "format", img)
    cli("store", "put", img, "a", "--data", "abc")
    man = tmp_path / "m.txt"
    code, out, _ = cli("pfault", "--model", "global-inconsistency", "--blocks", 2, "--seed", 3, img,
                       "--manifest", man, "--out-dir", tmp_path / "out")
    assert code == 0
    assert len(man.read_text().splitlines()) == 2
    assert (tmp_path / "out" / "s.img.faulted").exists()
    code, out, _ = cli("pfault", "--model", "whole-device", img)
    assert "CheckerFailed(device-error)" in out


def test_scenario_all(cli):
    code, out, _ = cli("scenario", "all")
    assert code == 0 and out.count(": PASS") == 5


def test_usage_errors(cli):
    assert cli("bogus")[0] == 2
    assert cli("scenario", "nope")[0] == 2
    assert cli("rfsck", "--image", "fixture:corrupted", "--prefixes", "sample:x")[0] == 2
    assert cli("crashgen", "test", "--trace", "missing.bin")[0] == 2


def test_report_dir_outputs(cli, tmp_path):
    rep = tmp_path / "rep"
    assert cli("--report-dir", rep, "rfsck", "--image", "fixture:corrupted")[0] == 0
    assert sorted(p.name for p in rep.iterdir()) == ["rfsck.tsv", "rfsck_counts.png", "rfsck_prefixes.png"]
    first = {p.name: p.read_bytes() for p in rep.iterdir()}
    cli("--report-dir", rep, "rfsck", "--image", "fixture:corrupted")
    assert {p.name: p.read_bytes() for p in rep.iterdir()} == first


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "faultforge.cli", "--json", "scenario", "open-ctree"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"][0]["passed"]
