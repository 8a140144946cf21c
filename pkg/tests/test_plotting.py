from faultforge import crashgen, pfault, plotting, rfsck, scenarios
from faultforge.fixtures import corrupted_image, populated_image
from faultforge.runtime import Runtime
from faultforge.simstore import format_image
from faultforge.workloads import parse_ops

PNG = b"\x89PNG\r\n\x1a\n"


def _check(paths):
    for p in paths:
        data = open(p, "rb").read()
        if p.endswith(".png"):
            assert data.startswith(PNG)
        else:
            assert data.count(b"\n") >= 1


def test_report_writers(tmp_path):
    camp = rfsck.run_campaign(corrupted_image())
    _check(plotting.report_rfsck(camp, tmp_path / "r"))
    trace, _ = crashgen.record(parse_ops("put"), format_image(64), journaled=False)
    report = crashgen.test_states(trace, crashgen.enumerate_states(trace))
    _check(plotting.report_crashgen(report, tmp_path / "c"))
    res = pfault.apply(pfault.FaultModel(pfault.GLOBAL_INCONSISTENCY, 2, 1), [populated_image()])
    _check(plotting.report_pfault(pfault.post_fault_check(res), res.manifest, tmp_path / "p"))
    rt = Runtime()
    rt.configure("failslab", probability=100, times=3)
    for _ in range(5):
        try:
            rt.kmalloc("c", 8)
        except MemoryError:
            pass
    _check(plotting.report_events(list(rt.log), tmp_path / "e"))
    _check(plotting.report_scenarios([scenarios.run("open-ctree")], tmp_path / "s"))


def test_tsv_rows(tmp_path):
    path = plotting.write_tsv(tmp_path / "x.tsv", ("a", "b"), [(1, "x y"), (2, "z")])
    assert open(path).read() == "a\tb\n1\tx y\n2\tz\n"


def test_png_bytes_stable(tmp_path):
    a = plotting.counts_bar({"Match": 2, "Mismatch": 1}, "t", tmp_path / "a.png")
    b = plotting.counts_bar({"Match": 2, "Mismatch": 1}, "t", tmp_path / "b.png")
    assert open(a, "rb").read() == open(b, "rb").read()
