import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultforge.capabilities import TABLE1_NODES
from faultforge.config import ConfigTree
from faultforge.errors import BoundsError, ConfigError, PermissionDeniedError, UnknownPathError
from faultforge.failcmd import failcmd
from faultforge.runtime import Runtime, parse_cmdline
from faultforge.workloads import TASKS


def test_write_sets_attr(rt):
    rt.write("failslab/probability", "10")
    assert rt.failslab.attr.probability == 10
    assert rt.read("failslab/probability") == "10"


def test_read_after_write_identity(rt):
    rt.write("failslab/times", "-1")
    assert rt.read("failslab/times") == "-1"


def test_bounds_rejected_atomically(rt):
    rt.write("failslab/probability", "20")
    with pytest.raises(BoundsError):
        rt.write("failslab/probability", "101")
    assert rt.read("failslab/probability") == "20"
    with pytest.raises(ConfigError):
        rt.write("failslab/interval", "ten")
    assert rt.read("failslab/interval") == "1"


def test_unknown_path(rt):
    with pytest.raises(UnknownPathError):
        rt.read("failslab/nope")
    with pytest.raises(UnknownPathError):
        rt.write("nothing/here", "1")


def test_write_needs_admin(rt):
    with pytest.raises(PermissionDeniedError):
        rt.tree.write("failslab/probability", "5")
    with pytest.raises(PermissionDeniedError):
        rt.tree.write("failslab/probability", "5", token=ConfigTree().admin_token)


def test_every_table1_field_reachable(rt):
    for cap in rt.capabilities.names():
        for node in TABLE1_NODES:
            assert f"{cap}/{node}" in rt.tree


def test_empty_inject_disables(rt):
    rt.write("fail_function/inject", "simstore.mount")
    assert rt.read("fail_function/inject") == "simstore.mount"
    rt.write("fail_function/inject", "")
    assert rt.read("fail_function/inject") == ""
    assert rt.fail_function.targets == []


def test_inject_rejects_unknown_function(rt):
    with pytest.raises(ConfigError):
        rt.write("fail_function/inject", "not.a.function")


def test_fail_nth_node_semantics(rt):
    task = rt.spawn_task("t", task_id=7)
    rt.write("failslab/probability", "0")
    rt.write("tasks/7/fail-nth", "2")
    with rt.run_as(task):
        outcomes = []
        for _ in range(2):
            try:
                rt.kmalloc("c", 8)
                outcomes.append(False)
            except MemoryError:
                outcomes.append(True)
    assert outcomes == [False, True]
    assert rt.read("tasks/7/fail-nth") == "0"
    rt.write("tasks/7/fail-nth", "5")
    with rt.run_as(task):
        for _ in range(3):
            rt.kmalloc("c", 8)
    assert int(rt.read("tasks/7/fail-nth")) > 0


def test_snapshot_restore(rt):
    snap = rt.tree.snapshot()
    rt.configure("failslab", probability=50, times=-1, task_filter=True)
    rt.write("fail_function/inject", "simstore.mount")
    rt.tree.restore(snap, rt.admin)
    assert rt.tree.snapshot() == snap


def test_boot_params():
    assert parse_cmdline("failslab=1,100,0,-1 quiet") == {"failslab": "1,100,0,-1"}
    rt = Runtime(cmdline="failslab=1,100,0,-1 fail_page_alloc=10,5,0,3")
    assert (rt.failslab.attr.interval, rt.failslab.attr.probability, rt.failslab.attr.times) == (1, 100, -1)
    assert rt.read("fail_page_alloc/interval") == "10"
    with pytest.raises(ConfigError):
        Runtime(cmdline="fail_function=1,100,0,-1")


@settings(max_examples=60, deadline=None)
@given(value=st.integers(-5, 200))
def test_probability_bounds_property(value):
    rt = Runtime()
    if 0 <= value <= 100:
        rt.write("failslab/probability", str(value))
        assert rt.read("failslab/probability") == str(value)
    else:
        with pytest.raises(BoundsError):
            rt.write("failslab/probability", str(value))
        assert rt.read("failslab/probability") == "0"


def test_failcmd_times_limit(rt):
    res = failcmd(rt, "failslab", TASKS["put-loop"], {"times": 100, "probability": 100})
    assert len(res.failures) == 100
    assert all(e.capability == "failslab" for e in res.failures)


def test_failcmd_times_bound_at_default_probability(rt):
    res = failcmd(rt, "failslab", lambda r: TASKS["alloc-loop"](r, count=20000), {"times": 100})
    assert 0 < len(res.failures) <= 100


def test_failcmd_zero_probability(rt):
    res = failcmd(rt, "failslab", TASKS["alloc-loop"], {"probability": 0})
    assert res.failures == []


def test_failcmd_page_alloc_once(rt):
    res = failcmd(rt, "fail_page_alloc", TASKS["page-loop"], {"probability": 100, "times": 1})
    assert len(res.failures) == 1
    assert res.value == {"ok": 999, "failed": 1}


def test_failcmd_restores_everything(rt):
    before = rt.tree.snapshot()
    tasks_before = [t.task_id for t in rt.tasks]
    failcmd(rt, "failslab", TASKS["alloc-loop"], {"probability": 100, "times": -1})
    after = rt.tree.snapshot()
    assert {k: after[k] for k in before} == before  # the workload may add cache nodes
    assert [t.task_id for t in rt.tasks] == tasks_before


def test_failcmd_only_hits_its_task(rt):
    res = failcmd(rt, "failslab", TASKS["alloc-loop"], {"probability": 100, "times": -1})
    assert len({e.task_id for e in res.failures}) == 1
    assert res.failures[0].task_id != rt.init_task.task_id
