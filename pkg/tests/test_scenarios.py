import pytest

from faultforge import scenarios


@pytest.mark.parametrize("name", list(scenarios.SCENARIOS))
def test_scenario_passes(name):
    res = scenarios.run(name, seed=0)
    assert res.passed, res.render()
    assert res.to_dict()["passed"]


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_scenarios_other_seeds(seed):
    for name in scenarios.SCENARIOS:
        res = scenarios.run(name, seed=seed)
        assert res.passed, res.render()


def test_scenario_deterministic():
    for name in scenarios.SCENARIOS:
        assert scenarios.run(name, seed=5).to_dict() == scenarios.run(name, seed=5).to_dict()


def test_open_ctree_errno():
    res = scenarios.run("open-ctree")
    assert res.observed["first_mount"] == -12
    assert res.observed["second_mount"] == 0


def test_nvme_log_line():
    res = scenarios.run("nvme-default")
    assert "status=INVALID_OPCODE dnr=1" in res.log


def test_page_alloc_interrupt_trap():
    res = scenarios.page_alloc_range(ops=200, interrupt_at=50)
    assert res.passed, res.render()
    assert res.observed["interrupted"]
    assert res.observed["in_range"] == 50


def test_unknown_scenario():
    with pytest.raises(KeyError):
        scenarios.run("nope")
