"""failcmd: run a workload in a fresh task with one capability switched on.

Mirrors the kernel's helper script: write the tunables, spawn a task with
make-it-fail set, run the command, then put every touched node back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# the script's own defaults, applied before user overrides
DEFAULTS = {
    "task-filter": "Y",
    "probability": "1",
    "interval": "1",
    "times": "1",
    "space": "0",
    "verbose": "2",
}
SLAB_DEFAULTS = {"ignore-gfp-wait": "N", "cache-filter": "N"}
PAGE_ALLOC_DEFAULTS = {"ignore-gfp-wait": "N", "ignore-gfp-highmem": "Y"}


@dataclass
class FailcmdResult:
    capability: str
    settings: dict
    events: list = field(default_factory=list)
    value: object = None
    error: BaseException | None = None

    @property
    def failures(self):
        return [e for e in self.events if e.decision]


def effective_settings(capability, overrides=None):
    settings = dict(DEFAULTS)
    if capability == "failslab":
        settings.update(SLAB_DEFAULTS)
    elif capability == "fail_page_alloc":
        settings.update(PAGE_ALLOC_DEFAULTS)
    for key, value in (overrides or {}).items():
        settings[key.replace("_", "-")] = str(value)
    return settings


def failcmd(rt, capability, workload, overrides=None, comm="failcmd", catch=(Exception,)) -> FailcmdResult:
    """Configure ``capability``, run ``workload(rt)`` as a marked task, restore.

    Exceptions listed in ``catch`` are recorded on the result instead of
    propagating; failures are the expected outcome, not a harness error.
    """
    if capability not in rt.capabilities:
        raise KeyError(f"unknown capability {capability}")
    settings = effective_settings(capability, overrides)
    snapshot = rt.tree.snapshot()
    mark = rt.log.clock
    result = FailcmdResult(capability, settings)
    task = None
    try:
        for key, value in settings.items():
            rt.write(f"{capability}/{key}", value)
        task = rt.spawn_task(comm, make_it_fail=True)
        with rt.run_as(task):
            try:
                result.value = workload(rt)
            except catch as exc:
                result.error = exc
    finally:
        rt.tree.restore(snapshot, rt.admin)
        if task is not None:
            rt.exit_task(task)
    result.events = rt.log.since(mark)
    return result
