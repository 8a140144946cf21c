"""Packaged reproductions of the classic fault-injection walkthroughs.

Each scenario configures the tree the way the original shell script did,
runs a workload on the simulated stack, cleans up on every exit path and
checks the observable the walkthrough promises.
"""

from __future__ import annotations

import errno
from contextlib import contextmanager
from dataclasses import dataclass, field

from .errors import AllocationError, IOFault, StoreError
from .runtime import Runtime
from .simstore.device import BlockDevice
from .simstore.layout import format_image
from .simstore.store import Store


@dataclass
class ScenarioResult:
    name: str
    seed: int
    checks: list = field(default_factory=list)
    observed: dict = field(default_factory=dict)
    log: str = ""

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks)

    def expect(self, what, ok, detail=""):
        self.checks.append((what, bool(ok), str(detail)))

    def to_dict(self):
        return {"scenario": self.name, "seed": self.seed, "passed": self.passed,
                "checks": [{"check": w, "ok": ok, "detail": d} for w, ok, d in self.checks],
                "observed": self.observed}

    def render(self):
        lines = [f"scenario {self.name} seed={self.seed}: {'PASS' if self.passed else 'FAIL'}"]
        for what, ok, detail in self.checks:
            lines.append(f"  [{'ok' if ok else 'FAILED'}] {what}{': ' + detail if detail else ''}")
        for key, value in self.observed.items():
            lines.append(f"  {key} = {value}")
        return "\n".join(lines)


@contextmanager
def restored(rt):
    """Put the whole config tree back however the body exits."""
    snapshot = rt.tree.snapshot()
    try:
        yield
    finally:
        rt.tree.restore(snapshot, rt.admin)


class SimulatedInterrupt(KeyboardInterrupt):
    pass


def slab_module_init(seed=0, attempts=40, allocs_per_init=500) -> ScenarioResult:
    """failslab into a module's init and exit, task-filtered."""
    res = ScenarioResult("slab-module-init", seed)
    rt = Runtime(seed=seed)
    mod = rt.symbols.register_module("ffmod", ["init", "exit"])
    rt.kmem_cache_create("ffmod_cache")
    default_fails_before = len(rt.log.failures())
    with restored(rt):
        rt.configure("failslab", task_filter=True, probability=10, interval=100, times=-1,
                     space=0, verbose=2, ignore_gfp_wait=True)
        task = rt.spawn_task("modprobe", make_it_fail=True)
        init_errors = exit_errors = 0
        with rt.run_as(task):
            for _ in range(attempts):
                with rt.calling(mod.symbol("init")):
                    try:
                        for _ in range(allocs_per_init):
                            rt.kmalloc("ffmod_cache", 128)
                    except AllocationError:
                        init_errors += 1
                        continue
                with rt.calling(mod.symbol("exit")):
                    try:
                        for _ in range(allocs_per_init // 10):
                            rt.kmalloc("ffmod_cache", 64)
                    except AllocationError:
                        exit_errors += 1
        # an unmarked task doing the same work must never fail
        bystander = rt.spawn_task("bystander")
        bystander_errors = 0
        with rt.run_as(bystander):
            for _ in range(allocs_per_init * 4):
                try:
                    rt.kmalloc("ffmod_cache", 128)
                except AllocationError:
                    bystander_errors += 1
        # sleeping allocations are ignored with ignore-gfp-wait
        sleepy_errors = 0
        with rt.run_as(task):
            for _ in range(allocs_per_init * 4):
                try:
                    rt.kmalloc("ffmod_cache", 128, can_sleep=True)
                except AllocationError:
                    sleepy_errors += 1
        rt.exit_task(task)
    fails = rt.log.failures("failslab")[default_fails_before:]
    res.observed.update(init_errors=init_errors, exit_errors=exit_errors, failslab_events=len(fails))
    res.expect("module init fails under failslab", init_errors >= 1, f"{init_errors} of {attempts} inits")
    res.expect("every failure belongs to the marked task", all(e.task_id == task.task_id for e in fails))
    res.expect("unmarked task never fails", bystander_errors == 0)
    res.expect("sleeping allocations ignored", sleepy_errors == 0)
    res.expect("verbose 2 logs a call trace naming the module",
               fails and all(any(s.startswith("ffmod:") for _, s in e.trace) for e in fails))
    res.expect("config restored", rt.read("failslab/probability") == "0")
    res.log = rt.log.render(fails[:3])
    return res


def page_alloc_range(seed=0, ops=5000, interrupt_at=None) -> ScenarioResult:
    """fail_page_alloc confined to one module's .text via require-start/end."""
    res = ScenarioResult("page-alloc-range", seed)
    rt = Runtime(seed=seed)
    mod = rt.symbols.register_module("ffpage", ["probe", "work"])
    other = rt.symbols.register_module("ffother", ["work"])
    interrupt_at = ops // 2 if interrupt_at is None else interrupt_at
    counts = {"in_range": 0, "in_range_failed": 0, "deep": 0, "deep_failed": 0,
              "outside": 0, "outside_failed": 0}
    prob_after_trap = None
    interrupted = False
    with restored(rt):
        rt.configure("fail_page_alloc", require_start=mod.text_start, require_end=mod.data_start,
                     stacktrace_depth=10, task_filter=False, probability=10, interval=1,
                     times=-1, space=0, verbose=2, ignore_gfp_wait=True, ignore_gfp_highmem=True)

        def alloc(kind):
            counts[kind] += 1
            try:
                rt.alloc_pages(0)
            except AllocationError:
                counts[kind + "_failed"] += 1

        try:
            for i in range(ops):
                if i == interrupt_at:
                    raise SimulatedInterrupt()
                with rt.calling(mod.symbol("work")):
                    alloc("in_range")
                    # same module frame, but 11th from the top: out of reach
                    with _padding(rt, 9):
                        alloc("deep")
                with rt.calling(other.symbol("work")):
                    alloc("outside")
        except KeyboardInterrupt:
            # the script's trap: probability to zero on SIGINT/SIGTERM
            rt.write("fail_page_alloc/probability", "0")
            prob_after_trap = rt.read("fail_page_alloc/probability")
            interrupted = True
    fails = rt.log.failures("fail_page_alloc")
    res.observed.update(counts)
    res.observed["interrupted"] = interrupted
    res.expect("failures injected inside the range", counts["in_range_failed"] >= 1)
    res.expect("no failure outside the range", counts["outside_failed"] == 0)
    res.expect("no failure when the module frame is at depth 11", counts["deep_failed"] == 0)
    res.expect("every failure has a module frame within depth 10",
               all(any(mod.text_start <= a < mod.data_start for a, _ in e.trace[:10]) for e in fails))
    res.expect("interrupt trap sets probability to 0", prob_after_trap == "0", prob_after_trap)
    res.expect("config restored", rt.read("fail_page_alloc/require-end") == str(2**64 - 1))
    res.log = rt.log.render(fails[:3])
    return res


@contextmanager
def _padding(rt, n):
    if n == 0:
        yield
        return
    with rt.calling(f"helper_{n}"):
        with _padding(rt, n - 1):
            yield


def open_ctree(seed=0) -> ScenarioResult:
    """fail_function on the store's mount path, then disable and mount again."""
    res = ScenarioResult("open-ctree", seed)
    rt = Runtime(seed=seed)
    dev = BlockDevice("loop0", 64)
    dev.write(0, format_image(64))
    rt.attach(dev)
    before = dev.digest()
    with restored(rt):
        rt.write("fail_function/inject", "simstore.mount")
        rt.write("fail_function/simstore.mount/retval", str(-errno.ENOMEM))
        rt.configure("fail_function", task_filter=False, probability=100, interval=0, times=-1,
                     space=0, verbose=1)
        try:
            Store.mount(dev, rt)
            first = 0
        except StoreError as exc:
            first = exc.errno
        unchanged = dev.digest() == before
        # cleanup: an empty inject string turns injection off
        rt.write("fail_function/inject", "")
        try:
            Store.mount(dev, rt)
            second = 0
        except StoreError as exc:
            second = exc.errno
    fails = rt.log.failures("fail_function")
    res.observed.update(first_mount=first, second_mount=second, events=len(fails))
    res.expect("mount fails with -ENOMEM (-12)", first == -errno.ENOMEM, first)
    res.expect("failed mount changed nothing on disk", unchanged)
    res.expect("after clearing inject the mount succeeds", second == 0, second)
    res.expect("verbose 1 logs one line, no trace", len(fails) == 1 and fails[0].trace is None)
    res.expect("inject list empty afterwards", rt.read("fail_function/inject") == "")
    res.log = rt.log.render(fails)
    return res


def slab_cache_filter(seed=0, puts=400) -> ScenarioResult:
    """Only the buff_head cache may fail, once, at 1%."""
    res = ScenarioResult("slab-cache-filter", seed)
    rt = Runtime(seed=seed)
    dev = BlockDevice("sda", 256)
    dev.write(0, format_image(256))
    rt.attach(dev)
    store = Store.mount(dev, rt)
    rt.kmem_cache_create("buff_head")
    errors = 0
    with restored(rt):
        rt.write("slab/buff_head/failslab", "Y")
        rt.configure("failslab", cache_filter=True, probability=1, times=1, interval=1, verbose=1)
        for i in range(puts):
            try:
                store.put(f"obj{i % 32}", bytes([i % 251]) * (100 + i))
                rt.kmalloc("kmalloc-64", 64)
                rt.kmalloc("dentry", 192)
            except (StoreError, AllocationError):
                errors += 1
    fails = rt.log.failures("failslab")
    caches = sorted({dict(e.extra).get("cache") for e in fails})
    res.observed.update(failures=len(fails), caches=",".join(caches) or "-", workload_errors=errors)
    res.expect("at most one failure", len(fails) <= 1, len(fails))
    res.expect("failures only on buff_head", all(c == "buff_head" for c in caches), caches)
    res.expect("cache mark cleared afterwards", rt.read("slab/buff_head/failslab") == "N")
    res.log = rt.log.render(fails)
    return res


def nvme_default(seed=0) -> ScenarioResult:
    """Default NVMe injection: INVALID_OPCODE with DNR, surfaced as an I/O error."""
    res = ScenarioResult("nvme-default", seed)
    rt = Runtime(seed=seed)
    dev = BlockDevice("nvme0n1", 64, mode="nvme")
    dev.write(0, format_image(64))
    rt.attach(dev)
    store = Store.mount(dev, rt)
    with restored(rt):
        rt.configure("nvme/nvme0n1/fault_inject", times=1, probability=100)
        error = None
        try:
            store.put("a.file", b"copy me" * 100)
        except StoreError as exc:
            error = exc
    fails = rt.log.failures("nvme/nvme0n1/fault_inject")
    cause = error.__cause__ if error is not None else None
    status = getattr(cause, "status", None)
    text = rt.log.render(fails)
    res.observed.update(error=str(error), events=len(fails))
    res.expect("I/O error surfaced to the caller", error is not None and error.errno == -errno.EIO, error)
    res.expect("completion carries INVALID_OPCODE with DNR",
               isinstance(cause, IOFault) and status is not None and status.dnr
               and status.code == 0x1, status)
    res.expect("no retry after DNR", len(fails) == 1, len(fails))
    res.expect("log shows status=INVALID_OPCODE dnr=1", "status=INVALID_OPCODE dnr=1" in text)
    res.log = text
    return res


SCENARIOS = {
    "slab-module-init": slab_module_init,
    "page-alloc-range": page_alloc_range,
    "open-ctree": open_ctree,
    "slab-cache-filter": slab_cache_filter,
    "nvme-default": nvme_default,
}


def run(name, seed=0, **kwargs) -> ScenarioResult:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name}; choose from {', '.join(SCENARIOS)}") from None
    return fn(seed=seed, **kwargs)
