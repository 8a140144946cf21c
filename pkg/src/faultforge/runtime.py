"""The simulated kernel: tasks, capabilities, config tree and block layer in one place."""

from __future__ import annotations

import threading
from contextlib import contextmanager

from .capabilities import (CapabilityRegistry, FailFunction, FailMakeRequest, FailPageAlloc, FailSlab,
                           NvmeFaultInject, bool_node)
from .config import ConfigNode, ConfigTree
from .core import EventLog, FaultAttr, FaultContext, SymbolTable, TaskTable
from .errors import AllocationError, ConfigError, IOFault
from .simstore.device import BlockLayer, DEFAULT_REQUEUE_CAP

PAGE_SIZE = 4096


def parse_cmdline(cmdline: str) -> dict[str, str]:
    """``failslab=1,100,0,-1 fail_page_alloc=...`` -> {capability: spec}."""
    params = {}
    for word in cmdline.split():
        if "=" not in word:
            continue
        key, value = word.split("=", 1)
        params[key] = value
    return params


class Runtime:
    def __init__(self, seed=0, cmdline="", record_passes=False, log_sink=None):
        self.seed = seed
        self.symbols = SymbolTable()
        self.log = EventLog(self.symbols, record_passes=record_passes, sink=log_sink)
        self.tree = ConfigTree()
        self.admin = self.tree.admin_token
        boot = parse_cmdline(cmdline)
        if "fail_function" in boot:
            raise ConfigError("fail_function does not support the boot option")
        self.capabilities = CapabilityRegistry(self.tree, self.admin, self.log, seed, boot)
        self.tasks = TaskTable()
        self._local = threading.local()
        self.devices = {}
        self.slab_caches: set[str] = set()
        self.block = BlockLayer(self)

        self.failslab: FailSlab = self.capabilities.register("failslab", cls=FailSlab)
        self.fail_page_alloc: FailPageAlloc = self.capabilities.register("fail_page_alloc", cls=FailPageAlloc)
        self.fail_make_request: FailMakeRequest = self.capabilities.register(
            "fail_make_request", cls=FailMakeRequest)
        self.fail_function: FailFunction = self.capabilities.register(
            "fail_function", cls=FailFunction, supports_boot=False)
        self.init_task = self.spawn_task("init", task_id=1)

    # tasks

    def spawn_task(self, comm="task", task_id=None, make_it_fail=False):
        task = self.tasks.spawn(comm, task_id, make_it_fail)
        base = f"tasks/{task.task_id}"
        self.tree.mount(bool_node(f"{base}/make-it-fail",
                                  lambda: task.make_it_fail,
                                  lambda v: setattr(task, "make_it_fail", v)))
        self.tree.mount(ConfigNode(f"{base}/fail-nth", "integer",
                                   lambda: task.fail_nth,
                                   lambda v: self.tasks.arm_fail_nth(task.task_id, v),
                                   bounds=(0, 2**31 - 1)))
        return task

    def exit_task(self, task):
        self.tree.unmount(f"tasks/{task.task_id}")
        self.tasks._tasks.pop(task.task_id, None)

    def arm_fail_nth(self, task_id, n):
        self.tasks.arm_fail_nth(task_id, n)

    def read_fail_nth(self, task_id):
        return self.tasks.read_fail_nth(task_id)

    @property
    def current_task(self):
        return getattr(self._local, "task", None) or self.init_task

    @contextmanager
    def run_as(self, task):
        prev = getattr(self._local, "task", None)
        self._local.task = task
        try:
            yield task
        finally:
            self._local.task = prev

    @contextmanager
    def calling(self, symbol):
        task = self.current_task
        task.stack.append(self.symbols.address(symbol))
        try:
            yield
        finally:
            task.stack.pop()

    def context(self, symbol, size=0, **info) -> FaultContext:
        """Context for a hook at ``symbol``: innermost frame first."""
        task = self.current_task
        trace = (self.symbols.address(symbol), *reversed(task.stack))
        return FaultContext(task, trace, size, dict(info))

    # generic capability plumbing

    def register_capability(self, name, defaults: FaultAttr | None = None, extensions=None, **kwargs):
        return self.capabilities.register(name, defaults, extensions, **kwargs)

    def write(self, path, value):
        self.tree.write(path, value, self.admin)

    def read(self, path):
        return self.tree.read(path)

    def configure(self, capability, **values):
        """Write several nodes of one capability; keys use underscores for dashes."""
        for key, value in values.items():
            if isinstance(value, bool):
                value = "Y" if value else "N"
            self.write(f"{capability}/{key.replace('_', '-')}", str(value))

    # allocators

    def kmem_cache_create(self, name):
        if name in self.slab_caches:
            return name
        self.slab_caches.add(name)
        self.tree.mount(bool_node(f"slab/{name}/failslab",
                                  lambda: name in self.failslab.marked_caches,
                                  lambda v: self.failslab.mark_cache(name, v)))
        return name

    def kmalloc(self, cache, size, can_sleep=False):
        self.kmem_cache_create(cache)
        ctx = self.context("kmem_cache_alloc", size)
        if self.failslab.check(ctx, cache, can_sleep):
            raise AllocationError(f"slab allocation from {cache} failed")
        return bytearray(size)

    def alloc_pages(self, order=0, can_sleep=False, highmem=False):
        size = PAGE_SIZE << order
        ctx = self.context("alloc_pages", size)
        if self.fail_page_alloc.check(ctx, order, can_sleep, highmem):
            raise AllocationError(f"page allocation of order {order} failed")
        return bytearray(size)

    def call_injectable(self, func, *args, **kwargs):
        ctx = self.context(getattr(func, "injectable_name", func.__name__))
        return self.fail_function.call(ctx, func, *args, **kwargs)

    # devices

    def attach(self, device, requeue_cap=DEFAULT_REQUEUE_CAP):
        if device.name in self.devices:
            raise ConfigError(f"device {device.name} already attached")
        if device.mode == "nvme":
            self.capabilities.register(f"nvme/{device.name}/fault_inject", cls=NvmeFaultInject)
        elif device.mode == "nullb":
            self.block.requeue_cap[device.name] = requeue_cap
            for kind in ("timeout_inject", "requeue_inject", "init_hctx_fault_inject"):
                name = f"nullb/{device.name}/{kind}"
                if name not in self.capabilities:
                    self.capabilities.register(name)
        self.devices[device.name] = device
        base = f"block/{device.name}"
        self.tree.mount(bool_node(f"{base}/make-it-fail",
                                  lambda: device.make_it_fail,
                                  lambda v: setattr(device, "make_it_fail", v)))
        for part in device.partitions:
            self.tree.mount(bool_node(
                f"{base}/{part}/make-it-fail",
                lambda p=part: p in device.failing_partitions,
                lambda v, p=part: (device.failing_partitions.add if v else device.failing_partitions.discard)(p)))
        return device

    def power_on_nullb(self, device):
        """init_hctx: may fail when init_hctx_fault_inject fires."""
        cap = self.capabilities[f"nullb/{device.name}/init_hctx_fault_inject"]
        if cap.should_fail(self.context("null_init_hctx")):
            raise IOFault(f"{device.name}: init_hctx failed")
        return device

    def detach(self, device):
        self.devices.pop(device.name, None)
        self.tree.unmount(f"block/{device.name}")
