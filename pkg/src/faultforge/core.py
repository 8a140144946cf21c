"""The should_fail decision engine.

A :class:`FaultAttr` holds the tunables of one fault capability.  Every
injection point builds a :class:`FaultContext` describing the call (task,
caller trace, resource size) and asks :func:`should_fail` whether to fail it.

Gate order is fixed and relied upon by tests::

    fail-nth -> task filter -> stack filter -> space -> times -> interval -> probability

``count`` is bumped on every call, before any gate runs.
"""

from __future__ import annotations

import itertools
import random
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

from .errors import FaultSpecError, NoSuchTaskError

ADDR_MAX = 2**64 - 1
INT_MAX = 2**31 - 1
MAX_STACK_TRACE_DEPTH = 32

# (attribute, config node name) for every Table-1 tunable
TUNABLES = (
    ("probability", "probability"),
    ("interval", "interval"),
    ("times", "times"),
    ("space", "space"),
    ("verbose", "verbose"),
    ("task_filter", "task-filter"),
    ("require_start", "require-start"),
    ("require_end", "require-end"),
    ("reject_start", "reject-start"),
    ("reject_end", "reject-end"),
    ("stacktrace_depth", "stacktrace-depth"),
)


@dataclass
class FaultAttr:
    """Gate state of one capability.  Defaults follow DECLARE_FAULT_ATTR."""

    probability: int = 0
    interval: int = 1
    times: int = 1
    space: int = 0
    verbose: int = 2
    task_filter: bool = False
    require_start: int = 0
    require_end: int = ADDR_MAX
    reject_start: int = 0
    reject_end: int = 0
    stacktrace_depth: int = MAX_STACK_TRACE_DEPTH
    count: int = 0
    name: str = "fault"
    seed: int | str = 0
    log: EventLog | None = field(default=None, repr=False, compare=False)
    rng: random.Random = field(init=False, repr=False, compare=False)
    lock: threading.RLock = field(init=False, repr=False, compare=False, default_factory=threading.RLock)

    def __post_init__(self):
        self.validate()
        self.reseed(self.seed)

    def reseed(self, seed):
        self.seed = seed
        self.rng = random.Random(f"{seed}:{self.name}")

    def validate(self):
        if not 0 <= self.probability <= 100:
            raise ValueError(f"probability out of range [0,100]: {self.probability}")
        if self.interval < 0:
            raise ValueError(f"interval must be >= 0: {self.interval}")
        if self.times < -1:
            raise ValueError(f"times must be >= -1: {self.times}")
        if self.space < 0:
            raise ValueError(f"space must be >= 0: {self.space}")
        if self.verbose not in (0, 1, 2):
            raise ValueError(f"verbose must be 0, 1 or 2: {self.verbose}")
        if self.stacktrace_depth < 0:
            raise ValueError(f"stacktrace_depth must be >= 0: {self.stacktrace_depth}")

    def tunables(self):
        return {attr: getattr(self, attr) for attr, _ in TUNABLES}

    def copy(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        values.update(changes)
        return FaultAttr(**values)

    @property
    def require_active(self):
        return not (self.require_start == 0 and self.require_end == ADDR_MAX)

    @property
    def reject_active(self):
        return self.reject_end > self.reject_start


@dataclass
class Task:
    task_id: int
    comm: str = "task"
    make_it_fail: bool = False
    fail_nth: int = 0
    stack: list = field(default_factory=list, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)


class TaskTable:
    def __init__(self):
        self._tasks: dict[int, Task] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def spawn(self, comm="task", task_id=None, make_it_fail=False):
        with self._lock:
            if task_id is None:
                task_id = next(self._ids)
                while task_id in self._tasks:
                    task_id = next(self._ids)
            if task_id in self._tasks:
                raise ValueError(f"task {task_id} already exists")
            task = Task(task_id, comm, make_it_fail)
            self._tasks[task_id] = task
            return task

    def get(self, task_id):
        try:
            return self._tasks[int(task_id)]
        except (KeyError, ValueError):
            raise NoSuchTaskError(f"no such task: {task_id}") from None

    def __contains__(self, task_id):
        return task_id in self._tasks

    def __iter__(self):
        return iter(sorted(self._tasks.values(), key=lambda t: t.task_id))

    def arm_fail_nth(self, task_id, n):
        """Fail the task's n-th upcoming should_fail call; n = 0 disarms."""
        if n < 0:
            raise ValueError("fail-nth must be >= 0")
        task = self.get(task_id)
        with task.lock:
            task.fail_nth = n

    def read_fail_nth(self, task_id):
        return self.get(task_id).fail_nth


class SymbolTable:
    """Stable abstract addresses for call sites and simulated modules."""

    CORE_BASE = 0x1000_0000
    MODULE_BASE = 0x4000_0000
    SLOT = 0x40

    def __init__(self):
        self._by_name: dict[str, int] = {}
        self._by_addr: dict[int, str] = {}
        self._next_core = self.CORE_BASE
        self._next_module = self.MODULE_BASE
        self.modules: dict[str, Module] = {}
        self._lock = threading.Lock()

    def address(self, symbol):
        with self._lock:
            addr = self._by_name.get(symbol)
            if addr is None:
                addr = self._next_core
                self._next_core += self.SLOT
                self._bind(symbol, addr)
            return addr

    def _bind(self, symbol, addr):
        self._by_name[symbol] = addr
        self._by_addr[addr] = symbol

    def resolve(self, addr):
        base = addr - addr % self.SLOT
        name = self._by_addr.get(base)
        if name is None:
            return f"0x{addr:x}"
        return name if base == addr else f"{name}+0x{addr - base:x}"

    def register_module(self, name, functions):
        """Lay out a module: .text holds one slot per function, .data follows."""
        with self._lock:
            if name in self.modules:
                return self.modules[name]
            text_start = self._next_module
            addr = text_start
            for fn in functions:
                self._bind(f"{name}:{fn}", addr)
                addr += self.SLOT
            data_start = addr
            module = Module(name, text_start, data_start, data_start + 0x1000)
            self._next_module = (module.data_end + 0xFFFF) & ~0xFFFF
            self.modules[name] = module
            return module


@dataclass(frozen=True)
class Module:
    name: str
    text_start: int
    data_start: int
    data_end: int

    def symbol(self, fn):
        return f"{self.name}:{fn}"


@dataclass
class FaultContext:
    """Per-call information fed to :func:`should_fail`."""

    task: Task | None
    caller_trace: tuple = ()
    size: int = 0
    info: dict = field(default_factory=dict)

    @property
    def task_id(self):
        return self.task.task_id if self.task is not None else 0

    @property
    def make_it_fail(self):
        return self.task is not None and self.task.make_it_fail

    @property
    def fail_nth(self):
        return self.task.fail_nth if self.task is not None else 0


@dataclass(frozen=True)
class FaultEvent:
    logical_time: int
    capability: str
    decision: bool
    task_id: int
    size: int
    extra: tuple = ()
    trace: tuple | None = None

    def render(self):
        line = (f"{self.logical_time} {self.capability} {'FAIL' if self.decision else 'PASS'} "
                f"task={self.task_id} size={self.size}")
        for key, value in self.extra:
            line += f" {key}={value}"
        if self.trace is not None:
            line += "\n  Call Trace:"
            for addr, symbol in self.trace:
                line += f"\n   [<{addr:016x}>] {symbol}"
        return line


class EventLog:
    """The dmesg analog: a totally ordered, append-only decision log."""

    def __init__(self, symbols=None, record_passes=False, sink=None):
        self.symbols = symbols
        self.record_passes = record_passes
        self.sink = sink
        self._events: list[FaultEvent] = []
        self._clock = 0
        self._lock = threading.Lock()

    def emit(self, capability, decision, ctx, trace=False):
        with self._lock:
            self._clock += 1
            dump = None
            if trace:
                resolve = self.symbols.resolve if self.symbols else (lambda a: f"0x{a:x}")
                dump = tuple((a, resolve(a)) for a in ctx.caller_trace)
            event = FaultEvent(self._clock, capability, decision, ctx.task_id, ctx.size,
                               tuple(ctx.info.items()), dump)
            self._events.append(event)
            if self.sink is not None:
                self.sink(event)
            return event

    @property
    def clock(self):
        return self._clock

    def __len__(self):
        return len(self._events)

    def __iter__(self):
        return iter(list(self._events))

    def since(self, mark):
        """Events with logical_time > mark."""
        with self._lock:
            return [e for e in self._events if e.logical_time > mark]

    def failures(self, capability=None, since=0):
        return [e for e in self.since(since)
                if e.decision and (capability is None or e.capability == capability)]

    def render(self, events=None):
        events = self._events if events is None else events
        return "".join(e.render() + "\n" for e in events)


def _stack_ok(attr, trace):
    if not (attr.require_active or attr.reject_active):
        return True
    found = not attr.require_active
    for addr in trace[:attr.stacktrace_depth]:
        if attr.reject_active and attr.reject_start <= addr < attr.reject_end:
            return False
        if attr.require_active and attr.require_start <= addr < attr.require_end:
            found = True
    return found


def _gates_pass(attr, ctx):
    if attr.task_filter and not ctx.make_it_fail:
        return False
    if not _stack_ok(attr, ctx.caller_trace):
        return False
    if attr.space > 0:
        # blocked until the budget is consumed; the consuming call proceeds
        if attr.space > ctx.size:
            attr.space -= ctx.size
            return False
        attr.space = 0
    if attr.times == 0:
        return False
    if attr.interval > 1 and attr.count % attr.interval:
        return False
    return attr.rng.randrange(100) < attr.probability


def should_fail(attr: FaultAttr, ctx: FaultContext) -> bool:
    """Decide whether this call fails; see the module docstring for gate order."""
    with attr.lock:
        attr.count += 1
        task = ctx.task
        forced = False
        if task is not None and task.fail_nth > 0:
            with task.lock:
                task.fail_nth -= 1
                forced = task.fail_nth == 0
            if not forced:
                return _finish(attr, ctx, False)
        if not forced and not _gates_pass(attr, ctx):
            return _finish(attr, ctx, False)
        if attr.times > 0:
            attr.times -= 1
        return _finish(attr, ctx, True)


def _finish(attr, ctx, decision):
    log = attr.log
    if log is not None:
        if decision and attr.verbose > 0:
            log.emit(attr.name, True, ctx, trace=attr.verbose == 2)
        elif not decision and log.record_passes:
            log.emit(attr.name, False, ctx)
    return decision


BOOT_FIELDS = ("interval", "probability", "space", "times")


def setup_fault_attr(attr: FaultAttr, spec: str) -> FaultAttr:
    """Apply a boot-time ``interval,probability,space,times`` spec to ``attr``."""
    parts = spec.split(",")
    if len(parts) != len(BOOT_FIELDS):
        raise FaultSpecError("spec", f"expected 4 comma-separated fields, got {len(parts)}")
    values = {}
    for name, raw in zip(BOOT_FIELDS, parts):
        try:
            values[name] = int(raw.strip(), 0)
        except ValueError:
            raise FaultSpecError(name, f"not an integer: {raw!r}") from None
    bounds = {"interval": (0, ADDR_MAX), "probability": (0, 100),
              "space": (0, INT_MAX), "times": (-1, INT_MAX)}
    for name, value in values.items():
        lo, hi = bounds[name]
        if not lo <= value <= hi:
            raise FaultSpecError(name, f"{value} outside [{lo},{hi}]")
    with attr.lock:
        for name, value in values.items():
            setattr(attr, name, value)
    return attr


@contextmanager
def frame(task, symbols, symbol):
    """Push ``symbol`` onto the task's simulated call stack."""
    task.stack.append(symbols.address(symbol))
    try:
        yield
    finally:
        task.stack.pop()
