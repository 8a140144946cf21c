"""Registered injection points.

Registering a capability is the user-space version of the kernel recipe:
declare a :class:`FaultAttr` with defaults, optionally apply a boot spec,
expose its tunables in the config tree, then call the capability's hook
from the code path that should fail.

Capability-specific filters (cache filter, GFP flags, device marks) run
before the generic engine, so they also win over an armed fail-nth.
"""

from __future__ import annotations

import enum
import errno
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from .config import ConfigNode, render_bool, parse_bool
from .core import ADDR_MAX, INT_MAX, MAX_STACK_TRACE_DEPTH, FaultAttr, setup_fault_attr, should_fail
from .errors import ConfigError, DuplicateCapabilityError

TABLE1_NODES = {
    # node: (attr, kind, bounds)
    "probability": ("probability", "integer", (0, 100)),
    "interval": ("interval", "long", (0, ADDR_MAX)),
    "times": ("times", "integer", (-1, INT_MAX)),
    "space": ("space", "integer", (0, INT_MAX)),
    "verbose": ("verbose", "integer", (0, 2)),
    "task-filter": ("task_filter", "boolean", None),
    "require-start": ("require_start", "long", (0, ADDR_MAX)),
    "require-end": ("require_end", "long", (0, ADDR_MAX)),
    "reject-start": ("reject_start", "long", (0, ADDR_MAX)),
    "reject-end": ("reject_end", "long", (0, ADDR_MAX)),
    "stacktrace-depth": ("stacktrace_depth", "long", (0, MAX_STACK_TRACE_DEPTH)),
}


class EIType(enum.Enum):
    NULL = "NULL"
    ERRNO = "ERRNO"
    ERRNO_NULL = "ERRNO_NULL"
    TRUE = "TRUE"


MAX_ERRNO = 4095

DEFAULT_RETVAL = {
    EIType.NULL: 0,
    EIType.ERRNO: -errno.EINVAL,
    EIType.ERRNO_NULL: -errno.EINVAL,
    EIType.TRUE: 1,
}


def retval_ok(etype: EIType, value: int) -> bool:
    is_errno = -MAX_ERRNO <= value <= -1
    if etype is EIType.NULL:
        return value == 0
    if etype is EIType.ERRNO:
        return is_errno
    if etype is EIType.ERRNO_NULL:
        return is_errno or value == 0
    return value > 0


@dataclass
class InjectableFunction:
    """A function whose failure path can be forced without running its body.

    ``returns_error_code`` records the first requirement declaratively; the
    second (no state change before the first error return) cannot be checked
    mechanically, so ``attested`` stands in for it.
    """

    name: str
    error_type: EIType
    func: Callable
    retval: int = 0
    returns_error_code: bool = True
    attested: bool = True

    def __post_init__(self):
        if not self.returns_error_code:
            raise ValueError(f"{self.name}: injectable functions must return an error code")
        if not self.retval:
            self.retval = DEFAULT_RETVAL[self.error_type]
        if not retval_ok(self.error_type, self.retval):
            raise ValueError(f"{self.name}: retval {self.retval} invalid for {self.error_type.value}")

    def failure_value(self, retval=None):
        """What a bypassed call returns, given the configured retval."""
        retval = self.retval if retval is None else retval
        if self.error_type is EIType.NULL:
            return None
        if self.error_type is EIType.ERRNO_NULL and retval == 0:
            return None
        return retval


INJECTABLE: dict[str, InjectableFunction] = {}


def allow_error_injection(error_type: EIType, name: str | None = None, *, attested=True):
    """Mark ``func`` as error-injectable (the ALLOW_ERROR_INJECTION analog)."""

    def mark(func):
        key = name or f"{func.__module__}.{func.__qualname__}"
        INJECTABLE[key] = InjectableFunction(key, error_type, func, attested=attested)
        func.injectable_name = key
        return func

    return mark


@dataclass
class Extension:
    kind: str
    default: Any
    bounds: tuple | None = None
    parse: Callable[[str], Any] | None = None
    render: Callable[[Any], str] | None = None


class Capability:
    """One injection point: a FaultAttr plus capability-specific options."""

    def __init__(self, name, attr: FaultAttr, extensions: dict[str, Extension] | None = None):
        self.name = name
        self.attr = attr
        self.extensions = dict(extensions or {})
        self.options = {key: ext.default for key, ext in self.extensions.items()}
        self._lock = threading.Lock()

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"

    def should_fail(self, ctx) -> bool:
        return should_fail(self.attr, ctx)

    def option(self, key):
        return self.options[key]

    def set_option(self, key, value):
        with self._lock:
            self.options[key] = value

    def extra_nodes(self):
        """Config nodes beyond Table 1 and the declared extensions."""
        return []


class FailSlab(Capability):
    def __init__(self, name, attr, extensions=None):
        ext = {
            "ignore-gfp-wait": Extension("boolean", False),
            "cache-filter": Extension("boolean", False),
        }
        ext.update(extensions or {})
        super().__init__(name, attr, ext)
        self.marked_caches: set[str] = set()

    def check(self, ctx, cache, can_sleep=False):
        if self.options["ignore-gfp-wait"] and can_sleep:
            return False
        if self.options["cache-filter"] and cache not in self.marked_caches:
            return False
        ctx.info["cache"] = cache
        return self.should_fail(ctx)

    def mark_cache(self, cache, on=True):
        with self._lock:
            (self.marked_caches.add if on else self.marked_caches.discard)(cache)


class FailPageAlloc(Capability):
    def __init__(self, name, attr, extensions=None):
        ext = {
            "ignore-gfp-wait": Extension("boolean", False),
            "ignore-gfp-highmem": Extension("boolean", False),
        }
        ext.update(extensions or {})
        super().__init__(name, attr, ext)

    def check(self, ctx, order=0, can_sleep=False, highmem=False):
        if self.options["ignore-gfp-wait"] and can_sleep:
            return False
        if self.options["ignore-gfp-highmem"] and highmem:
            return False
        ctx.info["order"] = order
        return self.should_fail(ctx)


class FailMakeRequest(Capability):
    def check(self, ctx, device, partition=None, is_write=False):
        marked = device.make_it_fail or (partition is not None and partition in device.failing_partitions)
        if not marked:
            return False
        ctx.info["dev"] = device.name
        ctx.info["part"] = partition or "-"
        ctx.info["op"] = "write" if is_write else "read"
        return self.should_fail(ctx)


class FailFunction(Capability):
    def __init__(self, name, attr, extensions=None, catalog=None):
        super().__init__(name, attr, extensions)
        self.catalog = INJECTABLE if catalog is None else catalog
        self.targets: list[str] = []
        self.retvals: dict[str, int] = {}

    def retval(self, fn_name):
        fn = self.catalog[fn_name]
        return self.retvals.get(fn_name, fn.retval)

    def set_retval(self, fn_name, value):
        fn = self.catalog[fn_name]
        if not retval_ok(fn.error_type, value):
            raise ConfigError(f"retval {value} incompatible with {fn.error_type.value} for {fn_name}")
        with self._lock:
            self.retvals[fn_name] = value

    def write_inject(self, text):
        text = text.strip()
        with self._lock:
            if not text:
                self.targets.clear()
            elif text.startswith("!"):
                name = text[1:]
                if name not in self.targets:
                    raise ConfigError(f"{name} is not being injected")
                self.targets.remove(name)
            else:
                if text not in self.catalog:
                    raise ConfigError(f"{text} is not an error-injectable function")
                if text not in self.targets:
                    self.targets.append(text)

    def restore_inject(self, text):
        with self._lock:
            self.targets = [t for t in text.split("\n") if t]

    def extra_nodes(self):
        nodes = [ConfigNode(f"{self.name}/inject", "action", lambda: list(self.targets),
                            self.write_inject, render=lambda v: "\n".join(v),
                            restore=self.restore_inject)]
        for fn_name in sorted(self.catalog):
            nodes.append(ConfigNode(
                f"{self.name}/{fn_name}/retval", "integer",
                lambda n=fn_name: self.retval(n),
                lambda v, n=fn_name: self.set_retval(n, v),
                bounds=(-MAX_ERRNO, 2**63 - 1)))
        return nodes

    def check(self, ctx, fn_name):
        if fn_name not in self.targets:
            return False
        ctx.info["fn"] = fn_name
        ctx.info["retval"] = self.retval(fn_name)
        return self.should_fail(ctx)

    def call(self, ctx, func, *args, **kwargs):
        """Run ``func`` unless injection fires, in which case bypass it entirely."""
        fn_name = getattr(func, "injectable_name", None)
        if fn_name is None:
            raise ConfigError(f"{func!r} is not marked error-injectable")
        if self.check(ctx, fn_name):
            return self.catalog[fn_name].failure_value(self.retval(fn_name))
        return func(*args, **kwargs)


class NvmeStatus(enum.IntEnum):
    """Generic command status values (subset)."""

    SUCCESS = 0x0
    INVALID_OPCODE = 0x1
    INVALID_FIELD = 0x2
    DATA_XFER_ERROR = 0x4
    INTERNAL = 0x6
    ABORT_REQ = 0x7
    WRITE_FAULT = 0x280
    READ_ERROR = 0x281


NVME_SC_DNR = 0x4000


def parse_nvme_status(text: str) -> NvmeStatus:
    text = text.strip()
    try:
        return NvmeStatus[text.upper()]
    except KeyError:
        pass
    try:
        return NvmeStatus(int(text, 0))
    except ValueError:
        raise ConfigError(f"unknown NVMe status code {text!r}") from None


@dataclass
class NvmeCompletion:
    device: str
    command: str
    status: int = NvmeStatus.SUCCESS
    result: int = 0

    @property
    def dnr(self):
        return bool(self.status & NVME_SC_DNR)

    @property
    def code(self):
        return self.status & ~NVME_SC_DNR


class NvmeFaultInject(Capability):
    def __init__(self, name, attr, extensions=None):
        ext = {
            "status": Extension("text", NvmeStatus.INVALID_OPCODE,
                                parse=parse_nvme_status, render=lambda s: NvmeStatus(s).name),
            "dont_retry": Extension("boolean", True),
        }
        ext.update(extensions or {})
        super().__init__(name, attr, ext)

    def inject(self, ctx, completion: NvmeCompletion) -> NvmeCompletion:
        status = NvmeStatus(self.options["status"])
        dnr = self.options["dont_retry"]
        ctx.info["cmd"] = completion.command
        ctx.info["status"] = status.name
        ctx.info["dnr"] = int(dnr)
        if self.should_fail(ctx):
            completion.status = int(status) | (NVME_SC_DNR if dnr else 0)
        return completion


class CapabilityRegistry:
    """Name -> capability, with config-tree mounting on registration."""

    def __init__(self, tree, token, log=None, seed=0, boot_params=None):
        self.tree = tree
        self.token = token
        self.log = log
        self.seed = seed
        self.boot_params = dict(boot_params or {})
        self._caps: dict[str, Capability] = {}
        self._lock = threading.Lock()

    def __getitem__(self, name) -> Capability:
        return self._caps[name]

    def __contains__(self, name):
        return name in self._caps

    def __iter__(self):
        return iter(list(self._caps.values()))

    def names(self):
        return sorted(self._caps)

    def register(self, name, defaults: FaultAttr | None = None, extensions=None,
                 cls=Capability, boot_spec=None, supports_boot=True, **kwargs) -> Capability:
        with self._lock:
            if name in self._caps:
                raise DuplicateCapabilityError(f"capability {name!r} already registered")
            base = defaults if defaults is not None else FaultAttr()
            attr = base.copy(name=name, seed=self.seed)
            attr.log = self.log
            spec = boot_spec if boot_spec is not None else self.boot_params.get(name)
            if spec is not None:
                if not supports_boot:
                    raise ConfigError(f"{name} does not support the boot option")
                setup_fault_attr(attr, spec)
            cap = cls(name, attr, extensions, **kwargs)
            self._caps[name] = cap
        self._mount(cap)
        return cap

    def unregister(self, name):
        with self._lock:
            cap = self._caps.pop(name)
        self.tree.unmount(name)
        return cap

    def _mount(self, cap):
        for node_name, (field_name, kind, bounds) in TABLE1_NODES.items():
            self.tree.mount(ConfigNode(
                f"{cap.name}/{node_name}", kind,
                lambda a=cap.attr, f=field_name: getattr(a, f),
                lambda v, a=cap.attr, f=field_name: _set_attr(a, f, v),
                bounds=bounds))
        for key, ext in cap.extensions.items():
            self.tree.mount(ConfigNode(
                f"{cap.name}/{key}", ext.kind,
                lambda c=cap, k=key: c.option(k),
                lambda v, c=cap, k=key: c.set_option(k, v),
                bounds=ext.bounds, parse=ext.parse, render=ext.render))
        for node in cap.extra_nodes():
            self.tree.mount(node)


def _set_attr(attr, field_name, value):
    with attr.lock:
        setattr(attr, field_name, value)


def bool_node(path, getter, setter):
    return ConfigNode(path, "boolean", getter, setter, parse=parse_bool, render=render_bool)
