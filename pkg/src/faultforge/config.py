"""A debugfs/procfs-like tree of text-valued tunables.

Paths drop the ``/sys/kernel/debug/`` prefix: ``failslab/probability``,
``tasks/7/fail-nth``, ``nvme/nvme0n1/fault_inject/status`` and so on.
Writes need the tree's admin token, standing in for root.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Callable

from .errors import BoundsError, ConfigError, PermissionDeniedError, UnknownPathError

KINDS = ("integer", "long", "boolean", "text", "action")

_TRUE = {"Y", "y", "1"}
_FALSE = {"N", "n", "0"}


def parse_bool(value: str) -> bool:
    value = value.strip()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ConfigError(f"expected one of Y/N/0/1, got {value!r}")


def render_bool(value) -> str:
    return "Y" if value else "N"


class AdminToken:
    __slots__ = ()

    def __repr__(self):
        return "<admin>"


@dataclass
class ConfigNode:
    path: str
    kind: str
    getter: Callable[[], Any]
    setter: Callable[[Any], None] | None = None
    bounds: tuple | None = None
    parse: Callable[[str], Any] | None = None
    render: Callable[[Any], str] | None = None
    restore: Callable[[str], None] | None = None
    persistent: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown node kind {self.kind}")

    def decode(self, text: str):
        text = text.strip() if self.kind != "text" else text.rstrip("\n")
        if self.parse is not None:
            value = self.parse(text)
        elif self.kind in ("integer", "long"):
            try:
                value = int(text, 0)
            except ValueError:
                raise ConfigError(f"{self.path}: not an integer: {text!r}") from None
        elif self.kind == "boolean":
            value = parse_bool(text)
        else:
            value = text
        if self.bounds is not None and isinstance(value, int) and not isinstance(value, bool):
            lo, hi = self.bounds
            if not lo <= value <= hi:
                raise BoundsError(f"{self.path}: {value} outside [{lo},{hi}]")
        return value

    def encode(self, value) -> str:
        if self.render is not None:
            return self.render(value)
        if self.kind == "boolean":
            return render_bool(value)
        return str(value)


class ConfigTree:
    def __init__(self):
        self._nodes: dict[str, ConfigNode] = {}
        self._lock = threading.RLock()
        self.admin_token = AdminToken()

    def mount(self, node: ConfigNode):
        with self._lock:
            if node.path in self._nodes:
                raise ConfigError(f"node already mounted: {node.path}")
            self._nodes[node.path] = node
        return node

    def unmount(self, prefix):
        with self._lock:
            for path in [p for p in self._nodes if p == prefix or p.startswith(prefix + "/")]:
                del self._nodes[path]

    def node(self, path) -> ConfigNode:
        try:
            return self._nodes[path.strip("/")]
        except KeyError:
            raise UnknownPathError(path) from None

    def __contains__(self, path):
        return path.strip("/") in self._nodes

    def paths(self, prefix=""):
        prefix = prefix.strip("/")
        return sorted(p for p in self._nodes
                      if not prefix or p == prefix or p.startswith(prefix + "/"))

    def write(self, path, value, token=None):
        if token is not self.admin_token:
            raise PermissionDeniedError(f"writing {path} requires the admin token")
        node = self.node(path)
        if node.setter is None:
            raise ConfigError(f"{path} is read-only")
        decoded = node.decode(str(value))
        with self._lock:
            node.setter(decoded)

    def read(self, path) -> str:
        node = self.node(path)
        return node.encode(node.getter())

    def snapshot(self) -> dict[str, str]:
        with self._lock:
            return {p: self.read(p) for p in self.paths() if self._nodes[p].persistent}

    def restore(self, snapshot: dict[str, str], token=None):
        if token is not self.admin_token:
            raise PermissionDeniedError("restore requires the admin token")
        for path, value in snapshot.items():
            if path not in self:
                continue
            node = self.node(path)
            if self.read(path) == value:
                continue
            if node.restore is not None:
                node.restore(value)
            else:
                self.write(path, value, token)

    def dump(self, snapshot=None) -> str:
        snapshot = self.snapshot() if snapshot is None else snapshot
        return "".join(f"{p}\t{v!r}\n" for p, v in sorted(snapshot.items()))
