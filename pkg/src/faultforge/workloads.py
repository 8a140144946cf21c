"""Named workloads: object-store op lists for crashgen, task bodies for failcmd."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import AllocationError, IOFault, StoreError
from .fixtures import payload
from .simstore.device import BlockDevice
from .simstore.layout import format_image
from .simstore.store import Store

PRESETS = {
    "put": "put:a:5000",
    "puts3": "put:a:5000,put:b:300,put:c:9000",
    "put-delete": "put:a:5000,put:b:300,delete:a",
    "overwrite": "put:a:5000,put:a:300",
}


@dataclass(frozen=True)
class Op:
    kind: str
    name: str
    size: int = 0

    def __str__(self):
        return f"{self.kind}:{self.name}:{self.size}" if self.kind == "put" else f"{self.kind}:{self.name}"


def parse_ops(text: str) -> list[Op]:
    """``put:a:5000,delete:a`` or a preset name."""
    text = PRESETS.get(text, text)
    ops = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if parts[0] == "put" and len(parts) == 3:
            ops.append(Op("put", parts[1], int(parts[2])))
        elif parts[0] == "delete" and len(parts) == 2:
            ops.append(Op("delete", parts[1]))
        else:
            raise ValueError(f"bad workload op {item!r}")
    return ops


def apply_op(store: Store, op: Op, seed=0):
    if op.kind == "put":
        store.put(op.name, payload(op.name, op.size, seed))
    else:
        store.delete(op.name)


# failcmd task bodies: each takes the runtime and returns a summary dict

def _fresh_store(rt, name="ffwork0", blocks=128):
    dev = BlockDevice(name, blocks)
    dev.write(0, format_image(blocks))
    rt.attach(dev)
    return dev, Store.mount(dev, rt)


def put_loop(rt, count=200, seed=0):
    dev, store = _fresh_store(rt)
    ok = failed = 0
    try:
        for i in range(count):
            name = f"k{i % 16}"
            try:
                store.put(name, payload(name, 512 + i, seed))
                ok += 1
            except (StoreError, AllocationError):
                failed += 1
    finally:
        rt.detach(dev)
    return {"ok": ok, "failed": failed}


def alloc_loop(rt, count=1000, cache="kmalloc-64"):
    ok = failed = 0
    for _ in range(count):
        try:
            rt.kmalloc(cache, 64)
            ok += 1
        except AllocationError:
            failed += 1
    return {"ok": ok, "failed": failed}


def page_loop(rt, count=1000):
    ok = failed = 0
    for i in range(count):
        try:
            rt.alloc_pages(i % 3)
            ok += 1
        except AllocationError:
            failed += 1
    return {"ok": ok, "failed": failed}


def mount_once(rt):
    dev = BlockDevice("ffwork0", 64)
    dev.write(0, format_image(64))
    rt.attach(dev)
    try:
        Store.mount(dev, rt)
        return {"mounted": True}
    except StoreError as exc:
        return {"mounted": False, "errno": exc.errno}
    finally:
        rt.detach(dev)


def read_loop(rt, count=50):
    dev, store = _fresh_store(rt)
    ok = failed = 0
    try:
        for i in range(count):
            try:
                dev_read = store.io.read(i % dev.block_count)
                ok += dev_read is not None
            except IOFault:
                failed += 1
    finally:
        rt.detach(dev)
    return {"ok": ok, "failed": failed}


TASKS = {
    "put-loop": put_loop,
    "alloc-loop": alloc_loop,
    "page-loop": page_loop,
    "mount": mount_once,
    "read-loop": read_loop,
}
