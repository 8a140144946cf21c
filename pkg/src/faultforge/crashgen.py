"""Record a workload's block I/O, enumerate crash images, test recovery on each.

Crash model: writes between two flushes may persist in any subset; every
write acknowledged before a completed flush persists.  Epoch ``e`` owns the
writes after the ``e``-th flush.  A state is ``(e, mask)``: all writes of
epochs before ``e`` plus the masked subset of epoch ``e``.  ``(e, 0)`` for
``e > 0`` duplicates the full state of epoch ``e - 1`` and is skipped, so
there are ``sum(2**n_e) - (E - 1)`` distinct states.
"""

from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import CombinatorialLimitError, FormatError, StoreError
from .simstore.checker import BAD_OBJECT_CHECKSUM, INCOMPLETE_JOURNAL_TXN, Checker
from .simstore.checksum import digest64
from .simstore.device import FLUSH, MARK, WRITE, BlockDevice
from .simstore.layout import ImageView
from .simstore.store import Store
from .tracefile import dump_trace, load_trace, renumber
from .workloads import apply_op

MAX_EPOCH_WRITES = 20

CONSISTENT = "Consistent"
CHECKSUM_ERR = "ChecksumErr"
JOURNAL_TXN_ERR = "JournalTxnErr"
METADATA_ERR = "MetadataErr"
MOUNT_ERR = "MountErr"
OUTCOMES = (CONSISTENT, CHECKSUM_ERR, JOURNAL_TXN_ERR, METADATA_ERR, MOUNT_ERR)


@dataclass
class WriteTrace:
    base_image: bytes
    records: list
    block_size: int = 4096
    journaled: bool = True
    aborted: bool = False

    @property
    def base_digest(self):
        return digest64(self.base_image)

    def writes(self):
        return [r for r in self.records if r.op == WRITE]

    def epochs(self, torn=False) -> list[list[tuple[int, bytes]]]:
        """Flush-delimited write units; empty epochs dropped, at least one kept."""
        epochs, cur = [], []
        for rec in self.records:
            if rec.op == WRITE:
                if torn:
                    bs = self.block_size
                    cur += [(rec.lba + i, rec.payload[i * bs:(i + 1) * bs]) for i in range(rec.nblocks(bs))]
                else:
                    cur.append((rec.lba, rec.payload))
            elif rec.op == FLUSH and cur:
                epochs.append(cur)
                cur = []
        if cur or not epochs:
            epochs.append(cur)
        return epochs

    def final_image(self) -> bytes:
        dev = BlockDevice.from_image(self.base_image, block_size=self.block_size)
        for rec in self.writes():
            dev.write(rec.lba, rec.payload)
        return dev.image()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(dump_trace(self))

    @classmethod
    def load(cls, path) -> WriteTrace:
        with open(path, "rb") as fh:
            return cls(**load_trace(fh.read()))


def record(ops, image: bytes, journaled=True, seed=0):
    """Mount ``image``, run ``ops`` while recording.  Returns (trace, results).

    Each op is followed by an ``op-end`` mark.  A failing op stops the
    workload and flags the trace as aborted.
    """
    dev = BlockDevice.from_image(image)
    store = Store.mount(dev, journaled=journaled)
    base = dev.image()
    results = []
    aborted = False
    with dev.recording() as rec:
        for op in ops:
            try:
                apply_op(store, op, seed)
                results.append((str(op), "ok"))
            except StoreError as exc:
                results.append((str(op), str(exc)))
                aborted = True
            dev.mark("op-end")
            if aborted:
                break
    trace = WriteTrace(base, renumber(rec.records), dev.block_size, journaled, aborted)
    return trace, results


def count_states(trace_or_sizes, torn=False) -> int:
    sizes = trace_or_sizes if isinstance(trace_or_sizes, list) else [len(e) for e in trace_or_sizes.epochs(torn)]
    return sum(2 ** n for n in sizes) - (len(sizes) - 1)


@dataclass(frozen=True)
class CrashState:
    index: int
    epoch: int
    mask: int

    def subset(self):
        return tuple(i for i in range(self.mask.bit_length()) if self.mask >> i & 1)

    def materialize(self, trace: WriteTrace, torn=False) -> bytes:
        epochs = trace.epochs(torn)
        dev = BlockDevice.from_image(trace.base_image, block_size=trace.block_size)
        for units in epochs[:self.epoch]:
            for lba, data in units:
                dev.write(lba, data)
        units = epochs[self.epoch]
        for i in self.subset():
            lba, data = units[i]
            dev.write(lba, data)
        return dev.image()


def _decode(index, sizes) -> CrashState:
    rest = index
    for e, n in enumerate(sizes):
        span = 2 ** n if e == 0 else 2 ** n - 1
        if rest < span:
            return CrashState(index, e, rest if e == 0 else rest + 1)
        rest -= span
    raise IndexError(index)


def enumerate_states(trace: WriteTrace, limit=None, seed=0, torn=False):
    """Yield crash states in index order; a seeded sample of ``limit`` when set."""
    sizes = [len(e) for e in trace.epochs(torn)]
    total = count_states(sizes)
    if limit is None:
        worst = max(sizes)
        if worst > MAX_EPOCH_WRITES:
            raise CombinatorialLimitError(
                f"epoch with {worst} writes has 2**{worst} subsets; pass a limit to sample")
        indices = range(total)
    elif limit >= total:
        indices = range(total)
    else:
        ends = {0, total - 1}
        interior = range(1, total - 1)
        pick = random.Random(seed).sample(interior, max(0, limit - len(ends)))
        indices = sorted(ends | set(pick))
    for index in indices:
        yield _decode(index, sizes)


@dataclass
class Expectations:
    """Logical states a recovered image may legally show, from trace marks.

    ``snapshots[k]`` is the object set after the ``k``-th op (0 is the base);
    ``floor[e]`` is the first snapshot index epoch ``e`` may show, the op
    count made durable before the epoch began.
    """

    snapshots: list
    floor: list

    @classmethod
    def from_trace(cls, trace: WriteTrace, torn=False) -> Expectations:
        dev = BlockDevice.from_image(trace.base_image, block_size=trace.block_size)
        snapshots = [ImageView(dev.image()).objects()]
        floor = []
        ops_done = 0
        durable = 0
        epoch_open = False
        for rec in trace.records:
            if rec.op == WRITE:
                if not epoch_open:
                    floor.append(durable)
                    epoch_open = True
                dev.write(rec.lba, rec.payload)
            elif rec.op == FLUSH:
                epoch_open = False
            elif rec.op == MARK and rec.label == "op-end":
                ops_done += 1
                snapshots.append(ImageView(dev.image()).objects())
            elif rec.op == MARK and rec.label == "durable":
                durable = ops_done + 1
        n_epochs = len(trace.epochs(torn))
        floor = (floor or [0])[:n_epochs]
        return cls(snapshots, floor)

    def allowed(self, epoch):
        return self.snapshots[self.floor[epoch]:]


@dataclass
class StateOutcome:
    index: int
    epoch: int
    subset: tuple
    outcome: str
    detail: str = ""
    digest: int = 0

    def to_dict(self):
        return {"state": self.index, "epoch": self.epoch, "subset": list(self.subset),
                "outcome": self.outcome, "detail": self.detail, "digest": f"{self.digest:016x}"}


@dataclass
class SymptomReport:
    outcomes: list = field(default_factory=list)

    def counts(self):
        out = {k: 0 for k in OUTCOMES}
        for o in self.outcomes:
            out[o.outcome] += 1
        return out

    @property
    def all_consistent(self):
        return all(o.outcome == CONSISTENT for o in self.outcomes)

    def to_dict(self):
        return {"states": len(self.outcomes), "counts": self.counts(),
                "outcomes": [o.to_dict() for o in self.outcomes]}


def classify(image: bytes, allowed) -> tuple[str, str]:
    """Mount (with journal replay), read everything, check.  Precedence:
    MountErr, JournalTxnErr, ChecksumErr, MetadataErr, else Consistent."""
    dev = BlockDevice.from_image(image)
    try:
        store = Store.mount(dev)
    except (StoreError, FormatError) as exc:
        return MOUNT_ERR, str(exc)
    read_error = None
    try:
        objects = store.objects()
    except StoreError as exc:
        objects, read_error = None, str(exc)
    report = Checker(dev).run()
    kinds = report.kinds()
    if INCOMPLETE_JOURNAL_TXN in kinds:
        return JOURNAL_TXN_ERR, report.render()
    if BAD_OBJECT_CHECKSUM in kinds or read_error:
        return CHECKSUM_ERR, read_error or report.render()
    if kinds:
        return METADATA_ERR, report.render()
    if objects not in allowed:
        return METADATA_ERR, "recovered objects match no committed state"
    return CONSISTENT, ""


def test_states(trace: WriteTrace, states, workers=1, torn=False, expectations=None) -> SymptomReport:
    expectations = expectations or Expectations.from_trace(trace, torn)

    def one(state):
        image = state.materialize(trace, torn)
        outcome, detail = classify(image, expectations.allowed(state.epoch))
        return StateOutcome(state.index, state.epoch, state.subset(), outcome, detail, digest64(image))

    states = list(states)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, states))
    else:
        results = [one(s) for s in states]
    results.sort(key=lambda o: o.index)
    return SymptomReport(results)


test_states.__test__ = False  # not a pytest test despite the name
