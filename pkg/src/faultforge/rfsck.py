"""Interrupted-repair testing.

For every selected prefix ``p`` of the checker's recorded I/O: replay the
first ``p`` records onto a fresh copy of the test image, run the checker on
that, and compare the result with the uninterrupted repair.
"""

from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import FormatError, GeometryMismatchError
from .simstore.checker import Checker, check_image
from .simstore.checksum import digest64
from .simstore.device import FLUSH, WRITE, BlockDevice
from .simstore.layout import JCOMMIT_MAGIC, MAGIC, ImageView, Superblock
from .tracefile import renumber

MATCH, REPAIRED_TO_MATCH, MISMATCH = "Match", "RepairedToMatch", "Mismatch"


@dataclass
class InterruptionVerdict:
    prefix_length: int
    outcome: str
    diff: list = field(default_factory=list)
    interrupted_digest: int = 0

    def to_dict(self):
        return {"prefix": self.prefix_length, "outcome": self.outcome, "diff": list(self.diff),
                "interrupted_digest": f"{self.interrupted_digest:016x}"}


@dataclass
class Campaign:
    variant: str
    history: list
    reference_digest: int
    verdicts: list

    def counts(self):
        out = {MATCH: 0, REPAIRED_TO_MATCH: 0, MISMATCH: 0}
        for v in self.verdicts:
            out[v.outcome] += 1
        return out

    def to_dict(self):
        return {"variant": self.variant, "history_length": len(self.history),
                "reference_digest": f"{self.reference_digest:016x}", "counts": self.counts(),
                "verdicts": [v.to_dict() for v in self.verdicts]}


def record_check(image: bytes, variant="journaled"):
    """Steps 2-4: full check on a copy, recording its writes and flushes."""
    device = BlockDevice.from_image(image)
    with device.recording() as rec:
        report = Checker(device, variant).run()
    history = renumber(r for r in rec.records if r.op in (WRITE, FLUSH))
    return device.image(), history, report


def replay(image: bytes, history, prefix: int, block_size=4096) -> bytes:
    """Apply the first ``prefix`` records of ``history`` to a copy of ``image``."""
    if len(image) % block_size:
        raise GeometryMismatchError("image size is not a multiple of the history block size")
    if not 0 <= prefix <= len(history):
        raise ValueError(f"prefix {prefix} outside 0..{len(history)}")
    device = BlockDevice.from_image(image, block_size=block_size)
    for rec in history[:prefix]:
        if rec.op != WRITE:
            continue
        if rec.length % block_size or rec.lba + rec.length // block_size > device.block_count:
            raise GeometryMismatchError(f"record {rec.seq} does not fit the image geometry")
        if rec.lba == 0 and rec.payload[:8] == MAGIC:
            try:
                sb = Superblock.unpack(rec.payload[:block_size])
            except FormatError:
                sb = None
            if sb is not None and sb.block_count != device.block_count:
                raise GeometryMismatchError(
                    f"history is for a {sb.block_count}-block image, not {device.block_count}")
        device.write(rec.lba, rec.payload)
    return device.image()


def compare_images(a: bytes, b: bytes, mode="logical") -> list[str]:
    """Differences between two images; empty means equivalent.

    Logical mode compares object names and bytes, geometry and the object
    count; journal sequence numbers and free-block residue are ignored.
    """
    if mode == "byte":
        if len(a) != len(b):
            return [f"size {len(a)} != {len(b)}"]
        bs = 4096
        return [f"block {i} differs" for i in range(len(a) // bs) if a[i * bs:(i + 1) * bs] != b[i * bs:(i + 1) * bs]]
    views = []
    for label, img in (("a", a), ("b", b)):
        try:
            views.append(ImageView(img))
        except (FormatError, ValueError) as exc:
            return [f"TotalLoss: image {label} unparseable ({exc})"]
    va, vb = views
    diff = []
    if va.sb.geometry() != vb.sb.geometry():
        diff.append("geometry differs")
    if va.sb.object_count != vb.sb.object_count:
        diff.append(f"object_count {va.sb.object_count} != {vb.sb.object_count}")
    oa, ob = va.objects(), vb.objects()
    for name in sorted(set(oa) - set(ob)):
        diff.append(f"missing in b: {name}")
    for name in sorted(set(ob) - set(oa)):
        diff.append(f"missing in a: {name}")
    for name in sorted(set(oa) & set(ob)):
        if oa[name] != ob[name]:
            diff.append(f"bytes differ: {name}")
    return diff


def commit_adjacent(history) -> set[int]:
    out = set()
    for i, rec in enumerate(history):
        if rec.op == FLUSH or (rec.op == WRITE and rec.payload[:8] == JCOMMIT_MAGIC):
            out |= {i, i + 1}
    return {p for p in out if p <= len(history)}


def select_prefixes(history, selection="all") -> list[int]:
    """``all`` | ``sample:k:seed`` | ``list:1,2,3`` (or a bare comma list)."""
    n = len(history)
    if selection == "all":
        return list(range(n + 1))
    if selection.startswith("sample:"):
        try:
            _, k, seed = selection.split(":")
            k, seed = int(k), int(seed)
        except ValueError:
            raise ValueError(f"bad sample selection {selection!r}, want sample:k:seed") from None
        chosen = {0, n} | commit_adjacent(history)
        rest = sorted(set(range(n + 1)) - chosen)
        chosen |= set(random.Random(seed).sample(rest, min(k, len(rest))))
        return sorted(chosen)
    text = selection[5:] if selection.startswith("list:") else selection
    try:
        picks = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise ValueError(f"bad prefix selection {selection!r}") from None
    for p in picks:
        if not 0 <= p <= n:
            raise ValueError(f"prefix {p} outside 0..{n}")
    return picks


def judge(image, history, reference, prefix, variant="journaled", mode="logical") -> InterruptionVerdict:
    """Steps 5-10 for one prefix."""
    interrupted = replay(image, history, prefix)
    repaired, report = check_image(interrupted, variant)
    diff = compare_images(repaired, reference, mode)
    if diff:
        outcome = MISMATCH
    elif report.clean and not report.replayed:
        outcome = MATCH
    else:
        outcome = REPAIRED_TO_MATCH
    return InterruptionVerdict(prefix, outcome, diff, digest64(interrupted))


def run_campaign(image: bytes, selection="all", variant="journaled", workers=1, mode="logical") -> Campaign:
    reference, history, _ = record_check(image, variant)
    prefixes = select_prefixes(history, selection) if history else [0]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            verdicts = list(pool.map(lambda p: judge(image, history, reference, p, variant, mode), prefixes))
    else:
        verdicts = [judge(image, history, reference, p, variant, mode) for p in prefixes]
    verdicts.sort(key=lambda v: v.prefix_length)
    return Campaign(variant, history, digest64(reference), verdicts)
