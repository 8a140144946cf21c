"""The repairing checker (fsck analog) and an independent invariant audit.

Policy is drop-and-record: anything that cannot be trusted is removed and
reported, never reconstructed, except cross-linked extents which are cloned
so both owners keep their bytes.  Repairs are ordinary device writes so the
repair harness can record and cut them.

Two write strategies:

``journaled`` (shipped)
    replayed journal blocks are checkpointed first, then all metadata repairs
    go out as one journal transaction with clone data ordered ahead of it.
``inplace`` (buggy fixture)
    table, clone data, bitmap, superblock written in place with no journal.
    Cutting it between the table and the clone data loses objects.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..errors import FormatError
from .device import BlockDevice, BlockIO
from .layout import (ENTRY_SIZE, FREE_ENTRY, Entry, EntryError, ImageView, Superblock, blocks_for,
                     build_bitmap, object_checksum, read_journal, replayable_targets, unpack_entry)
from .store import write_transaction

VARIANTS = ("journaled", "inplace")

BITMAP_MISMATCH = "BitmapMismatch"
DANGLING_OBJECT = "DanglingObject"
BAD_OBJECT_CHECKSUM = "BadObjectChecksum"
INCOMPLETE_JOURNAL_TXN = "IncompleteJournalTxn"
BAD_SUPERBLOCK = "BadSuperblock"

REPAIRED, DROPPED, UNREPAIRABLE = "repaired", "dropped", "unrepairable"


@dataclass(frozen=True)
class Finding:
    kind: str
    location: str
    action: str
    detail: str = ""

    def render(self):
        extra = f" ({self.detail})" if self.detail else ""
        return f"{self.kind} at {self.location}: {self.action}{extra}"


@dataclass
class CheckReport:
    findings: list = field(default_factory=list)
    replayed: list = field(default_factory=list)
    writes: int = 0

    @property
    def clean(self):
        return not self.findings

    @property
    def unrepairable(self):
        return any(f.action == UNREPAIRABLE for f in self.findings)

    def add(self, kind, location, action, detail=""):
        self.findings.append(Finding(kind, location, action, detail))

    def kinds(self):
        return {f.kind for f in self.findings}

    def to_dict(self):
        return {"clean": self.clean, "findings": [asdict(f) for f in self.findings],
                "replayed": list(self.replayed), "writes": self.writes}

    def render(self):
        if self.clean:
            lines = ["clean"]
        else:
            lines = [f.render() for f in self.findings]
        lines += [f"replayed journal txn {seq}" for seq in self.replayed]
        return "\n".join(lines)


class _CountingIO:
    def __init__(self, io):
        self.io = io
        self.writes = 0

    def read(self, lba, count=1):
        return self.io.read(lba, count)

    def write(self, lba, data):
        self.writes += 1
        return self.io.write(lba, data)

    def flush(self):
        return self.io.flush()

    def mark(self, label):
        return self.io.mark(label)


class Checker:
    def __init__(self, device: BlockDevice, variant="journaled", rt=None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown checker variant {variant}")
        self.device = device
        self.variant = variant
        self.io = _CountingIO(BlockIO(device, rt))

    def _valid_sb(self, block):
        try:
            sb = Superblock.unpack(block)
            sb.validate(self.device.block_count)
        except (FormatError, ValueError):
            return None
        return sb

    def run(self) -> CheckReport:
        report = CheckReport()
        try:
            self._run(report)
        finally:
            report.writes = self.io.writes
        return report

    def _run(self, report):
        io = self.io
        n = self.device.block_count
        sb = self._valid_sb(io.read(0))
        backup_sb = self._valid_sb(io.read(n - 1))
        restored = False
        if sb is None:
            if backup_sb is None:
                report.add(BAD_SUPERBLOCK, "superblock", UNREPAIRABLE, "primary and backup both invalid")
                return
            report.add(BAD_SUPERBLOCK, "superblock", REPAIRED, "restored from backup")
            sb = backup_sb
            restored = True

        meta_lbas = [0, *range(sb.bitmap_start, sb.journal_start)]
        meta = {lba: io.read(lba) for lba in meta_lbas}

        # journal
        txn = read_journal(sb, io.read)
        drop_journal = False
        if restored:
            # primary lost: whatever the journal holds is treated as applied
            sb = sb.with_counts(seq=txn.seq if txn is not None else 0)
        elif txn is not None and txn.seq > sb.seq:
            replay_sb = None
            if txn.committed and replayable_targets(sb, txn.targets):
                replay_sb = sb if 0 not in txn.targets else self._valid_sb(txn.payload[txn.targets.index(0)])
            if replay_sb is not None:
                stale = [(lba, block) for lba, block in zip(txn.targets, txn.payload) if meta[lba] != block]
                for lba, block in stale:
                    io.write(lba, block)
                    meta[lba] = block
                if stale:
                    io.flush()
                report.replayed.append(txn.seq)
                sb = replay_sb
            else:
                report.add(INCOMPLETE_JOURNAL_TXN, f"journal seq {txn.seq}", DROPPED)
                drop_journal = True

        # object table
        bs = sb.block_size
        epb = sb.entries_per_block
        kept: list[tuple[int, Entry]] = []
        names = set()
        for slot in range(sb.table_slots):
            blk, off = divmod(slot, epb)
            raw = meta[sb.table_start + blk][off * ENTRY_SIZE:(off + 1) * ENTRY_SIZE]
            try:
                entry = unpack_entry(raw)
            except EntryError as exc:
                report.add(DANGLING_OBJECT, f"slot {slot}", DROPPED, str(exc))
                continue
            if entry is None:
                continue
            if entry.nblocks != blocks_for(entry.size, bs) or (
                    entry.nblocks and not sb.is_data(entry.start, entry.nblocks)) or (
                    not entry.nblocks and entry.start):
                report.add(DANGLING_OBJECT, f"slot {slot} ({entry.name})", DROPPED, "extent outside data region")
                continue
            if entry.name in names:
                report.add(DANGLING_OBJECT, f"slot {slot} ({entry.name})", DROPPED, "duplicate name")
                continue
            data = io.read(entry.start, entry.nblocks)[:entry.size] if entry.nblocks else b""
            if object_checksum(data) != entry.checksum:
                report.add(BAD_OBJECT_CHECKSUM, f"slot {slot} ({entry.name})", DROPPED)
                continue
            names.add(entry.name)
            kept.append((slot, entry))

        # cross-linked extents: first owner by slot keeps the blocks
        claimed = set()
        crosslinked = []
        final: dict[int, Entry] = {}
        for slot, entry in kept:
            blocks = set(entry.blocks())
            if blocks & claimed:
                crosslinked.append((slot, entry))
            else:
                claimed |= blocks
                final[slot] = entry
        clone_writes = []
        for slot, entry in crosslinked:
            start = _lowest_free_run(sb, claimed, entry.nblocks)
            if start is None:
                report.add(DANGLING_OBJECT, f"slot {slot} ({entry.name})", DROPPED, "cross-linked, no space to clone")
                continue
            data = io.read(entry.start, entry.nblocks)
            clone_writes.append((start, data))
            clone = replace(entry, start=start)
            claimed |= set(clone.blocks())
            final[slot] = clone
            report.add(DANGLING_OBJECT, f"slot {slot} ({entry.name})", REPAIRED,
                       f"cross-linked extent cloned to {start}")

        # rebuild metadata and diff it against what is on disk
        changes = {}
        for blk in range(sb.table_blocks):
            block = bytearray(bs)
            for off in range(epb):
                entry = final.get(blk * epb + off)
                block[off * ENTRY_SIZE:(off + 1) * ENTRY_SIZE] = entry.pack() if entry else FREE_ENTRY
            lba = sb.table_start + blk
            if bytes(block) != meta[lba]:
                changes[lba] = bytes(block)
        bitmap = build_bitmap(sb, final.values())
        bad_bits = 0
        for i in range(sb.bitmap_blocks):
            lba = sb.bitmap_start + i
            chunk = bytes(bitmap[i * bs:(i + 1) * bs])
            if chunk != meta[lba]:
                bad_bits += sum(bin(a ^ b).count("1") for a, b in zip(chunk, meta[lba]))
                changes[lba] = chunk
        if bad_bits:
            report.add(BITMAP_MISMATCH, "bitmap", REPAIRED, f"{bad_bits} bits rebuilt")
        if sb.object_count != len(final):
            report.add(BAD_SUPERBLOCK, "object_count", REPAIRED, f"{sb.object_count} -> {len(final)}")
        new_sb = sb.with_counts(object_count=len(final))
        expected_backup = sb.backup_copy().pack()
        bad_backup = io.read(n - 1) != expected_backup
        if bad_backup:
            report.add(BAD_SUPERBLOCK, "backup superblock", REPAIRED)

        # write repairs
        if self.variant == "journaled":
            if changes or clone_writes or new_sb.pack() != meta[0]:
                seq = max(sb.seq, txn.seq if txn is not None else 0) + 1
                new_sb = new_sb.with_counts(seq=seq)
                changes[0] = new_sb.pack()
                write_transaction(io, sb, seq, changes, clone_writes)
            elif drop_journal:
                io.write(sb.journal_start, bytes(bs))
                io.flush()
        else:
            if changes or clone_writes or new_sb.pack() != meta[0]:
                # bump seq so a stale journal txn can never be replayed over these writes
                new_sb = new_sb.with_counts(seq=max(sb.seq, txn.seq if txn is not None else 0) + 1)
                changes[0] = new_sb.pack()
            if drop_journal:
                io.write(sb.journal_start, bytes(bs))
            table = [lba for lba in sorted(changes) if sb.table_start <= lba < sb.journal_start]
            for lba in table:
                io.write(lba, changes[lba])
            for lba, data in clone_writes:
                io.write(lba, data)
            for lba in sorted(changes):
                if lba not in table:
                    io.write(lba, changes[lba])
            if changes or clone_writes or drop_journal:
                io.flush()
        if bad_backup:
            io.write(n - 1, expected_backup)
            io.flush()


def _lowest_free_run(sb, claimed, nblocks):
    run = 0
    for lba in range(sb.data_start, sb.data_start + sb.data_blocks):
        run = 0 if lba in claimed else run + 1
        if run == nblocks:
            return lba - nblocks + 1
    return None


def check_image(image: bytes, variant="journaled") -> tuple[bytes, CheckReport]:
    """Check a copy of ``image``; returns (repaired image, report)."""
    device = BlockDevice.from_image(image)
    report = Checker(device, variant).run()
    return device.image(), report


def audit_image(image: bytes) -> list[str]:
    """Independent StoreImage invariant audit.  Empty list means all hold."""
    problems = []
    try:
        view = ImageView(image)
    except (FormatError, ValueError) as exc:
        return [f"superblock: {exc}"]
    sb = view.sb
    try:
        backup = Superblock.unpack(view.block(sb.backup_lba))
        if backup.geometry() != sb.geometry():
            problems.append("backup superblock geometry differs")
    except (FormatError, ValueError) as exc:
        problems.append(f"backup superblock: {exc}")
    entries = []
    for slot, raw in view.slots():
        try:
            entry = unpack_entry(raw)
        except EntryError as exc:
            problems.append(f"slot {slot}: {exc}")
            continue
        if entry is not None:
            entries.append((slot, entry))
    seen_names = set()
    owner = {}
    for slot, entry in entries:
        if entry.name in seen_names:
            problems.append(f"slot {slot}: duplicate name {entry.name}")
        seen_names.add(entry.name)
        if entry.nblocks and not sb.is_data(entry.start, entry.nblocks):
            problems.append(f"slot {slot}: extent outside data region")
            continue
        for lba in entry.blocks():
            if lba in owner:
                problems.append(f"block {lba}: shared by slots {owner[lba]} and {slot}")
            owner[lba] = slot
        if object_checksum(view.object_bytes(entry)) != entry.checksum:
            problems.append(f"slot {slot}: object checksum mismatch")
    if bytes(build_bitmap(sb, [e for _, e in entries])) != view.bitmap():
        problems.append("bitmap disagrees with table")
    if sb.object_count != len(entries):
        problems.append(f"object_count {sb.object_count} but {len(entries)} entries")
    txn = view.journal()
    if txn is not None and txn.seq > sb.seq:
        problems.append(f"journal txn {txn.seq} not checkpointed")
    return problems
