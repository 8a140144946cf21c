"""A minimal journaling object store on a :class:`BlockDevice`.

Every metadata update is one journal transaction::

    data blocks, descriptor, payload   -> flush
    commit record                       -> flush   (txn durable here)
    checkpoint payload in place         -> flush

With ``journaled=False`` metadata is written in place followed by a single
flush, which is not crash safe; crashgen uses it as the negative control.
"""

from __future__ import annotations

import errno
from contextlib import nullcontext

from ..capabilities import EIType, allow_error_injection
from ..errors import FormatError, IOFault, MountError, StoreError
from .device import BlockIO
from .layout import (ENTRY_SIZE, FREE_ENTRY, NAME_MAX, Entry, EntryError, Superblock, bitmap_get,
                     bitmap_set, blocks_for, object_checksum, pack_commit, pack_descriptor, read_journal,
                     replayable_targets, unpack_entry)

GARBAGE = object()


def write_transaction(io, sb, seq, changes, data_writes=(), on_durable=None):
    """Journal ``changes`` (lba -> block image) atomically, then checkpoint them.

    Three flushes: after data + descriptor + payload, after the commit record,
    and after the in-place checkpoint.  A "durable" mark follows the commit.
    """
    bs = sb.block_size
    targets = sorted(changes)
    payload = [changes[t] for t in targets]
    if len(payload) > sb.journal_blocks - 2:
        raise StoreError(errno.E2BIG, "transaction larger than the journal")
    for lba, data in data_writes:
        io.write(lba, data)
    desc = pack_descriptor(seq, targets, bs)
    io.write(sb.journal_start, desc)
    io.write(sb.journal_start + 1, b"".join(payload))
    io.flush()
    io.write(sb.journal_start + 1 + len(payload), pack_commit(seq, desc, payload, bs))
    io.flush()
    if on_durable is not None:
        on_durable()
    io.mark("durable")
    for t in targets:
        io.write(t, changes[t])
    io.flush()


@allow_error_injection(EIType.ERRNO, "simstore.mount")
def open_ctree(store: Store) -> int:
    """Read the superblock, recover the journal and load metadata.  0 or -errno."""
    dev = store.device
    try:
        sb = Superblock.unpack(store.io.read(0))
        sb.validate(dev.block_count)
    except FormatError:
        return -errno.EUCLEAN
    except IOFault:
        return -errno.EIO
    try:
        txn = read_journal(sb, store.io.read)
        if txn is not None and txn.committed and txn.seq >= sb.seq and replayable_targets(sb, txn.targets):
            # the checkpoint may have been cut after the superblock landed, so
            # an equal seq still replays; only differing blocks are rewritten
            stale = [(lba, block) for lba, block in zip(txn.targets, txn.payload)
                     if store.io.read(lba) != block]
            if stale:
                for lba, block in stale:
                    store.io.write(lba, block)
                store.io.flush()
                store.replayed = txn.seq
                sb = Superblock.unpack(store.io.read(0))
                sb.validate(dev.block_count)
        elif txn is not None and txn.seq > sb.seq:
            store.io.write(sb.journal_start, bytes(sb.block_size))
            store.io.flush()
            store.discarded = txn.seq
        store._load(sb, txn)
    except FormatError:
        return -errno.EUCLEAN
    except IOFault:
        return -errno.EIO
    return 0


class Store:
    def __init__(self, device, rt=None, journaled=True):
        self.device = device
        self.rt = rt
        self.io = BlockIO(device, rt)
        self.journaled = journaled
        self.sb: Superblock | None = None
        self.read_only = False
        self.replayed = None
        self.discarded = None
        self.next_seq = 1

    @classmethod
    def mount(cls, device, rt=None, journaled=True) -> Store:
        store = cls(device, rt, journaled)
        with store._frame("simstore.mount"):
            err = rt.call_injectable(open_ctree, store) if rt is not None else open_ctree(store)
        if err:
            raise MountError(err, f"cannot mount {device.name}")
        return store

    def _load(self, sb, txn):
        self.sb = sb
        bs = sb.block_size
        self.bitmap = bytearray(self.io.read(sb.bitmap_start, sb.bitmap_blocks))
        table = self.io.read(sb.table_start, sb.table_blocks)
        self.table = [bytearray(table[i * bs:(i + 1) * bs]) for i in range(sb.table_blocks)]
        self.slots = []
        self.index: dict[str, tuple[int, Entry]] = {}
        for slot in range(sb.table_slots):
            raw = self._slot_bytes(slot)
            try:
                entry = unpack_entry(raw)
            except EntryError:
                entry = GARBAGE
            self.slots.append(entry)
            if isinstance(entry, Entry) and entry.name not in self.index:
                self.index[entry.name] = (slot, entry)
        journal_seq = txn.seq if txn is not None else 0
        self.next_seq = max(sb.seq, journal_seq) + 1

    def _slot_bytes(self, slot):
        blk, off = divmod(slot, self.sb.entries_per_block)
        return bytes(self.table[blk][off * ENTRY_SIZE:(off + 1) * ENTRY_SIZE])

    def _frame(self, symbol):
        return self.rt.calling(symbol) if self.rt is not None else nullcontext()

    def _kmalloc(self, cache, size):
        if self.rt is not None:
            self.rt.kmalloc(cache, size)

    def _alloc_pages(self, nbytes):
        if self.rt is not None and nbytes:
            pages = blocks_for(nbytes, 4096)
            self.rt.alloc_pages(max(0, (pages - 1).bit_length()))

    # queries

    def names(self):
        return sorted(self.index)

    def __contains__(self, name):
        return name in self.index

    def get(self, name) -> bytes:
        if name not in self.index:
            raise StoreError(errno.ENOENT, name)
        _, entry = self.index[name]
        with self._frame("simstore.get"):
            self._alloc_pages(entry.size)
            try:
                raw = self.io.read(entry.start, entry.nblocks) if entry.nblocks else b""
            except IOFault as exc:
                raise StoreError(errno.EIO, str(exc)) from exc
        data = raw[:entry.size]
        if object_checksum(data) != entry.checksum:
            raise StoreError(errno.EBADMSG, f"checksum mismatch on {name}")
        return data

    def objects(self) -> dict[str, bytes]:
        return {name: self.get(name) for name in self.names()}

    # updates

    def _writable(self):
        if self.sb is None:
            raise StoreError(errno.EINVAL, "not mounted")
        if self.read_only:
            raise StoreError(errno.EROFS, "store aborted after I/O error")

    def _find_extent(self, nblocks):
        sb = self.sb
        run = 0
        for lba in range(sb.data_start, sb.data_start + sb.data_blocks):
            run = 0 if bitmap_get(self.bitmap, lba) else run + 1
            if run == nblocks:
                return lba - nblocks + 1
        raise StoreError(errno.ENOSPC, f"no run of {nblocks} free blocks")

    def _free_slot(self):
        for slot, entry in enumerate(self.slots):
            if entry is None:
                return slot
        raise StoreError(errno.ENOSPC, "object table full")

    def put(self, name: str, data: bytes):
        self._writable()
        raw_name = name.encode()
        if not 0 < len(raw_name) <= NAME_MAX:
            raise StoreError(errno.ENAMETOOLONG if raw_name else errno.EINVAL, name)
        data = bytes(data)
        with self._frame("simstore.put"):
            nblocks = blocks_for(len(data), self.sb.block_size)
            old = self.index.get(name)
            slot = old[0] if old else self._free_slot()
            start = self._find_extent(nblocks) if nblocks else 0
            self._kmalloc("txn_handle", 256)
            self._alloc_pages(len(data))
            entry = Entry(name, start, nblocks, len(data), object_checksum(data))
            bitmap = bytearray(self.bitmap)
            if old:
                for lba in old[1].blocks():
                    bitmap_set(bitmap, lba, False)
            for lba in entry.blocks():
                bitmap_set(bitmap, lba)
            count = self.sb.object_count + (0 if old else 1)
            data_writes = [(start, data)] if nblocks else []
            self._transaction(slot, entry.pack(), bitmap, count, data_writes)
            self.slots[slot] = entry
            self.index[name] = (slot, entry)

    def delete(self, name: str):
        self._writable()
        if name not in self.index:
            raise StoreError(errno.ENOENT, name)
        with self._frame("simstore.delete"):
            slot, entry = self.index[name]
            self._kmalloc("txn_handle", 256)
            bitmap = bytearray(self.bitmap)
            for lba in entry.blocks():
                bitmap_set(bitmap, lba, False)
            self._transaction(slot, FREE_ENTRY, bitmap, self.sb.object_count - 1, [])
            self.slots[slot] = None
            del self.index[name]

    def _transaction(self, slot, entry_bytes, bitmap, object_count, data_writes):
        sb = self.sb
        bs = sb.block_size
        blk, off = divmod(slot, sb.entries_per_block)
        table_block = bytearray(self.table[blk])
        table_block[off * ENTRY_SIZE:(off + 1) * ENTRY_SIZE] = entry_bytes
        seq = self.next_seq
        new_sb = sb.with_counts(object_count=object_count, seq=seq)
        changes = {0: new_sb.pack(), sb.table_start + blk: bytes(table_block)}
        for i in range(sb.bitmap_blocks):
            chunk = bytes(bitmap[i * bs:(i + 1) * bs])
            if chunk != bytes(self.bitmap[i * bs:(i + 1) * bs]):
                changes[sb.bitmap_start + i] = chunk
        for _ in changes:
            self._kmalloc("buff_head", 104)

        state = {"durable": False}
        try:
            if self.journaled:
                write_transaction(self.io, sb, seq, changes, data_writes,
                                  on_durable=lambda: state.update(durable=True))
            else:
                for lba, data in data_writes:
                    self.io.write(lba, data)
                for t in sorted(changes):
                    self.io.write(t, changes[t])
                self.io.flush()
                state["durable"] = True
                self.io.mark("durable")
        except IOFault as exc:
            if state["durable"]:
                self._commit_memory(new_sb, bitmap, blk, table_block)
                self.read_only = True
            raise StoreError(errno.EIO, str(exc)) from exc
        self._commit_memory(new_sb, bitmap, blk, table_block)

    def _commit_memory(self, new_sb, bitmap, blk, table_block):
        self.sb = new_sb
        self.bitmap = bitmap
        self.table[blk] = table_block
        self.next_seq = new_sb.seq + 1

    def unmount(self):
        self.sb = None
